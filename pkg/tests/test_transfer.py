"""Moving checkpoints between (I, p, L) geometries."""

import numpy as np
import pytest

from conftest import tiny_setup
from lsmae import checkpoint as C
from lsmae import model as M
from lsmae.imaging import bicubic_resample
from lsmae.masking import sample_mask
from lsmae.specs import GeometryError, derive_input_spec, derive_mask_plan
from lsmae.training import plan_meta
from lsmae.transfer import (
    IncompatibleCheckpointError,
    resample_checkpoint,
    resample_patch_filters,
    resample_pos_grid,
)


def make_ckpt(I, p, seed=0, **overrides):
    cfg = M.preset("tiny", I, p, **overrides)
    plan = derive_mask_plan(cfg.spec, 1, 0.75, cfg.decoder_downsample)
    tensors = M.init_params(cfg, seed)
    tensors.update({f"opt/m/{k}": np.full_like(v, 0.1) for k, v in list(tensors.items())})
    return C.Checkpoint(tensors, {**cfg.to_meta(), **plan_meta(plan)}), cfg


def smooth_filters(out, c, p, seed=0):
    coarse = np.random.default_rng(seed).standard_normal((3, 3, out * c))
    return bicubic_resample(coarse, p, p).transpose(2, 0, 1).reshape(out, c, p, p)


def test_same_geometry_is_identity():
    ck, cfg = make_ckpt(32, 4, pos_embed="learned")
    out = resample_checkpoint(ck, cfg.spec, cfg.spec)
    assert C.to_bytes(out) == C.to_bytes(ck)


def test_resample_is_idempotent_bitwise():
    ck, cfg = make_ckpt(32, 4, pos_embed="learned")
    to = derive_input_spec(32, 2)
    once = resample_checkpoint(ck, cfg.spec, to)
    twice = resample_checkpoint(once, to, to)
    assert C.to_bytes(once) == C.to_bytes(twice)


def test_constant_tables_stay_constant():
    pos = np.full((64, 6), 0.37, dtype=np.float32)
    np.testing.assert_allclose(resample_pos_grid(pos, 13), 0.37, atol=1e-6)
    filt = np.full((4, 3, 8, 8), -1.5)
    np.testing.assert_allclose(resample_patch_filters(filt, 5), -1.5, atol=1e-6)
    np.testing.assert_allclose(resample_patch_filters(filt, 4, renormalize=True), -6.0, atol=1e-6)


def test_patch_change_at_fixed_length():
    # large-image/large-patch to small-image/small-patch keeps the grid (and L) fixed
    ck, cfg = make_ckpt(32, 8, pos_embed="learned")
    to = derive_input_spec(16, 4)
    out = resample_checkpoint(ck, cfg.spec, to)
    assert out.tensors["patch_embed.weight"].shape == (32, 3, 4, 4)
    assert out.tensors["dec_pred.weight"].shape == (16, 4 * 4 * 3)
    np.testing.assert_array_equal(out.tensors["pos_embed"], ck.tensors["pos_embed"])
    assert "opt/m/patch_embed.weight" not in out.tensors
    assert "opt/m/enc.0.attn.qkv.weight" in out.tensors
    assert out.meta["spec.L"] == "16" and out.meta["transfer.from"] == "32,8"
    assert M.ViTMAEConfig.from_meta(out.meta) == cfg.with_geometry(16, 4)


def test_larger_image_forward_is_finite():
    ck, cfg = make_ckpt(32, 4, pos_embed="learned")
    to = derive_input_spec(64, 4)
    out = resample_checkpoint(ck, cfg.spec, to)
    new_cfg = M.ViTMAEConfig.from_meta(out.meta)
    assert out.tensors["pos_embed"].shape == (256, 32)
    plan = derive_mask_plan(to, 2, 0.75)
    img = np.random.default_rng(0).random((1, 64, 64, 3)).astype(np.float32)
    loss, pred, _ = M.mae_forward_loss(img, [sample_mask(plan, 0, 0)], M.as_tensors(out.params()), new_cfg)
    assert np.isfinite(loss.item()) and pred.shape == (1, 256, 48)


def test_down_and_up_composition_is_close():
    filt = smooth_filters(8, 3, 16)
    back = resample_patch_filters(resample_patch_filters(filt, 8), 16)
    assert np.linalg.norm(back - filt) / np.linalg.norm(filt) < 0.2


def test_spec_mismatch_and_unknown_entries():
    ck, cfg = make_ckpt(32, 4)
    with pytest.raises(GeometryError):
        resample_checkpoint(ck, derive_input_spec(64, 4), derive_input_spec(32, 4))
    ck.tensors["head.weight"] = np.zeros((2, 2), np.float32)
    with pytest.raises(IncompatibleCheckpointError, match="head.weight"):
        resample_checkpoint(ck, cfg.spec, derive_input_spec(64, 4))


def test_sincos_checkpoint_runs_at_new_grid():
    ck, cfg = make_ckpt(16, 4)
    out = resample_checkpoint(ck, cfg.spec, derive_input_spec(32, 4))
    new_cfg = M.ViTMAEConfig.from_meta(out.meta)
    _, plan, images, masks = tiny_setup(image_size=32, patch_size=4)
    loss, _, _ = M.mae_forward_loss(images, masks, M.as_tensors(out.params()), new_cfg)
    assert np.isfinite(loss.item())


def test_non_geometry_tensors_copied_bitwise():
    ck, cfg = make_ckpt(32, 8, pos_embed="learned")
    out = resample_checkpoint(ck, cfg.spec, derive_input_spec(64, 4))
    geometry = {"patch_embed.weight", "pos_embed", "dec_pos_embed", "dec_pred.weight", "dec_pred.bias"}
    for name, arr in ck.params().items():
        if name not in geometry:
            assert out.tensors[name].tobytes() == arr.tobytes(), name


def test_sincos_regeneration_vs_interpolation_diagnostic(capsys):
    # sin-cos tables are regenerated at a new grid; this only reports how far
    # interpolating the old table would land from the regenerated one
    coarse = M.positions_sincos(14, 64)
    interp = resample_pos_grid(coarse, 28)
    fresh = M.positions_sincos(28, 64)
    gap = float(np.abs(interp - fresh).mean())
    with capsys.disabled():
        print(f"\n14x14 -> 28x28 sin-cos: mean |interpolated - regenerated| = {gap:.4f}")
    assert np.isfinite(gap)
