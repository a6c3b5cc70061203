"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Run directly (``python3 tests/test_acceptance.py``) for just the summary lines.
"""

import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import ACCEPTANCE_LINES, tiny_setup  # noqa: E402
from test_autodiff import LINEAR_CASES, LINEAR_TOL, NONLINEAR_CASES, NONLINEAR_TOL, check_grads  # noqa: E402
from test_checkpoint import GOLDEN, GOLDEN_META, GOLDEN_TENSORS, corruption_fuzz  # noqa: E402
from test_imaging import UPSAMPLE_2_TO_4, oracle_resize  # noqa: E402
from test_masking import mask_frequency_draws, partially_masked_units  # noqa: E402
from test_model import FULL_LOSS_TOL, gradient_errors  # noqa: E402

from lsmae import checkpoint as C  # noqa: E402
from lsmae import model as M  # noqa: E402
from lsmae import training as T  # noqa: E402
from lsmae.imaging import bicubic_resample  # noqa: E402
from lsmae.masking import sample_mask  # noqa: E402
from lsmae.specs import derive_input_spec, derive_mask_plan, estimate_flops  # noqa: E402
from lsmae.transfer import resample_checkpoint  # noqa: E402

# desk-scale training setup shared by the convergence and determinism criteria
TINY_I, TINY_P, TINY_M, TINY_RATIO = 32, 4, 2, 0.75
TREND_SEEDS = (0, 1, 2)
TREND_IMAGES, TREND_BATCH, TREND_EPOCHS = 256, 32, 25  # 200 steps
TREND_PEAK_LR = 3e-3
OVERFIT_IMAGES, OVERFIT_STEPS, OVERFIT_PEAK_LR = 8, 300, 3e-3


def report(number, title, ok, detail):
    """Record a summary line; conftest prints them at the end of the session."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} -- {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def tiny_geometry(**overrides):
    cfg = M.preset("tiny", TINY_I, TINY_P, **overrides)
    return cfg, derive_mask_plan(cfg.spec, TINY_M, TINY_RATIO, cfg.decoder_downsample)


def trend_run(seed, epochs=TREND_EPOCHS):
    cfg, plan = tiny_geometry()
    corpus = T.make_synthetic_corpus("checkers", TREND_IMAGES, TINY_I, seed=seed)
    tcfg = T.TrainConfig(epochs=epochs, batch_size=TREND_BATCH, base_lr=TREND_PEAK_LR * 256 / TREND_BATCH,
                         warmup_epochs=0.05 * epochs, weight_decay=0.05, seed=seed, crop="none", flip=True)
    return T.pretrain(corpus, cfg.spec, plan, cfg, tcfg)


# ---------------------------------------------------------------- 1


def test_criterion_1_spec_calculus():
    pairs = [((224, 16), 196), ((448, 16), 784), ((112, 16), 49), ((448, 32), 196),
             ((448, 64), 49), ((672, 24), 784), ((224, 8), 784)]
    bad = [(ip, L) for ip, L in pairs if derive_input_spec(*ip).seq_len != L]
    base = derive_mask_plan(derive_input_spec(224, 16), 1, 0.75)
    default = derive_mask_plan(derive_input_spec(448, 16), 2, 0.75)
    ok = not bad and base.enc_len == 49 and default.enc_len == 196 and default.dec_len == 784
    assert report(1, "geometry arithmetic", ok,
                  f"{len(pairs) - len(bad)}/{len(pairs)} (I,p)->L exact; L_e baseline={base.enc_len}, "
                  f"default={default.enc_len}")


# ---------------------------------------------------------------- 2


def test_criterion_2_gradients():
    lin = max(check_grads(fn, *args) for fn, *args in LINEAR_CASES.values())
    nonlin = max(check_grads(fn, *args) for fn, *args in NONLINEAR_CASES.values())
    cfg, _, images, masks = tiny_setup(image_size=16, patch_size=4)
    errs = gradient_errors(cfg, images, masks, n_samples=24)
    full = max(e[2] for e in errs)
    ok = lin < LINEAR_TOL and nonlin < NONLINEAR_TOL and full < FULL_LOSS_TOL and len(errs) >= 20
    assert report(2, "gradient correctness", ok,
                  f"linear max rel {lin:.1e} (<{LINEAR_TOL}), nonlinear {nonlin:.1e} (<{NONLINEAR_TOL}), "
                  f"tiny MAE {len(errs)} params max rel {full:.1e} (<{FULL_LOSS_TOL})")


# ---------------------------------------------------------------- 3


def test_criterion_3_masking_statistics():
    t0 = time.perf_counter()
    _, hits = mask_frequency_draws(10_000)
    freq = hits.mean(axis=0)
    rng = np.random.default_rng(3)
    split = 0
    for i in range(1000):
        m = int(rng.choice([1, 2, 4]))
        plan = derive_mask_plan(derive_input_spec(int(rng.integers(1, 9)) * m * 4, 4), m, float(rng.uniform()))
        split += partially_masked_units(sample_mask(plan, int(rng.integers(2**31)), i))
    ok = bool(np.all(np.abs(freq - 0.75) <= 0.02)) and split == 0
    assert report(3, "masking statistics", ok,
                  f"per-unit frequency in [{freq.min():.4f}, {freq.max():.4f}] (0.75+-0.02), "
                  f"partially masked units over 1000 plans = {split}, {time.perf_counter() - t0:.1f}s")


# ---------------------------------------------------------------- 4


def test_criterion_4_convergence():
    ratios = []
    for seed in TREND_SEEDS:
        _, log = trend_run(seed)
        losses = log.losses
        assert len(losses) == 200
        ratios.append(losses[150:200].mean() / losses[:50].mean())

    cfg, plan = tiny_geometry()
    corpus = T.make_synthetic_corpus("checkers", OVERFIT_IMAGES, TINY_I, seed=0)
    tcfg = T.TrainConfig(epochs=OVERFIT_STEPS, batch_size=OVERFIT_IMAGES,
                         base_lr=OVERFIT_PEAK_LR * 256 / OVERFIT_IMAGES, warmup_epochs=0.05 * OVERFIT_STEPS,
                         weight_decay=0.0, crop="none", flip=False, fixed_masks=True)
    _, log = T.pretrain(corpus, cfg.spec, plan, cfg, tcfg)
    overfit = log.losses[-1] / log.losses[0]
    ok = all(r < 0.5 for r in ratios) and overfit < 0.10
    assert report(4, "training convergence", ok,
                  "late/early loss " + ", ".join(f"{r:.3f}" for r in ratios) + f" (<0.5, seeds {TREND_SEEDS}); "
                  f"overfit final/initial {overfit:.2e} (<0.10)")


# ---------------------------------------------------------------- 5


def test_criterion_5_determinism(tmp_path):
    runs = []
    for k in range(2):
        ckpt, log = trend_run(seed=7, epochs=2)
        C.save(ckpt, tmp_path / f"{k}.ckpt")
        log.write(tmp_path / f"{k}.log")
        runs.append(((tmp_path / f"{k}.ckpt").read_bytes(), (tmp_path / f"{k}.log").read_bytes()))
    ok = runs[0] == runs[1]
    assert report(5, "determinism", ok,
                  f"checkpoints {len(runs[0][0])} bytes identical={runs[0][0] == runs[1][0]}, "
                  f"logs identical={runs[0][1] == runs[1][1]}")


# ---------------------------------------------------------------- 6


def test_criterion_6_decoder_downsample():
    cfg, plan = tiny_geometry(decoder_downsample=True)
    _, _, images, masks = tiny_setup(image_size=TINY_I, patch_size=TINY_P, decoder_downsample=True)
    params = M.as_tensors(M.init_params(cfg))
    loss, pred, _ = M.mae_forward_loss(images, masks, params, cfg)
    loss.backward()
    finite = np.isfinite(loss.item()) and all(np.all(np.isfinite(t.grad)) for t in params.values())
    gcfg, _, gimages, gmasks = tiny_setup(image_size=16, patch_size=4, decoder_downsample=True)
    worst = max(e[2] for e in gradient_errors(gcfg, gimages, gmasks, n_samples=24))
    out_side = int(np.sqrt(pred.shape[-1] // 3))
    ok = plan.dec_len == 16 == pred.shape[1] and out_side == 2 * TINY_P and finite and worst < FULL_LOSS_TOL
    assert report(6, "decoder-downsample variant", ok,
                  f"L_d={pred.shape[1]}, prediction patch {out_side}px, finite={finite}, "
                  f"grad max rel {worst:.1e}")


# ---------------------------------------------------------------- 7


def test_criterion_7_interpolation():
    rng = np.random.default_rng(0)
    img = rng.random((9, 7, 3))
    ident = np.abs(bicubic_resample(img, 9, 7) - img).max()
    const = np.abs(bicubic_resample(np.full((5, 6, 2), 0.3), 13, 4) - 0.3).max()
    two = np.array([[0.0, 1.0], [2.0, 3.0]])[..., None]
    expect = UPSAMPLE_2_TO_4 @ two[..., 0] @ UPSAMPLE_2_TO_4.T
    oracle = max(np.abs(bicubic_resample(two, 4, 4)[..., 0] - expect).max(),
                 np.abs(oracle_resize(two, 4, 4)[..., 0] - expect).max())

    cfg = M.preset("tiny", 32, 4, pos_embed="learned")
    ck = C.Checkpoint(M.init_params(cfg), cfg.to_meta() | {"spec.I": "32", "spec.p": "4"})
    to = derive_input_spec(48, 4)
    once = resample_checkpoint(ck, cfg.spec, to)
    idem = C.to_bytes(resample_checkpoint(once, to, to)) == C.to_bytes(once)
    ok = ident < 1e-6 and const < 1e-6 and oracle < 1e-6 and idem
    assert report(7, "interpolation", ok,
                  f"identity {ident:.1e}, constant {const:.1e}, 2x2->4x4 oracle {oracle:.1e}, "
                  f"resample idempotent bitwise={idem}")


# ---------------------------------------------------------------- 8


def test_criterion_8_compute_ratio():
    long_cfg, base_cfg = M.preset("b", 448, 16), M.preset("b", 224, 16)
    long_cost = estimate_flops(long_cfg, derive_mask_plan(long_cfg.spec, 2, 0.75)).total_flops
    base_cost = estimate_flops(base_cfg, derive_mask_plan(base_cfg.spec, 1, 0.75)).total_flops
    r = long_cost / base_cost
    assert report(8, "compute ratio", 3.0 <= r <= 5.0, f"L=784/L=196 cost ratio {r:.2f} (in [3, 5])")


# ---------------------------------------------------------------- 9


def test_criterion_9_checkpoint_format():
    t0 = time.perf_counter()
    golden = C.load(GOLDEN) == C.Checkpoint(GOLDEN_TENSORS, GOLDEN_META)
    crashes = corruption_fuzz(5000, seed=9)
    ok = golden and not crashes
    assert report(9, "checkpoint format", ok,
                  f"golden equal={golden}, 5000 corrupted files, {len(crashes)} unstructured errors, "
                  f"{time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
