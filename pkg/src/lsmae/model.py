"""ViT masked autoencoder: encoder on visible patches, light decoder over the
full (optionally 2x2-downsampled) token grid, pixel regression loss."""

from __future__ import annotations

import functools
from dataclasses import asdict, dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .imaging import normalize_target, patch_stats, patchify, unpatchify
from .masking import MaskAssignment
from .specs import GeometryError, ImageSpec, MaskPlan, derive_input_spec

LN_EPS = 1e-6


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ViTMAEConfig:
    enc_depth: int
    enc_width: int
    enc_heads: int
    dec_depth: int
    dec_width: int
    dec_heads: int
    patch_size: int
    image_size: int
    mlp_ratio: int = 4
    decoder_downsample: bool = False
    pos_embed: str = "sincos"  # or "learned"
    in_chans: int = 3

    def __post_init__(self):
        for name in ("enc_depth", "dec_depth"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for w, h in ((self.enc_width, self.enc_heads), (self.dec_width, self.dec_heads)):
            if h <= 0 or w <= 0 or w % h:
                raise ConfigError(f"width {w} is not divisible by {h} heads")
        if self.pos_embed not in ("sincos", "learned"):
            raise ConfigError(f"unknown position embedding {self.pos_embed!r}")
        if self.pos_embed == "sincos" and (self.enc_width % 4 or self.dec_width % 4):
            raise ConfigError("sin-cos positions need widths divisible by 4")
        spec = derive_input_spec(self.image_size, self.patch_size)
        if self.decoder_downsample and spec.grid % 2:
            raise ConfigError(f"decoder downsampling needs an even grid, got {spec.grid}")

    @property
    def spec(self) -> ImageSpec:
        return derive_input_spec(self.image_size, self.patch_size)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def out_patch(self) -> int:
        """Side of the predicted pixel patch: ``2p`` when downsampling."""
        return 2 * self.patch_size if self.decoder_downsample else self.patch_size

    @property
    def dec_len(self) -> int:
        n = self.grid * self.grid
        return n // 4 if self.decoder_downsample else n

    def with_geometry(self, image_size: int, patch_size: int) -> "ViTMAEConfig":
        return replace(self, image_size=image_size, patch_size=patch_size)

    def to_meta(self) -> dict[str, str]:
        return {f"cfg.{k}": str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_meta(cls, meta: Mapping[str, str]) -> "ViTMAEConfig":
        kw = {}
        for name, f in cls.__dataclass_fields__.items():
            raw = meta.get(f"cfg.{name}")
            if raw is None:
                continue
            if f.type in ("bool",):
                kw[name] = raw == "True"
            elif f.type in ("int",):
                kw[name] = int(raw)
            else:
                kw[name] = raw
        return cls(**kw)


# Encoder widths/depths are the standard ViT values; decoders use half the
# encoder width and the same head count.
PRESETS = {
    "tiny": dict(enc_depth=2, enc_width=32, enc_heads=4, dec_depth=1, dec_width=16, dec_heads=4),
    "b": dict(enc_depth=12, enc_width=768, enc_heads=12, dec_depth=4, dec_width=384, dec_heads=12),
    "l": dict(enc_depth=24, enc_width=1024, enc_heads=16, dec_depth=8, dec_width=512, dec_heads=16),
}


def preset(name: str, image_size: int, patch_size: int, **overrides) -> ViTMAEConfig:
    try:
        base = PRESETS[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return ViTMAEConfig(image_size=image_size, patch_size=patch_size, **{**base, **overrides})


# ---------------------------------------------------------------- parameters


def _block_shapes(prefix: str, d: int, mlp_ratio: int) -> dict[str, tuple[int, ...]]:
    h = d * mlp_ratio
    return {
        f"{prefix}.norm1.weight": (d,),
        f"{prefix}.norm1.bias": (d,),
        f"{prefix}.attn.qkv.weight": (d, 3 * d),
        f"{prefix}.attn.qkv.bias": (3 * d,),
        f"{prefix}.attn.proj.weight": (d, d),
        f"{prefix}.attn.proj.bias": (d,),
        f"{prefix}.norm2.weight": (d,),
        f"{prefix}.norm2.bias": (d,),
        f"{prefix}.mlp.fc1.weight": (d, h),
        f"{prefix}.mlp.fc1.bias": (h,),
        f"{prefix}.mlp.fc2.weight": (h, d),
        f"{prefix}.mlp.fc2.bias": (d,),
    }


def param_shapes(cfg: ViTMAEConfig) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes. Linear weights are ``[in, out]``;
    the patch embedding is kept in ``[out, C, p, p]`` filter layout."""
    p, c, de, dd = cfg.patch_size, cfg.in_chans, cfg.enc_width, cfg.dec_width
    n = cfg.grid * cfg.grid
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (de, c, p, p),
        "patch_embed.bias": (de,),
        "cls_token": (de,),
    }
    if cfg.pos_embed == "learned":
        shapes["pos_embed"] = (n, de)
    for i in range(cfg.enc_depth):
        shapes.update(_block_shapes(f"enc.{i}", de, cfg.mlp_ratio))
    shapes["enc_norm.weight"] = (de,)
    shapes["enc_norm.bias"] = (de,)
    shapes["dec_embed.weight"] = (de, dd)
    shapes["dec_embed.bias"] = (dd,)
    shapes["mask_token"] = (dd,)
    if cfg.pos_embed == "learned":
        shapes["dec_pos_embed"] = (n, dd)
    if cfg.decoder_downsample:
        shapes["dec_downsample.weight"] = (dd, dd, 2, 2)
        shapes["dec_downsample.bias"] = (dd,)
    for i in range(cfg.dec_depth):
        shapes.update(_block_shapes(f"dec.{i}", dd, cfg.mlp_ratio))
    shapes["dec_norm.weight"] = (dd,)
    shapes["dec_norm.bias"] = (dd,)
    po = cfg.out_patch
    shapes["dec_pred.weight"] = (dd, po * po * c)
    shapes["dec_pred.bias"] = (po * po * c,)
    return shapes


def count_params(cfg: ViTMAEConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: ViTMAEConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    out: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("norm1.weight") or name.endswith("norm2.weight") or name.endswith(
            "norm.weight"
        ):
            arr = np.ones(shape)
        elif name.endswith(".bias"):
            arr = np.zeros(shape)
        elif name in ("cls_token", "mask_token", "pos_embed", "dec_pos_embed"):
            arr = rng.normal(0.0, 0.02, size=shape)
        elif name == "patch_embed.weight":
            fan_in = int(np.prod(shape[1:]))
            arr = _xavier(rng, fan_in, shape[0], shape)
        elif name == "dec_downsample.weight":
            arr = _xavier(rng, shape[1] * 4, shape[0], shape)
        else:
            arr = _xavier(rng, shape[0], shape[1], shape)
        out[name] = arr.astype(np.float32)
    return out


def as_tensors(store: Mapping[str, np.ndarray], dtype=None, requires_grad: bool = True):
    return {
        k: Tensor(np.array(v, dtype=dtype or v.dtype), requires_grad=requires_grad)
        for k, v in store.items()
    }


# ---------------------------------------------------------------- positions


def _sincos_1d(d: int, pos: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(d // 2, dtype=np.float64) / (d / 2.0))
    angles = np.outer(pos, omega)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


@functools.lru_cache(maxsize=32)
def _sincos_cached(g: int, d: int) -> np.ndarray:
    rows, cols = np.divmod(np.arange(g * g), g)
    emb = np.concatenate([_sincos_1d(d // 2, rows), _sincos_1d(d // 2, cols)], axis=1)
    emb.setflags(write=False)
    return emb


def positions_sincos(grid_side: int, width: int) -> np.ndarray:
    """Fixed 2D sin-cos table ``(g*g, width)``: first half of the channels
    encodes the grid row, second half the column."""
    if width % 4:
        raise ConfigError(f"sin-cos width must be divisible by 4, got {width}")
    return _sincos_cached(grid_side, width).copy()


# ---------------------------------------------------------------- network


def _attention(x: Tensor, params, prefix: str, heads: int) -> Tensor:
    b, n, d = x.shape
    dh = d // heads
    qkv = ad.linear(x, params[f"{prefix}.qkv.weight"], params[f"{prefix}.qkv.bias"])
    qkv = qkv.reshape(b, n, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = ad.softmax(ad.scale(q @ ad.swapaxes(k, -1, -2), dh**-0.5), axis=-1)
    y = (att @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
    return ad.linear(y, params[f"{prefix}.proj.weight"], params[f"{prefix}.proj.bias"])


def block(x: Tensor, params, prefix: str, heads: int) -> Tensor:
    """Pre-norm transformer block."""
    h = ad.layernorm(x, params[f"{prefix}.norm1.weight"], params[f"{prefix}.norm1.bias"], LN_EPS)
    x = x + _attention(h, params, f"{prefix}.attn", heads)
    h = ad.layernorm(x, params[f"{prefix}.norm2.weight"], params[f"{prefix}.norm2.bias"], LN_EPS)
    h = ad.gelu(ad.linear(h, params[f"{prefix}.mlp.fc1.weight"], params[f"{prefix}.mlp.fc1.bias"]))
    h = ad.linear(h, params[f"{prefix}.mlp.fc2.weight"], params[f"{prefix}.mlp.fc2.bias"])
    return x + h


def _filters_as_linear(w: Tensor) -> Tensor:
    # [out, C, kh, kw] -> [kh*kw*C, out] matching HWC-flattened inputs
    out = w.shape[0]
    return w.transpose(0, 2, 3, 1).reshape(out, -1).transpose(1, 0)


def _one_hot_rows(indices: np.ndarray, n: int, dtype) -> np.ndarray:
    sel = np.zeros(indices.shape + (n,), dtype=dtype)
    np.put_along_axis(sel, indices[..., None], 1.0, axis=-1)
    return sel


def _as_index_batch(visible_indices, batch: int) -> np.ndarray:
    idx = np.asarray(visible_indices, dtype=np.int64)
    if idx.ndim == 1:
        idx = np.broadcast_to(idx, (batch, idx.shape[0]))
    return idx


def encode(patches_visible, visible_indices, params, cfg: ViTMAEConfig) -> Tensor:
    """Embed visible patches, add positions, prepend [CLS], run the encoder.

    ``patches_visible`` is ``[B, L_e, p*p*3]`` (or unbatched ``[L_e, ...]``);
    returns ``[B, L_e + 1, enc_width]`` with [CLS] at row 0.
    """
    dtype = params["cls_token"].dtype
    x_np = np.asarray(patches_visible.data if isinstance(patches_visible, Tensor) else patches_visible)
    if x_np.ndim == 2:
        x_np = x_np[None]
    b, le, k = x_np.shape
    p = cfg.patch_size
    if k != p * p * cfg.in_chans:
        raise GeometryError(f"patch vectors have {k} values, expected {p * p * cfg.in_chans}")
    idx = _as_index_batch(visible_indices, b)
    if idx.shape != (b, le):
        raise GeometryError(f"{idx.shape[-1]} visible indices for {le} patches")
    n = cfg.grid * cfg.grid
    d = cfg.enc_width

    x = ad.linear(Tensor(x_np.astype(dtype)), _filters_as_linear(params["patch_embed.weight"]),
                  params["patch_embed.bias"])
    if cfg.pos_embed == "sincos":
        pos = positions_sincos(cfg.grid, d).astype(dtype)
        x = x + Tensor(pos[idx])
    else:
        x = x + Tensor(_one_hot_rows(idx, n, dtype)) @ params["pos_embed"]
    cls = Tensor(np.zeros((b, 1, d), dtype=dtype)) + params["cls_token"].reshape(1, d)
    x = ad.concat([cls, x], axis=1)
    for i in range(cfg.enc_depth):
        x = block(x, params, f"enc.{i}", cfg.enc_heads)
    return ad.layernorm(x, params["enc_norm.weight"], params["enc_norm.bias"], LN_EPS)


def _downsample_2x2(x: Tensor, params, cfg: ViTMAEConfig) -> Tensor:
    b, n, d = x.shape
    g, h = cfg.grid, cfg.grid // 2
    x = x.reshape(b, h, 2, h, 2, d).transpose(0, 1, 3, 2, 4, 5).reshape(b, h * h, 4 * d)
    return ad.linear(x, _filters_as_linear(params["dec_downsample.weight"]),
                     params["dec_downsample.bias"])


def decode(latents: Tensor, visible_indices, params, cfg: ViTMAEConfig) -> Tensor:
    """``[B, L_e + 1, enc_width]`` -> ``[B, L_d, out_patch**2 * 3]``.

    [CLS] is projected but left out of the spatial grid; masked slots get the
    shared mask token before decoder positions are added.
    """
    b, le1, _ = latents.shape
    idx = _as_index_batch(visible_indices, b)
    if idx.shape != (b, le1 - 1):
        raise GeometryError(f"{idx.shape[-1]} visible indices for {le1 - 1} latent tokens")
    dtype = params["mask_token"].dtype
    n = cfg.grid * cfg.grid
    x = ad.linear(latents, params["dec_embed.weight"], params["dec_embed.bias"])
    x = x[:, 1:, :]
    x = ad.scatter_rows(x, idx, n, params["mask_token"])
    if cfg.pos_embed == "sincos":
        x = x + Tensor(positions_sincos(cfg.grid, cfg.dec_width).astype(dtype))
    else:
        x = x + params["dec_pos_embed"]
    if cfg.decoder_downsample:
        x = _downsample_2x2(x, params, cfg)
    for i in range(cfg.dec_depth):
        x = block(x, params, f"dec.{i}", cfg.dec_heads)
    x = ad.layernorm(x, params["dec_norm.weight"], params["dec_norm.bias"], LN_EPS)
    return ad.linear(x, params["dec_pred.weight"], params["dec_pred.bias"])


def target_mask(assignments: Sequence[MaskAssignment], cfg: ViTMAEConfig) -> np.ndarray:
    """``[B, L_d]`` booleans marking the prediction tokens that enter the loss.

    In the downsampled variant a ``2p`` token counts only when all four of its
    ``p`` patches are hidden.
    """
    pm = np.stack([a.patch_mask() for a in assignments])
    if not cfg.decoder_downsample:
        return pm
    g, h = cfg.grid, cfg.grid // 2
    return pm.reshape(-1, h, 2, h, 2).all(axis=(2, 4)).reshape(-1, h * h)


def _check_assignments(assignments: Sequence[MaskAssignment], cfg: ViTMAEConfig) -> MaskPlan:
    plan = assignments[0].plan
    if plan.spec != cfg.spec:
        raise GeometryError(f"mask plan is for {plan.spec}, model is {cfg.spec}")
    for a in assignments[1:]:
        if a.plan != plan:
            raise GeometryError("all assignments in a batch must share one mask plan")
    return plan


def mae_forward_loss(images, assignments: Sequence[MaskAssignment], params, cfg: ViTMAEConfig):
    """Masked reconstruction loss on normalized pixels.

    Returns ``(loss, predictions, n_masked)``: the scalar mean over hidden
    target tokens of the per-token mean squared error, the decoder output
    ``[B, L_d, out_patch**2 * 3]``, and the loss denominator.
    """
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if images.shape[1:3] != (cfg.image_size, cfg.image_size):
        raise GeometryError(f"images are {images.shape[1:3]}, model expects I={cfg.image_size}")
    if len(assignments) != images.shape[0]:
        raise GeometryError(f"{len(assignments)} masks for {images.shape[0]} images")
    _check_assignments(assignments, cfg)
    dtype = params["cls_token"].dtype
    patches = patchify(images, cfg.patch_size)
    vis = np.stack([a.visible_patch_indices for a in assignments])
    visible = np.take_along_axis(patches, vis[..., None], axis=1)

    latents = encode(visible, vis, params, cfg)
    pred = decode(latents, vis, params, cfg)

    target = normalize_target(patchify(images, cfg.out_patch).astype(np.float64)).astype(dtype)
    tmask = target_mask(assignments, cfg)
    n_masked = int(tmask.sum())
    diff = pred - Tensor(target)
    per_token = ad.mean(diff * diff, axis=-1)
    weights = tmask.astype(dtype) / dtype.type(max(n_masked, 1))
    loss = ad.sum_(per_token * Tensor(weights))
    return loss, pred, n_masked


def reconstruct(img: np.ndarray, assignment: MaskAssignment, params, cfg: ViTMAEConfig) -> np.ndarray:
    """Fill the hidden patches of ``img`` with de-normalized predictions.

    Predictions are mapped back to pixels with each target patch's own mean
    and spread; visible pixels come from the original.
    """
    _, pred, _ = mae_forward_loss(img[None], [assignment], params, cfg)
    po = cfg.out_patch
    target_patches = patchify(img[None].astype(np.float64), po)
    mu, sd = patch_stats(target_patches)
    pixels = unpatchify(pred.data.astype(np.float64) * sd + mu, po)[0]
    g, p = cfg.grid, cfg.patch_size
    pm = assignment.patch_mask().reshape(g, g)
    hidden = np.repeat(np.repeat(pm, p, axis=0), p, axis=1)
    out = np.where(hidden[..., None], pixels, img)
    return np.clip(out, 0.0, 1.0).astype(np.float32)
