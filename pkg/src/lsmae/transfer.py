"""Move a checkpoint to a new ``(I, p, L)`` geometry.

Patch-embedding filters (and the pixel head, whose outputs are patch-shaped)
are bicubic-resampled; learned position tables are resampled as grids;
sin-cos positions are parameter-free and simply regenerate at the new grid.
Everything else is copied bit-for-bit.
"""

from __future__ import annotations

import math
import re

import numpy as np

from .checkpoint import Checkpoint
from .imaging import bicubic_resample
from .specs import GeometryError, ImageSpec, derive_mask_plan

_BLOCK = r"(enc|dec)\.\d+\.(norm1|norm2)\.(weight|bias)|(enc|dec)\.\d+\.(attn\.qkv|attn\.proj|mlp\.fc1|mlp\.fc2)\.(weight|bias)"
_SCHEMA = re.compile(
    r"^(?:opt/[mv]/)?(?:"
    r"patch_embed\.(weight|bias)|cls_token|pos_embed|enc_norm\.(weight|bias)|"
    r"dec_embed\.(weight|bias)|mask_token|dec_pos_embed|dec_downsample\.(weight|bias)|"
    r"dec_norm\.(weight|bias)|dec_pred\.(weight|bias)|" + _BLOCK + r")$"
)
GEOMETRY_PARAMS = ("patch_embed.weight", "pos_embed", "dec_pos_embed", "dec_pred.weight", "dec_pred.bias")


class IncompatibleCheckpointError(ValueError):
    def __init__(self, names):
        self.names = sorted(names)
        super().__init__("unknown checkpoint entries: " + ", ".join(self.names))


def resample_pos_grid(pos: np.ndarray, new_side: int) -> np.ndarray:
    """``(g*g, d)`` position table -> ``(g'*g', d)`` by per-channel bicubic."""
    n, d = pos.shape
    g = math.isqrt(n)
    if g * g != n:
        raise GeometryError(f"position table length {n} is not a perfect square")
    if new_side == g:
        return pos.copy()
    grid = pos.reshape(g, g, d).astype(np.float64)
    return bicubic_resample(grid, new_side, new_side).reshape(new_side * new_side, d).astype(pos.dtype)


def resample_patch_filters(filters: np.ndarray, new_p: int, renormalize: bool = False) -> np.ndarray:
    """``(out, C, p, p)`` -> ``(out, C, p', p')``, one bicubic resize per plane.

    ``renormalize`` scales by ``(p / p')**2`` so a filter's response to a flat
    patch is unchanged; off by default.
    """
    out_ch, c, p, _ = filters.shape
    if new_p < 1:
        raise ValueError(f"patch size must be >= 1, got {new_p}")
    if new_p == p:
        return filters.copy()
    planes = filters.reshape(out_ch * c, p, p).transpose(1, 2, 0).astype(np.float64)
    res = bicubic_resample(planes, new_p, new_p).transpose(2, 0, 1)
    if renormalize:
        res = res * (p / new_p) ** 2
    return res.reshape(out_ch, c, new_p, new_p).astype(filters.dtype)


def _resample_pixel_head(arr: np.ndarray, ratio: float, channels: int = 3) -> np.ndarray:
    # trailing axis holds a (po, po, C) patch in HWC order
    lead = arr.shape[:-1]
    k = arr.shape[-1]
    po = math.isqrt(k // channels)
    if po * po * channels != k:
        raise GeometryError(f"pixel head width {k} is not a square patch")
    new_po = int(round(po * ratio))
    flat = arr.reshape(-1, po, po, channels)
    planes = flat.transpose(1, 2, 0, 3).reshape(po, po, -1).astype(np.float64)
    res = bicubic_resample(planes, new_po, new_po).reshape(new_po, new_po, flat.shape[0], channels)
    res = res.transpose(2, 0, 1, 3).reshape(*lead, new_po * new_po * channels)
    return res.astype(arr.dtype)


def resample_checkpoint(
    ckpt: Checkpoint, from_spec: ImageSpec, to_spec: ImageSpec, renormalize: bool = False
) -> Checkpoint:
    unknown = [k for k in ckpt.tensors if not _SCHEMA.match(k)]
    if unknown:
        raise IncompatibleCheckpointError(unknown)
    meta_I, meta_p = ckpt.meta.get("spec.I"), ckpt.meta.get("spec.p")
    if meta_I is not None and (int(meta_I), int(meta_p)) != (from_spec.image_size, from_spec.patch_size):
        raise GeometryError(f"checkpoint was trained at I={meta_I} p={meta_p}, not {from_spec}")
    if from_spec == to_spec:
        return Checkpoint(dict(ckpt.tensors), dict(ckpt.meta))

    p0, p1 = from_spec.patch_size, to_spec.patch_size
    g1 = to_spec.grid
    out: dict[str, np.ndarray] = {}
    changed: set[str] = set()
    for name, arr in ckpt.tensors.items():
        if name.startswith("opt/"):
            continue
        new = arr
        if name == "patch_embed.weight" and p1 != p0:
            new = resample_patch_filters(arr, p1, renormalize)
        elif name in ("pos_embed", "dec_pos_embed") and from_spec.grid != g1:
            new = resample_pos_grid(arr, g1)
        elif name in ("dec_pred.weight", "dec_pred.bias") and p1 != p0:
            new = _resample_pixel_head(arr, p1 / p0)
        if new is not arr:
            changed.add(name)
        out[name] = new
    # optimizer moments only survive for tensors whose shape is untouched
    for name, arr in ckpt.tensors.items():
        if name.startswith("opt/") and name.split("/", 2)[2] not in changed:
            out[name] = arr

    meta = dict(ckpt.meta)
    meta.update({
        "spec.I": str(to_spec.image_size),
        "spec.p": str(to_spec.patch_size),
        "spec.L": str(to_spec.seq_len),
    })
    if "cfg.image_size" in meta:
        meta["cfg.image_size"] = str(to_spec.image_size)
        meta["cfg.patch_size"] = str(to_spec.patch_size)
    if "mask.m" in meta:
        try:
            plan = derive_mask_plan(
                to_spec, int(meta["mask.m"]), float(meta["mask.ratio"]),
                meta.get("cfg.decoder_downsample") == "True",
            )
        except GeometryError:
            for k in [k for k in meta if k.startswith("mask.")]:
                del meta[k]
        else:
            meta["mask.U"] = str(plan.total_units)
            meta["mask.L_e"] = str(plan.enc_len)
            meta["mask.L_d"] = str(plan.dec_len)
    meta["transfer.from"] = f"{from_spec.image_size},{from_spec.patch_size}"
    return Checkpoint(out, meta)
