"""Images as ``(H, W, 3)`` float32 arrays in ``[0, 1]``: patchification,
bicubic resampling, target normalization, and PPM/PGM I/O."""

from __future__ import annotations

import math
import os
from pathlib import Path

import numpy as np

from .specs import GeometryError

KEYS_A = -0.5
TARGET_EPS = 1e-6


# ---------------------------------------------------------------- patches


def patchify(img: np.ndarray, patch_size: int) -> np.ndarray:
    """``(..., I, I, C)`` -> ``(..., L, p*p*C)`` in raster order.

    Within a patch, pixels are row-major with channels last.
    """
    *lead, h, w, c = img.shape
    p = patch_size
    if h != w:
        raise GeometryError(f"image must be square, got {h}x{w}")
    if h % p:
        raise GeometryError(f"image side {h} is not divisible by patch size {p}")
    g = h // p
    x = img.reshape(*lead, g, p, g, p, c)
    x = np.moveaxis(x, -4, -3)  # (..., g, g, p, p, c)
    return x.reshape(*lead, g * g, p * p * c)


def unpatchify(patches: np.ndarray, patch_size: int, channels: int = 3) -> np.ndarray:
    *lead, n, k = patches.shape
    p = patch_size
    g = math.isqrt(n)
    if g * g != n or k != p * p * channels:
        raise GeometryError(f"cannot unpatchify {patches.shape} with p={p}, C={channels}")
    x = patches.reshape(*lead, g, g, p, p, channels)
    x = np.moveaxis(x, -3, -4)
    return x.reshape(*lead, g * p, g * p, channels)


def normalize_target(patches: np.ndarray, eps: float = TARGET_EPS) -> np.ndarray:
    """Standardize each patch with statistics over all of its values."""
    x = np.asarray(patches)
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def patch_stats(patches: np.ndarray, eps: float = TARGET_EPS):
    """Per-patch mean and ``sqrt(var + eps)``, for undoing :func:`normalize_target`."""
    return patches.mean(axis=-1, keepdims=True), np.sqrt(patches.var(axis=-1, keepdims=True) + eps)


# ---------------------------------------------------------------- resampling


def cubic_kernel(t, a: float = KEYS_A):
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def resample_matrix(n_in: int, n_out: int, a: float = KEYS_A) -> np.ndarray:
    """``(n_out, n_in)`` interpolation weights along one axis.

    Half-pixel-centre mapping, edge samples clamped.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError(f"sizes must be positive, got {n_in} -> {n_out}")
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    base = np.floor(src).astype(np.int64)
    frac = src - base
    w = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    for k in (-1, 0, 1, 2):
        idx = np.clip(base + k, 0, n_in - 1)
        np.add.at(w, (rows, idx), cubic_kernel(frac - k, a))
    return w


def bicubic_resample(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable Keys (a=-0.5) cubic resize of ``(H, W, C)`` to ``(out_h, out_w, C)``."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    h, w = grid.shape[:2]
    wy = resample_matrix(h, out_h)
    wx = resample_matrix(w, out_w)
    # two separable passes; a single three-operand einsum is O(h*w*out_h*out_w)
    rows = np.tensordot(wy, grid.astype(np.float64), axes=(1, 0))  # (out_h, w, C)
    out = np.einsum("jw,iwc->ijc", wx, rows)
    return out.astype(grid.dtype if grid.dtype.kind == "f" else np.float64)


def resize_long_side(img: np.ndarray, target: int) -> np.ndarray:
    if target < 1:
        raise ValueError(f"target must be >= 1, got {target}")
    h, w = img.shape[:2]
    if max(h, w) == target:
        return img
    s = target / max(h, w)
    nh = target if h >= w else max(1, int(round(h * s)))
    nw = target if w >= h else max(1, int(round(w * s)))
    return bicubic_resample(img, nh, nw)


def random_resized_crop(
    img: np.ndarray,
    size: int,
    rng: np.random.Generator,
    scale=(0.2, 1.0),
    ratio=(3 / 4, 4 / 3),
) -> np.ndarray:
    """Crop a random area fraction/aspect box and resize it to ``size x size``.

    Falls back to a centre crop of the short side after ten rejected draws.
    """
    h, w = img.shape[:2]
    area = h * w
    log_r = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(*scale)
        ar = math.exp(rng.uniform(*log_r))
        cw = int(round(math.sqrt(target * ar)))
        ch = int(round(math.sqrt(target / ar)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            break
    else:
        ch = cw = min(h, w)
        top, left = (h - ch) // 2, (w - cw) // 2
    crop = img[top : top + ch, left : left + cw]
    return np.clip(bicubic_resample(crop, size, size), 0.0, 1.0)


def center_resize(img: np.ndarray, size: int) -> np.ndarray:
    """Centre-crop to a square and resize to ``size``."""
    h, w = img.shape[:2]
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    crop = img[top : top + s, left : left + s]
    if s == size:
        return crop
    return np.clip(bicubic_resample(crop, size, size), 0.0, 1.0)


# ---------------------------------------------------------------- PPM / PGM


class ImageFormatError(ValueError):
    pass


def _read_header(buf: bytes, n_fields: int):
    fields: list[bytes] = []
    pos = 0
    while len(fields) < n_fields:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise ImageFormatError("truncated header")
        if buf[pos : pos + 1] == b"#":
            end = buf.find(b"\n", pos)
            pos = len(buf) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        fields.append(buf[start:pos])
    # single whitespace byte separates header from raster
    return fields, pos + 1


def read_pnm(path) -> np.ndarray:
    """Read binary PPM (P6) or PGM (P5) with maxval 255 as float32 ``(H, W, 3)``."""
    buf = Path(path).read_bytes()
    fields, offset = _read_header(buf, 4)
    magic = fields[0]
    if magic not in (b"P6", b"P5"):
        raise ImageFormatError(f"{path}: unsupported magic {magic!r}")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise ImageFormatError(f"{path}: bad header") from exc
    if maxval != 255:
        raise ImageFormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    c = 3 if magic == b"P6" else 1
    n = w * h * c
    raster = buf[offset : offset + n]
    if len(raster) != n:
        raise ImageFormatError(f"{path}: expected {n} raster bytes, found {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, c).astype(np.float32) / 255.0
    if c == 1:
        arr = np.repeat(arr, 3, axis=2)
    return arr


def to_bytes(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def write_ppm(path, img: np.ndarray) -> None:
    if img.ndim == 2:
        img = img[..., None]
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    h, w = img.shape[:2]
    _atomic_write(path, f"P6\n{w} {h}\n255\n".encode() + to_bytes(img).tobytes())


def write_pgm(path, img: np.ndarray) -> None:
    """Write a grayscale preview; RGB input is averaged over channels."""
    if img.ndim == 3:
        img = img.mean(axis=2)
    h, w = img.shape
    _atomic_write(path, f"P5\n{w} {h}\n255\n".encode() + to_bytes(img).tobytes())
