"""Input geometry arithmetic: image size, patch size, sequence length,
mask geometry and a rough compute estimate."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable

if TYPE_CHECKING:
    from .model import ViTMAEConfig


class GeometryError(ValueError):
    """A size does not divide evenly into the requested grid."""


@dataclass(frozen=True)
class ImageSpec:
    image_size: int
    patch_size: int
    seq_len: int

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    def __str__(self):
        return f"I={self.image_size} p={self.patch_size} L={self.seq_len}"


@dataclass(frozen=True)
class MaskPlan:
    spec: ImageSpec
    mask_size: int
    mask_ratio: float
    grid: int
    units_per_side: int
    total_units: int
    masked_units: int
    visible_units: int
    enc_len: int
    dec_len: int
    decoder_downsample: bool = False

    @property
    def seq_len(self) -> int:
        return self.spec.seq_len

    @property
    def masked_patches(self) -> int:
        return self.masked_units * self.mask_size**2


@dataclass(frozen=True)
class CostEstimate:
    encoder_flops: float
    decoder_flops: float

    @property
    def total_flops(self) -> float:
        return self.encoder_flops + self.decoder_flops


def derive_input_spec(image_size: int, patch_size: int) -> ImageSpec:
    if image_size <= 0 or patch_size <= 0:
        raise GeometryError(f"sizes must be positive (I={image_size}, p={patch_size})")
    if image_size % patch_size:
        raise GeometryError(
            f"image size {image_size} is not divisible by patch size {patch_size}"
        )
    g = image_size // patch_size
    return ImageSpec(image_size, patch_size, g * g)


def derive_mask_plan(
    spec: ImageSpec, mask_size: int, mask_ratio: float, decoder_downsample: bool = False
) -> MaskPlan:
    """Mask geometry for joint ``mask_size x mask_size`` units.

    The visible unit count is ``round(U * (1 - ratio))`` so every image keeps
    the same encoder length.
    """
    if mask_size <= 0:
        raise GeometryError(f"mask size must be positive, got {mask_size}")
    if not 0.0 <= mask_ratio <= 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1], got {mask_ratio}")
    g = spec.grid
    if g % mask_size:
        raise GeometryError(f"patch grid {g}x{g} is not divisible by mask size {mask_size}")
    if decoder_downsample and g % 2:
        raise GeometryError(f"decoder downsampling needs an even patch grid, got {g}")
    u = g // mask_size
    total = u * u
    visible = int(round(total * (1.0 - mask_ratio)))
    masked = total - visible
    dec_len = spec.seq_len // 4 if decoder_downsample else spec.seq_len
    return MaskPlan(
        spec=spec,
        mask_size=mask_size,
        mask_ratio=mask_ratio,
        grid=g,
        units_per_side=u,
        total_units=total,
        masked_units=masked,
        visible_units=visible,
        enc_len=visible * mask_size**2,
        dec_len=dec_len,
        decoder_downsample=decoder_downsample,
    )


def enumerate_fix_one_vary_two(
    fixed: str,
    value: int,
    candidates: Iterable[int],
    diagnostics: list[str] | None = None,
) -> list[ImageSpec]:
    """Hold one of ``I``, ``p``, ``L`` at ``value`` and sweep another.

    Candidates are patch sizes when ``I`` is fixed and image sizes when ``p``
    or ``L`` is fixed. Combinations that do not give an integral square grid
    are dropped; a reason is appended to ``diagnostics`` if one is given.
    """
    if fixed not in ("I", "p", "L"):
        raise ValueError(f"fixed dimension must be one of I, p, L; got {fixed!r}")
    out: list[ImageSpec] = []
    for c in candidates:
        if c <= 0 or value <= 0:
            raise ValueError("candidate and fixed values must be positive")
        try:
            if fixed == "I":
                spec = derive_input_spec(value, c)
            elif fixed == "p":
                spec = derive_input_spec(c, value)
            else:
                g = math.isqrt(value)
                if g * g != value:
                    raise GeometryError(f"L={value} is not a perfect square")
                if c % g:
                    raise GeometryError(f"I={c} is not divisible by grid side {g}")
                spec = derive_input_spec(c, c // g)
        except GeometryError as exc:
            if diagnostics is not None:
                diagnostics.append(f"{fixed}={value}, candidate {c}: {exc}")
            continue
        out.append(spec)
    return out


def block_flops(n: int, d: int) -> float:
    """Dense transformer block estimate: projections/MLP plus attention."""
    return 12.0 * n * d * d + 2.0 * n * n * d


def estimate_flops(cfg: "ViTMAEConfig", plan: MaskPlan) -> CostEstimate:
    """Order-of-magnitude per-image cost; not a benchmark."""
    enc = cfg.enc_depth * block_flops(plan.enc_len + 1, cfg.enc_width)
    dec = cfg.dec_depth * block_flops(plan.dec_len, cfg.dec_width)
    return CostEstimate(encoder_flops=enc, decoder_flops=dec)
