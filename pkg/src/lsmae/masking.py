"""Joint ``m x m`` random masking, sampled outside the model.

Randomness comes from :func:`counter_rng`, a Philox-4x64 counter-based
generator whose key is derived from ``(seed, epoch, sample_id, stream)``.
Any worker can therefore reproduce the mask of any sample independently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .specs import GeometryError, MaskPlan

MASK_FILL = 0.5

STREAM_MASK = 0
STREAM_AUGMENT = 1
STREAM_SHUFFLE = 2


def counter_rng(seed: int, epoch: int = 0, sample_id: int = 0, stream: int = 0) -> np.random.Generator:
    key = np.random.SeedSequence([seed & 2**64 - 1, epoch, sample_id & 2**64 - 1, stream])
    return np.random.Generator(np.random.Philox(key))


@dataclass(frozen=True)
class MaskAssignment:
    plan: MaskPlan
    visible_patch_indices: np.ndarray
    masked_patch_indices: np.ndarray
    unit_mask: np.ndarray  # (u, u) bool, True = masked

    def patch_mask(self) -> np.ndarray:
        """Length-``L`` boolean array, True where the patch is hidden."""
        m = np.zeros(self.plan.seq_len, dtype=bool)
        m[self.masked_patch_indices] = True
        return m


def expand_unit_to_patches(unit_index: int, plan: MaskPlan) -> list[int]:
    if not 0 <= unit_index < plan.total_units:
        raise IndexError(f"unit {unit_index} out of range [0, {plan.total_units})")
    m, g, u = plan.mask_size, plan.grid, plan.units_per_side
    r, c = divmod(unit_index, u)
    return [(r * m + i) * g + (c * m + j) for i in range(m) for j in range(m)]


def _unit_patch_table(plan: MaskPlan) -> np.ndarray:
    """``(U, m*m)`` patch indices of every unit."""
    m, g, u = plan.mask_size, plan.grid, plan.units_per_side
    ids = np.arange(g * g).reshape(u, m, u, m).transpose(0, 2, 1, 3)
    return ids.reshape(u * u, m * m)


def sample_mask(plan: MaskPlan, rng_seed: int, sample_id: int, epoch: int = 0) -> MaskAssignment:
    rng = counter_rng(rng_seed, epoch, sample_id, STREAM_MASK)
    order = rng.permutation(plan.total_units)
    unit_mask = np.zeros(plan.total_units, dtype=bool)
    unit_mask[order[: plan.masked_units]] = True
    table = _unit_patch_table(plan)
    masked = np.sort(table[unit_mask].ravel())
    visible = np.sort(table[~unit_mask].ravel())
    u = plan.units_per_side
    return MaskAssignment(plan, visible, masked, unit_mask.reshape(u, u))


def mask_to_preview(assignment: MaskAssignment, img: np.ndarray) -> np.ndarray:
    """Copy of ``img`` with masked patches painted mid-gray."""
    spec = assignment.plan.spec
    if img.shape[:2] != (spec.image_size, spec.image_size):
        raise GeometryError(
            f"image {img.shape[1]}x{img.shape[0]} does not match I={spec.image_size}"
        )
    p, g = spec.patch_size, spec.grid
    pm = assignment.patch_mask().reshape(g, g)
    pixel_mask = np.repeat(np.repeat(pm, p, axis=0), p, axis=1)
    out = img.copy()
    out[pixel_mask] = MASK_FILL
    return out
