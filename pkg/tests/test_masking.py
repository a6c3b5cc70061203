"""Joint unit masking: counts, joint property, statistics and reproducibility."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lsmae.masking import MASK_FILL, counter_rng, expand_unit_to_patches, mask_to_preview, sample_mask
from lsmae.specs import GeometryError, derive_input_spec, derive_mask_plan


def unit_view(assignment):
    """``(U, m*m)`` patch-mask values grouped by unit, computed from the grid directly."""
    plan = assignment.plan
    g, m = plan.grid, plan.mask_size
    grid = assignment.patch_mask().reshape(g, g)
    u = g // m
    return grid.reshape(u, m, u, m).transpose(0, 2, 1, 3).reshape(u * u, m * m)


def partially_masked_units(assignment):
    units = unit_view(assignment)
    return int(np.sum(units.any(axis=1) & ~units.all(axis=1)))


def mask_frequency_draws(n=10_000):
    plan = derive_mask_plan(derive_input_spec(112, 16), 1, 0.75)
    assert plan.total_units == 49
    hits = np.zeros((n, 49), dtype=bool)
    for i in range(n):
        hits[i] = sample_mask(plan, 2024, i).unit_mask.ravel()
    return plan, hits


@pytest.fixture(scope="module")
def draws():
    return mask_frequency_draws()


def test_per_unit_frequency(draws):
    _, hits = draws
    freq = hits.mean(axis=0)
    assert np.all(np.abs(freq - 0.75) <= 0.02)


def test_pairwise_co_masking_is_hypergeometric(draws):
    plan, hits = draws
    n = hits.shape[0]
    k, U = plan.masked_units, plan.total_units
    p_both = k * (k - 1) / (U * (U - 1))
    h = hits.astype(np.int64)
    both = h.T @ h
    iu = np.triu_indices(U, 1)
    z = (both[iu] - n * p_both) / np.sqrt(n * p_both * (1 - p_both))
    # 1176 pairs: about 0.3% should fall outside 3 sigma by chance
    assert np.mean(np.abs(z) > 3) < 0.01
    assert np.max(np.abs(z)) < 5
    assert abs(np.mean(z)) < 0.2


def test_joint_fuzz_never_splits_a_unit():
    rng = np.random.default_rng(99)
    bad = 0
    for i in range(1000):
        m = int(rng.choice([1, 2, 4]))
        u = int(rng.integers(1, 9))
        p = int(rng.choice([2, 4, 8, 16]))
        ratio = float(rng.uniform(0, 1))
        plan = derive_mask_plan(derive_input_spec(u * m * p, p), m, ratio)
        bad += partially_masked_units(sample_mask(plan, int(rng.integers(2**32)), i))
    assert bad == 0


@settings(max_examples=100, deadline=None)
@given(st.sampled_from([1, 2, 4]), st.integers(1, 7), st.floats(0, 1), st.integers(0, 2**63), st.integers(0, 10**6))
def test_assignment_invariants(m, u, ratio, seed, sample_id):
    plan = derive_mask_plan(derive_input_spec(u * m * 4, 4), m, ratio)
    a = sample_mask(plan, seed, sample_id)
    assert len(a.visible_patch_indices) == plan.enc_len
    assert len(a.masked_patch_indices) == plan.masked_patches
    both = np.concatenate([a.visible_patch_indices, a.masked_patch_indices])
    np.testing.assert_array_equal(np.sort(both), np.arange(plan.seq_len))
    assert np.all(np.diff(a.visible_patch_indices) > 0)
    assert int(a.unit_mask.sum()) == plan.masked_units
    assert partially_masked_units(a) == 0


def test_same_key_same_mask_and_keys_differ():
    plan = derive_mask_plan(derive_input_spec(64, 4), 2, 0.75)
    a = sample_mask(plan, 5, 17, epoch=3)
    b = sample_mask(plan, 5, 17, epoch=3)
    np.testing.assert_array_equal(a.masked_patch_indices, b.masked_patch_indices)
    others = [sample_mask(plan, 5, 18, 3), sample_mask(plan, 5, 17, 4), sample_mask(plan, 6, 17, 3)]
    assert all(not np.array_equal(o.unit_mask, a.unit_mask) for o in others)


def test_streams_are_independent():
    x = counter_rng(1, 2, 3, 0).random(4)
    y = counter_rng(1, 2, 3, 1).random(4)
    assert not np.allclose(x, y)
    np.testing.assert_array_equal(x, counter_rng(1, 2, 3, 0).random(4))


def test_expand_unit_to_patches():
    plan = derive_mask_plan(derive_input_spec(32, 4), 2, 0.75)  # grid 8, 4x4 units
    assert expand_unit_to_patches(0, plan) == [0, 1, 8, 9]
    assert expand_unit_to_patches(5, plan) == [18, 19, 26, 27]
    with pytest.raises(IndexError):
        expand_unit_to_patches(16, plan)


def test_preview_paints_only_masked_patches():
    plan = derive_mask_plan(derive_input_spec(16, 4), 1, 0.5)
    img = np.random.default_rng(0).random((16, 16, 3)).astype(np.float32)
    a = sample_mask(plan, 0, 0)
    out = mask_to_preview(a, img)
    from lsmae.imaging import patchify
    pm = a.patch_mask()
    np.testing.assert_array_equal(patchify(out, 4)[~pm], patchify(img, 4)[~pm])
    assert np.all(patchify(out, 4)[pm] == MASK_FILL)
    with pytest.raises(GeometryError):
        mask_to_preview(a, img[:8])
