import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from implicit_deform.sampler import (
    NormalizationTransform,
    normalize_pair,
    perturb_correspondences,
    sample_space,
    sample_time,
    select_correspondences,
    validate_correspondences,
)

CUBE = np.array(list(itertools.product([0.0, 1.0], repeat=3)))


def test_normalize_cube_corners():
    A, B, tf = normalize_pair(CUBE, CUBE)
    np.testing.assert_allclose(tf.center, [0.5, 0.5, 0.5])
    np.testing.assert_allclose(A.mean(axis=0), 0.0, atol=1e-15)
    np.testing.assert_allclose(np.linalg.norm(A, axis=1).max(), 0.9, rtol=1e-15)
    np.testing.assert_array_equal(A, B)


def test_normalize_already_normalized_is_identity():
    A0, B0, _ = normalize_pair(CUBE, CUBE + 0.3)
    A1, B1, tf = normalize_pair(A0, B0)
    assert abs(tf.scale - 1.0) <= 1e-12 and np.abs(tf.center).max() <= 1e-12
    np.testing.assert_allclose(A1, A0, atol=1e-12)


finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (7, 3), elements=finite), arrays(np.float64, (5, 3), elements=finite))
def test_normalize_round_trip(P0, P1):
    both = np.concatenate([P0, P1])
    if np.linalg.norm(both - both.mean(axis=0), axis=1).max() < 1e-3:
        return
    A, B, tf = normalize_pair(P0, P1)
    assert np.linalg.norm(np.concatenate([A, B]), axis=1).max() <= 0.9 + 1e-12
    scale = max(1.0, np.abs(both).max())
    np.testing.assert_allclose(tf.invert(A), P0, atol=1e-9 * scale)
    np.testing.assert_allclose(tf.invert(B), P1, atol=1e-9 * scale)


def test_normalize_degenerate_and_empty():
    with pytest.raises(ValueError, match="degenerate"):
        normalize_pair(np.ones((4, 3)), np.ones((2, 3)))
    with pytest.raises(ValueError, match="nonempty"):
        normalize_pair(np.zeros((0, 3)), CUBE)


def test_identity_transform():
    tf = NormalizationTransform.identity()
    np.testing.assert_array_equal(tf.apply(CUBE), CUBE)


# -- space / time batches ---------------------------------------------------------------------

def test_sample_space_uniform_mean():
    n = 20000
    S = sample_space(np.random.default_rng(0), n, CUBE, CUBE, rho_near=0.0)
    assert S.shape == (n, 3)
    assert np.all(np.abs(S) <= 1.0)
    assert np.all(np.abs(S.mean(axis=0)) <= 3 / np.sqrt(n))


def test_sample_space_exact_cloud_points():
    P0, P1 = CUBE, CUBE + 5.0
    S = sample_space(np.random.default_rng(1), 50, P0, P1, sigma_near=0.0, rho_near=1.0)
    pool = {tuple(p) for p in np.concatenate([P0, P1])}
    assert all(tuple(s) in pool for s in S)


def test_sample_space_near_fraction():
    P = np.full((10, 3), 5.0)  # far outside the cube, so near samples are recognisable
    S = sample_space(np.random.default_rng(2), 10000, P, P, sigma_near=0.05, rho_near=0.5)
    frac = np.mean(np.linalg.norm(S - 5.0, axis=1) < 1.0)
    assert 0.45 <= frac <= 0.55


def test_sample_space_deterministic():
    a = sample_space(np.random.default_rng(3), 100, CUBE, CUBE)
    b = sample_space(np.random.default_rng(3), 100, CUBE, CUBE)
    assert a.tobytes() == b.tobytes()


def test_sample_time_knots():
    T = 25
    np.testing.assert_array_equal(sample_time(np.random.default_rng(0), T + 1, T, jitter=0.0), np.arange(T + 1) / T)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 500), st.integers(1, 50), st.floats(0, 2))
def test_sample_time_range(n, T, jitter):
    t = sample_time(np.random.default_rng(n), n, T, jitter)
    assert t.shape == (n,) and np.all((t >= 0) & (t <= 1))


def test_sample_time_mean():
    n = 40000
    t = sample_time(np.random.default_rng(4), n, 10)
    assert abs(t.mean() - 0.5) <= 3 * 0.3 / np.sqrt(n) + 1e-3


# -- correspondences -------------------------------------------------------------------------------

def full_pairs(n, seed=0):
    return np.column_stack([np.arange(n), np.random.default_rng(seed).permutation(n)])


def test_select_full_fraction_is_identity():
    C = full_pairs(50)
    np.testing.assert_array_equal(select_correspondences(C, 1.0, np.random.default_rng(0)), C)


def test_select_five_percent_of_20000():
    C = full_pairs(20000)
    S = select_correspondences(C, 0.05, np.random.default_rng(0))
    assert len(S) == 1000
    assert len(np.unique(S[:, 0])) == 1000
    assert {tuple(r) for r in S} <= {tuple(r) for r in C}


def test_select_deterministic_and_validated():
    C = full_pairs(300)
    a = select_correspondences(C, 0.2, np.random.default_rng(7))
    b = select_correspondences(C, 0.2, np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        select_correspondences(C, 0.0, np.random.default_rng(0))
    with pytest.raises(ValueError, match="selects nothing"):
        select_correspondences(C[:10], 0.01, np.random.default_rng(0))


def test_validate_correspondences():
    with pytest.raises(IndexError):
        validate_correspondences([[0, 4]], 3, 4)
    with pytest.raises(ValueError, match="duplicate"):
        validate_correspondences([[0, 1], [0, 2]], 3, 4)
    assert validate_correspondences(np.zeros((0, 2)), 3, 4).shape == (0, 2)


def test_perturb_zero_fraction_is_identity():
    C = full_pairs(40)
    P1 = np.random.default_rng(0).standard_normal((40, 3))
    for mode in ("local_k_swap", "global_swap"):
        out, rows = perturb_correspondences(C, P1, mode, 0.0, np.random.default_rng(0))
        np.testing.assert_array_equal(out, C)
        assert len(rows) == 0


def test_perturb_global_three_pairs_exhaustive():
    C = np.array([[0, 10], [1, 11], [2, 12]])
    P1 = np.zeros((13, 3))
    seen = set()
    for seed in range(300):
        out, rows = perturb_correspondences(C, P1, "global_swap", 1.0, np.random.default_rng(seed))
        np.testing.assert_array_equal(out[:, 0], C[:, 0])
        assert sorted(out[:, 1]) == [10, 11, 12]
        seen.add(tuple(out[:, 1]))
    assert seen == set(itertools.permutations([10, 11, 12]))


def test_perturb_local_counts_modified_pairs():
    rng = np.random.default_rng(0)
    P1 = rng.standard_normal((1000, 3))
    C = full_pairs(1000, 1)
    out, rows = perturb_correspondences(C, P1, "local_k_swap", 0.1, rng, k=5)
    assert len(out) == 1000 and len(rows) == 100
    changed = np.flatnonzero(out[:, 1] != C[:, 1])
    np.testing.assert_array_equal(changed, rows)
    # the new target is the 5th nearest neighbour of the old one
    tgt = P1[C[:, 1]]
    for r in rows[:10]:
        d = np.linalg.norm(tgt - tgt[r], axis=1)
        assert out[r, 1] == C[np.argsort(d)[5], 1]


@settings(max_examples=30, deadline=None)
@given(st.integers(6, 60), st.floats(0, 1), st.sampled_from(["local_k_swap", "global_swap"]), st.integers(0, 2**31))
def test_perturb_preserves_count_and_unselected(n, fraction, mode, seed):
    rng = np.random.default_rng(seed)
    C = full_pairs(n, seed)
    P1 = rng.standard_normal((n, 3))
    out, rows = perturb_correspondences(C, P1, mode, fraction, rng, k=5)
    assert out.shape == C.shape and len(rows) == round(fraction * n)
    untouched = np.setdiff1d(np.arange(n), rows)
    np.testing.assert_array_equal(out[untouched], C[untouched])
    np.testing.assert_array_equal(out[:, 0], C[:, 0])


def test_perturb_errors():
    C = full_pairs(5)
    P1 = np.zeros((5, 3))
    with pytest.raises(ValueError, match="k=5"):
        perturb_correspondences(C, P1, "local_k_swap", 0.5, np.random.default_rng(0), k=5)
    with pytest.raises(ValueError, match="mode"):
        perturb_correspondences(C, P1, "shuffle", 0.5, np.random.default_rng(0))
    with pytest.raises(ValueError):
        perturb_correspondences(C, P1, "global_swap", 1.5, np.random.default_rng(0))
