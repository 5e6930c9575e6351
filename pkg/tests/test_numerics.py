import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from attnres.numerics import (
    NonFiniteError,
    SoftmaxStats,
    attn_with_stats,
    check_finite,
    online_merge,
    rmsnorm,
    softmax_with_stats,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_rmsnorm_ones_is_fixed_point():
    np.testing.assert_array_equal(rmsnorm(np.ones(4), np.ones(4), eps=0.0), np.ones(4))


def test_rmsnorm_zero_vector_stays_zero():
    np.testing.assert_array_equal(rmsnorm(np.zeros(5), np.ones(5), eps=1e-6), np.zeros(5))


@pytest.mark.parametrize("c", [0.5, 3.0, 100.0])
def test_rmsnorm_scale_invariance_examples(rng, c):
    x = rng.normal(size=7)
    assert np.max(np.abs(rmsnorm(c * x, eps=0.0) - rmsnorm(x, eps=0.0))) < 1e-12


@given(arrays(np.float64, 6, elements=st.floats(-10, 10)).filter(lambda v: np.abs(v).max() > 1e-3),
       st.floats(1e-3, 1e3))
def test_rmsnorm_scale_invariance_property(x, c):
    assert np.max(np.abs(rmsnorm(c * x, eps=0.0) - rmsnorm(x, eps=0.0))) < 1e-12


def test_rmsnorm_rejects_negative_eps_and_bad_gain():
    with pytest.raises(ValueError):
        rmsnorm(np.ones(3), eps=-1.0)
    with pytest.raises(ValueError):
        rmsnorm(np.ones(3), np.ones(4))


def test_rmsnorm_rows_match_single_vectors(rng):
    X = rng.normal(size=(4, 5))
    g = rng.normal(size=5)
    for row, out in zip(X, rmsnorm(X, g)):
        np.testing.assert_allclose(rmsnorm(row, g), out, rtol=0, atol=1e-15)


def test_softmax_uniform_at_zero():
    p, m, lse = softmax_with_stats([0, 0, 0])
    np.testing.assert_allclose(p, [1 / 3] * 3, atol=1e-15)
    assert m == 0 and lse == 3


def test_softmax_singleton():
    p, m, lse = softmax_with_stats([5.0])
    assert list(p) == [1.0] and m == 5.0 and lse == 1.0


def test_softmax_shift_invariance():
    a, _, _ = softmax_with_stats([1, 2, 3])
    b, _, _ = softmax_with_stats([101, 102, 103])
    assert np.max(np.abs(a - b)) < 1e-12


@given(st.lists(finite, min_size=1, max_size=12))
def test_softmax_is_probability_vector(logits):
    p, m, lse = softmax_with_stats(logits)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1) < 1e-12
    assert m == max(logits) and 1 <= lse <= len(logits)


def test_softmax_rejects_empty_and_nonfinite():
    with pytest.raises(ValueError):
        softmax_with_stats([])
    with pytest.raises(ValueError):
        softmax_with_stats([0.0, np.nan])


def _direct(q, V):
    s = rmsnorm(V) @ q
    w = np.exp(s - s.max())
    return (w / w.sum()) @ V


def test_merge_with_empty_is_identity(rng):
    V = rng.normal(size=(3, 4))
    a = attn_with_stats(rng.normal(size=4), V)
    merged = online_merge(a, SoftmaxStats.empty(4))
    np.testing.assert_array_equal(merged.normalize(), a.normalize())
    np.testing.assert_array_equal(online_merge(SoftmaxStats.empty(4), a).normalize(), a.normalize())


def test_merge_disjoint_halves_matches_direct(rng):
    q, V = rng.normal(size=6), rng.normal(size=(8, 6))
    merged = online_merge(attn_with_stats(q, V[:4]), attn_with_stats(q, V[4:]))
    assert np.max(np.abs(merged.normalize() - _direct(q, V))) < 1e-12


def test_merge_order_swap(rng):
    q, V = rng.normal(size=6), rng.normal(size=(8, 6))
    a, b = attn_with_stats(q, V[:3]), attn_with_stats(q, V[3:])
    assert np.max(np.abs(online_merge(a, b).normalize() - online_merge(b, a).normalize())) < 1e-12


@settings(max_examples=60)
@given(st.integers(2, 10), st.data())
def test_merge_exact_for_any_partition(k, data):
    seed = data.draw(st.integers(0, 10_000))
    rng = np.random.default_rng(seed)
    q, V = rng.normal(size=5) * 3, rng.normal(size=(k, 5)) * data.draw(st.floats(0.1, 10))
    mask = np.array(data.draw(st.lists(st.booleans(), min_size=k, max_size=k)))
    a = attn_with_stats(q, V[mask]) if mask.any() else SoftmaxStats.empty(5)
    b = attn_with_stats(q, V[~mask]) if (~mask).any() else SoftmaxStats.empty(5)
    merged = online_merge(a, b)
    assert np.max(np.abs(merged.normalize() - _direct(q, V))) < 1e-12
    # merged max is the larger component max; lse lies between max component and the rescaled sum
    assert merged.m == max(a.m, b.m)
    assert merged.lse >= max(x.lse * np.exp(x.m - merged.m) for x in (a, b) if not x.is_empty) - 1e-12


def test_merge_dimension_mismatch():
    with pytest.raises(ValueError):
        online_merge(SoftmaxStats.empty(3), SoftmaxStats.empty(4))


def test_attn_with_stats_fields(rng):
    q, V = rng.normal(size=3), rng.normal(size=(4, 3))
    s = attn_with_stats(q, V)
    logits = rmsnorm(V) @ q
    assert s.m == logits.max()
    assert s.lse == pytest.approx(np.exp(logits - logits.max()).sum(), abs=1e-14)
    assert attn_with_stats(q, np.zeros((0, 3))).is_empty


def test_empty_stats_cannot_normalize():
    with pytest.raises(ValueError):
        SoftmaxStats.empty(2).normalize()


def test_check_finite():
    with pytest.raises(NonFiniteError):
        check_finite(np.array([1.0, np.inf]), "here")
