import numpy as np
import pytest

from sparkattn import ex
from sparkattn.softmax import block_update, finalize, merge, softmax_blocks, state_init


def _softmax64(s):
    s = np.asarray(s, dtype=np.float64)
    m = s.max(axis=1, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=1, keepdims=True), (m + np.log(e.sum(axis=1, keepdims=True)))[:, 0]


def test_split_invariance():
    rng = np.random.default_rng(0)
    s = (2 * rng.standard_normal((100, 256))).astype(np.float32)
    expected, expected_lse = _softmax64(s)
    for parts in range(1, 9):
        bounds = sorted(rng.choice(np.arange(1, 256), parts - 1, replace=False).tolist())
        p, lse = softmax_blocks(s, bounds)
        rel = np.abs(p - expected) / expected
        assert rel.mean() <= 1e-6
        assert rel.max() <= 5e-6
        np.testing.assert_allclose(lse, expected_lse, rtol=1e-6)


def test_rising_maximum_rescales():
    st = state_init(1)
    p0, r0 = block_update(st, np.array([[0.0, 0.0]]))
    assert r0.tolist() == [0.0]
    p1, r1 = block_update(st, np.array([[2.0]]))
    assert float(st.m[0]) == 2.0
    assert float(r1[0]) == pytest.approx(np.exp(-2.0), rel=1e-6)
    assert float(st.l[0]) == pytest.approx(2 * np.exp(-2.0) + 1, rel=1e-6)
    _, r2 = block_update(st, np.array([[-5.0]]))
    assert r2.tolist() == [1.0]


def test_merge():
    rng = np.random.default_rng(1)
    s = rng.standard_normal((10, 40)).astype(np.float32)
    whole = state_init(10)
    block_update(whole, s)
    left, right = state_init(10), state_init(10)
    block_update(left, s[:, :13])
    block_update(right, s[:, 13:])
    for merged in (merge(left, right), merge(right, left)):
        np.testing.assert_allclose(merged.m, whole.m, rtol=0)
        np.testing.assert_allclose(merged.l, whole.l, rtol=1e-6)
    ident = merge(whole, state_init(10))
    assert np.array_equal(ident.m, whole.m)
    assert np.array_equal(ident.l, whole.l)
    with pytest.raises(ex.DimensionMismatch):
        merge(whole, state_init(3))


def test_masked_entries():
    st = state_init(2)
    s = np.array([[-np.inf, -np.inf], [-np.inf, 1.0]])
    p, rescale = block_update(st, s)
    assert p[0].tolist() == [0.0, 0.0]
    assert p[1].tolist() == [0.0, 1.0]
    assert not np.isnan(rescale).any()
    with pytest.raises(ex.FullyMaskedRow):
        finalize(st)
    # a later block rescues the row
    block_update(st, np.array([[0.0], [0.0]]))
    inv_l, lse = finalize(st)
    assert float(inv_l[0]) == 1.0
    assert float(lse[0]) == 0.0


def test_bad_scores():
    st = state_init(2)
    with pytest.raises(ex.NumericalFault):
        block_update(st, np.array([[0.0, np.nan], [0.0, 0.0]]))
    with pytest.raises(ex.NumericalFault):
        block_update(st, np.array([[0.0, 0.0], [np.inf, 0.0]]))
    with pytest.raises(ex.DimensionMismatch):
        block_update(st, np.zeros((3, 2)))
    with pytest.raises(ex.DimensionMismatch):
        block_update(st, np.zeros((2, 0)))
    with pytest.raises(ex.InvalidValue):
        state_init(0)


def test_shift_invariance_and_normalization():
    rng = np.random.default_rng(2)
    # multiples of 2**-7 so the shift is exact
    s = (rng.integers(-2560, 2560, (50, 96)) / 128).astype(np.float32)
    p, lse = softmax_blocks(s, [32, 64])
    shifted, shifted_lse = softmax_blocks(s + np.float32(8), [32, 64])
    np.testing.assert_allclose(shifted, p, rtol=1e-6, atol=1e-30)
    np.testing.assert_allclose(shifted_lse, lse + 8, rtol=0, atol=8 * np.spacing(np.float32(28)))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-6)
    # weights recovered from lse sum to one as well
    np.testing.assert_allclose(np.exp(s - lse[:, None]).sum(axis=1), 1.0, rtol=4e-6)


def test_finalize_examples():
    st = state_init(8)
    block_update(st, np.full((8, 1), 2.5))
    inv_l, lse = finalize(st)
    assert inv_l.tolist() == [1.0] * 8
    assert lse.tolist() == [2.5] * 8
