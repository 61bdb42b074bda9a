import numpy as np
import pytest

from sparkattn.exceptions import DimensionMismatch, InvalidValue
from sparkattn.half import (
    AccMode,
    dot4_acc,
    f16_to_f32,
    f32_to_f16,
    from_bits,
    half_bits,
    half_ulp,
    ulp_distance,
)


def test_round_trip_every_bit_pattern():
    bits = np.arange(2**16, dtype=np.uint16)
    h = from_bits(bits)
    back = half_bits(f32_to_f16(f16_to_f32(h)))
    finite = ~np.isnan(h)
    assert np.array_equal(back[finite], bits[finite])
    assert np.isnan(f16_to_f32(h)[~finite]).all()
    assert (~finite).sum() == 2 * (2**10 - 1)


def test_widening_is_monotone():
    bits = np.arange(0x0000, 0x7C01, dtype=np.uint16)  # +0 .. +inf
    wide = f16_to_f32(from_bits(bits))
    assert (np.diff(wide) > 0).all()
    neg = f16_to_f32(from_bits(bits | 0x8000))
    assert (np.diff(neg[1:]) < 0).all()


def test_round_to_nearest_even():
    assert float(f32_to_f16(1 + 2**-11)) == 1.0
    assert float(f32_to_f16(1 + 3 * 2**-11)) == 1 + 2**-9
    assert float(f32_to_f16(65519.0)) == 65504.0
    assert np.isinf(f32_to_f16(65520.0))
    assert np.isinf(f32_to_f16(-1e6)) and f32_to_f16(-1e6) < 0


def test_subnormals():
    tiny = 2.0**-24
    assert float(f32_to_f16(tiny)) == tiny
    assert float(f32_to_f16(2.0**-25)) == 0.0
    assert float(f32_to_f16(3 * 2.0**-26)) == tiny
    assert float(half_ulp(0.0)) == tiny


def test_ulp_distance():
    assert int(ulp_distance(1.0, 1.0)) == 0
    assert int(ulp_distance(-(2.0**-24), 2.0**-24)) == 2
    assert int(ulp_distance(65504.0, np.inf)) == 1
    d = ulp_distance(np.float16([1, 2]), np.float16([1 + 2**-10, 2]))
    assert d.tolist() == [1, 0]


def test_dot4_acc_modes():
    a = np.float16([1024, 1, 1, 0])
    b = np.float16([2, 1, 0.5, 0])
    # partial 2049.5 exact in binary32
    assert float(dot4_acc(a, b, 0, AccMode.FP32_ACC)) == 2049.5
    # binary16 spacing at 2048 is 2
    assert float(dot4_acc(a, b, 0, AccMode.FP16_ACC)) == 2050.0
    assert float(dot4_acc(a, b, np.float16(-2048), "fp16")) == 1.5


def test_dot4_acc_single_rounding():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((500, 4)).astype(np.float16)
    b = rng.standard_normal((500, 4)).astype(np.float16)
    c = rng.standard_normal(500).astype(np.float16)
    got = dot4_acc(a, b, c, AccMode.FP16_ACC)
    prod = a.astype(np.float32) * b.astype(np.float32)
    partial = ((prod[:, 0] + prod[:, 1]) + prod[:, 2]) + prod[:, 3]
    exact = c.astype(np.float64) + partial.astype(np.float64)
    assert np.array_equal(got, exact.astype(np.float16))
    assert got.dtype == np.float16
    assert dot4_acc(a, b, c.astype(np.float32), AccMode.FP32_ACC).dtype == np.float32


def test_dot4_acc_shape():
    with pytest.raises(DimensionMismatch):
        dot4_acc(np.ones(3), np.ones(3), 0.0, "fp32")


def test_acc_mode_parse():
    assert AccMode.parse("FP16") is AccMode.FP16_ACC
    assert AccMode.parse(AccMode.FP32_ACC) is AccMode.FP32_ACC
    assert AccMode.FP16_ACC.dtype == np.float16
    with pytest.raises(InvalidValue):
        AccMode.parse("bf16")
