"""IEEE binary16 arithmetic and the two MMA accumulation disciplines.

Half values are ``numpy.float16``; numpy converts with round-to-nearest-even,
keeps subnormals, overflows to infinity and preserves NaN, which is exactly
the contract needed here.  Tensors of any shape are accepted wherever a
scalar is.
"""
import enum

import numpy as np

from .exceptions import DimensionMismatch, InvalidValue

__all__ = [
    "AccMode",
    "f32_to_f16",
    "f16_to_f32",
    "half_bits",
    "from_bits",
    "dot4_acc",
    "half_ulp",
    "ulp_distance",
]


class AccMode(enum.Enum):
    """Element type of the MMA accumulator (matrix C)."""

    FP16_ACC = "fp16"
    FP32_ACC = "fp32"

    @classmethod
    def parse(cls, value):
        """Accept an ``AccMode`` or its flag spelling.

        >>> AccMode.parse("fp32")
        <AccMode.FP32_ACC: 'fp32'>
        """
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise InvalidValue(
                f"accumulation mode must be 'fp16' or 'fp32'; got: {value!r}"
            ) from None

    @property
    def dtype(self):
        return np.dtype(np.float16) if self is AccMode.FP16_ACC else np.dtype(np.float32)


def _scalar(x):
    return x[()] if isinstance(x, np.ndarray) and x.ndim == 0 else x


def f32_to_f16(x):
    """Round binary32 values to binary16.

    >>> hex(int(half_bits(f32_to_f16(1.0))))
    '0x3c00'
    >>> float(f32_to_f16(65520.0))
    inf
    >>> float(f32_to_f16(65504.0))
    65504.0
    """
    return _scalar(np.asarray(x, dtype=np.float32).astype(np.float16))


def f16_to_f32(h):
    """Widen binary16 values to binary32; exact.

    >>> float(f16_to_f32(from_bits(0x0001))) == 2.0**-24
    True
    """
    return _scalar(np.asarray(h, dtype=np.float16).astype(np.float32))


def half_bits(h):
    """Bit patterns of binary16 values as ``uint16``."""
    return _scalar(np.asarray(h, dtype=np.float16).view(np.uint16))


def from_bits(bits):
    """binary16 values from ``uint16`` bit patterns.

    >>> float(from_bits(0x7C00))
    inf
    """
    return _scalar(np.asarray(bits, dtype=np.uint16).view(np.float16))


def dot4_acc(a, b, acc, mode):
    """One k=4 step of the tensor-core dot product, broadcast over leading axes.

    Products of binary16 operands are formed in binary32 (where they are
    exact) and summed left to right in binary32.  Under ``FP32_ACC`` the
    partial sum is added to a binary32 accumulator.  Under ``FP16_ACC`` the
    partial sum is added to the binary16 accumulator and rounded once.

    >>> ones = [1.0, 1.0, 1.0, 1.0]
    >>> float(dot4_acc(ones, ones, 0.0, AccMode.FP16_ACC))
    4.0
    >>> float(dot4_acc([2048, 1, 0, 0], [1, 1, 0, 0], 0.0, AccMode.FP32_ACC))
    2049.0
    >>> float(dot4_acc([2048, 1, 0, 0], [1, 1, 0, 0], 0.0, AccMode.FP16_ACC))
    2048.0
    """
    a = np.asarray(a, dtype=np.float16)
    b = np.asarray(b, dtype=np.float16)
    if a.shape[-1:] != (4,) or b.shape[-1:] != (4,):
        raise DimensionMismatch(
            f"dot4_acc operands must have a trailing axis of 4; got {a.shape} and {b.shape}"
        )
    prod = a.astype(np.float32) * b.astype(np.float32)
    partial = ((prod[..., 0] + prod[..., 1]) + prod[..., 2]) + prod[..., 3]
    mode = AccMode.parse(mode)
    if mode is AccMode.FP32_ACC:
        return _scalar(np.asarray(acc, dtype=np.float32) + partial)
    # a binary16 accumulator plus a binary32 partial is exact in binary64
    total = np.asarray(acc, dtype=np.float16).astype(np.float64) + partial.astype(np.float64)
    return _scalar(total.astype(np.float16))


def half_ulp(x):
    """Unit in the last place of binary16 at the magnitude of ``x``.

    >>> float(half_ulp(1.0))
    0.0009765625
    """
    return _scalar(np.spacing(np.abs(np.asarray(x, dtype=np.float16))))


def _ordered(bits):
    bits = bits.astype(np.int32)
    return np.where(bits & 0x8000, 0x8000 - bits, bits)


def ulp_distance(a, b):
    """Number of binary16 values between ``a`` and ``b`` (element-wise).

    >>> int(ulp_distance(1.0, float(f32_to_f16(1.0 + 2**-10))))
    1
    >>> int(ulp_distance(-0.0, 0.0))
    0
    """
    oa = _ordered(np.asarray(half_bits(np.asarray(a, dtype=np.float16))))
    ob = _ordered(np.asarray(half_bits(np.asarray(b, dtype=np.float16))))
    return _scalar(np.abs(oa - ob))
