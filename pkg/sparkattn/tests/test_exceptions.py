import pytest

from sparkattn import exceptions
from sparkattn.exceptions import exit_status


def test_hierarchy():
    for name in (
        "InvalidValue",
        "DimensionMismatch",
        "DomainMismatch",
        "LayoutError",
        "NumericalFault",
        "FullyMaskedRow",
        "UnsupportedMode",
        "VerificationFailed",
        "InvalidFile",
        "BadMagic",
        "TruncatedPayload",
        "DimensionOverflow",
    ):
        assert issubclass(getattr(exceptions, name), exceptions.SparkAttnException)
    for name in ("BadMagic", "TruncatedPayload", "DimensionOverflow"):
        assert issubclass(getattr(exceptions, name), exceptions.InvalidFile)
    with pytest.raises(ValueError):
        raise exceptions.InvalidValue("bad")


def test_exit_status():
    assert exit_status(exceptions.VerificationFailed("x")) == 1
    assert exit_status(exceptions.InvalidValue("x")) == 2
    assert exit_status(exceptions.DimensionMismatch("x")) == 2
    assert exit_status(exceptions.UnsupportedMode("x")) == 2
    assert exit_status(exceptions.TruncatedPayload("x")) == 2
    assert exit_status(exceptions.FullyMaskedRow("x")) == 3
