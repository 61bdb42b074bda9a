class SparkAttnException(Exception):
    pass


class InvalidValue(SparkAttnException, ValueError):
    pass


class DimensionMismatch(SparkAttnException):
    pass


class DomainMismatch(SparkAttnException):
    pass


class LayoutError(SparkAttnException):
    pass


class NumericalFault(SparkAttnException):
    pass


class FullyMaskedRow(SparkAttnException):
    pass


class UnsupportedMode(SparkAttnException):
    pass


class VerificationFailed(SparkAttnException):
    pass


class InvalidFile(SparkAttnException):
    pass


class BadMagic(InvalidFile):
    pass


class TruncatedPayload(InvalidFile):
    pass


class DimensionOverflow(InvalidFile):
    pass


_exit_status_lookup = {
    VerificationFailed: 1,
    InvalidValue: 2,
    DimensionMismatch: 2,
    UnsupportedMode: 2,
    InvalidFile: 2,
}


def exit_status(exc):
    """Return the process exit status for an exception raised by a command.

    >>> exit_status(VerificationFailed("too far"))
    1
    >>> exit_status(BadMagic("nope"))
    2
    >>> exit_status(NumericalFault("nan"))
    3
    """
    for klass in type(exc).__mro__:
        if klass in _exit_status_lookup:
            return _exit_status_lookup[klass]
    return 3
