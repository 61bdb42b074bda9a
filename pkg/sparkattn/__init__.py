import importlib.metadata
import logging
import sys

from . import exceptions as ex
from .backward import (
    DqAccumulator,
    GradOutputs,
    backward_fused,
    compute_dpsum,
    dq_atomic_add,
    permutation_spread,
)
from .config import AttnConfig, default_seed
from .forward import ForwardOutput, forward_fused, forward_traditional
from .half import AccMode
from .oracle import attention_grad_ref, attention_ref, error_metrics, finite_diff_grad
from .prng import MaskLedger, dropout_mask
from .traffic import TrafficCounter

try:
    __version__ = importlib.metadata.version("sparkattn")
except Exception as exc:  # pragma: no cover (safety)
    raise AttributeError(
        "`sparkattn.__version__` not available. This may mean "
        "sparkattn was incorrectly installed or not installed at all. "
        "For local development, you may want to do an editable install via "
        "`python -m pip install -e path/to/sparkattn`"
    ) from exc
del importlib

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())


class burble:
    """Control diagnostic output, and may be used as a context manager.

    Diagnostics are the DEBUG records of the ``sparkattn`` logger: per-run
    configuration, per-unit counters and run totals, written to stderr.

    >>> from sparkattn import burble
    >>> burble.is_enabled
    False
    >>> burble.enable()
    >>> burble.is_enabled
    True
    >>> burble.disable()

    As a context manager, re-entrant:

    >>> with burble():
    ...     with burble():
    ...         pass
    ...     burble.is_enabled
    True
    >>> burble.is_enabled
    False
    """

    def __init__(self):
        self._states = []
        self._handler = None
        self._level = None

    @property
    def is_enabled(self):
        """Is burble enabled?"""
        return self._handler is not None

    def enable(self):
        """Enable diagnostic output"""
        if self._handler is not None:
            return
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("  [ %(name)s: %(message)s ]"))
        self._level = logger.level
        logger.setLevel(logging.DEBUG)
        logger.addHandler(handler)
        self._handler = handler

    def disable(self):
        """Disable diagnostic output"""
        if self._handler is None:
            return
        logger.removeHandler(self._handler)
        logger.setLevel(self._level)
        self._handler = None

    def __call__(self):
        return self

    def __enter__(self):
        is_enabled = self.is_enabled
        if not is_enabled:
            self.enable()
        self._states.append(is_enabled)
        return self

    def __exit__(self, type_, value, traceback):
        is_enabled = self._states.pop()
        if not is_enabled:
            self.disable()

    def __reduce__(self):
        return "burble"

    def __repr__(self):
        return f"<burble is_enabled={self.is_enabled}>"


burble = burble()

__all__ = [
    "AccMode",
    "AttnConfig",
    "DqAccumulator",
    "ForwardOutput",
    "GradOutputs",
    "MaskLedger",
    "TrafficCounter",
    "attention_grad_ref",
    "attention_ref",
    "backward_fused",
    "burble",
    "compute_dpsum",
    "default_seed",
    "dq_atomic_add",
    "dropout_mask",
    "error_metrics",
    "ex",
    "finite_diff_grad",
    "forward_fused",
    "forward_traditional",
    "permutation_spread",
    "__version__",
]
