"""Modeled HBM traffic and instruction counters."""
import dataclasses

__all__ = ["TrafficCounter"]


@dataclasses.dataclass
class TrafficCounter:
    """Counts accumulated by one run (or one unit of a run).

    ``matrix_pass_*`` count whole logical tensors streamed through HBM;
    ``element_*`` count every element that crosses the HBM boundary.
    ``convert_events`` are softmax-path binary16/binary32 conversions,
    ``layout_converts`` the binary32 to binary16 conversions of the FP32
    layout transform, ``shuffle_events`` warp ``shfl_xor`` instructions and
    ``atomic_adds`` elements added into the shared dQ buffer.

    >>> a = TrafficCounter(element_reads=3)
    >>> b = TrafficCounter(element_reads=4, mma_invocations=2)
    >>> (a + b).element_reads, (a + b).mma_invocations
    (7, 2)
    """

    matrix_pass_reads: int = 0
    matrix_pass_writes: int = 0
    element_reads: int = 0
    element_writes: int = 0
    mma_invocations: int = 0
    shuffle_events: int = 0
    convert_events: int = 0
    layout_converts: int = 0
    atomic_adds: int = 0

    def read(self, elements):
        self.element_reads += int(elements)

    def write(self, elements):
        self.element_writes += int(elements)

    def __iadd__(self, other):
        if not isinstance(other, TrafficCounter):
            return NotImplemented
        for field in dataclasses.fields(self):
            setattr(self, field.name, getattr(self, field.name) + getattr(other, field.name))
        return self

    def __add__(self, other):
        if not isinstance(other, TrafficCounter):
            return NotImplemented
        total = dataclasses.replace(self)
        total += other
        return total

    @classmethod
    def total(cls, counters):
        """Sum counters in the given order."""
        result = cls()
        for counter in counters:
            result += counter
        return result

    def as_dict(self):
        return dataclasses.asdict(self)
