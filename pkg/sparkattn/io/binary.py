"""SPAT tensor files.

Layout: a packed 7-byte header (magic ``b"SPAT"``, version, dtype code,
rank), ``rank`` little-endian uint64 dimensions, then the raw little-endian
payload in C order.
"""
from pathlib import Path

import numpy as np
from cffi import FFI

from ..exceptions import (
    BadMagic,
    DimensionOverflow,
    InvalidFile,
    InvalidValue,
    TruncatedPayload,
)

ffi = FFI()
ffi.cdef(
    """
typedef struct {
    char magic[4];
    uint8_t version;
    uint8_t dtype;
    uint8_t rank;
} spat_header;
""",
    packed=True,
)

MAGIC = b"SPAT"
VERSION = 1
MAX_BYTES = 2**63

sizeof = ffi.sizeof
buff = ffi.buffer
frombuff = ffi.from_buffer
HEADER_LEN = sizeof("spat_header")
Dsize = 8
CHUNK = 1 << 24

_typecodes = {
    np.dtype(np.float16): 0,
    np.dtype(np.float32): 1,
    np.dtype(np.float64): 2,
}
_codetypes = {v: k for k, v in _typecodes.items()}


def binwrite(x, filename, opener=Path.open):
    """Write array ``x`` (binary16, binary32 or binary64) to ``filename``."""
    if isinstance(filename, str):
        filename = Path(filename)
    x = np.asarray(x)
    if x.dtype not in _typecodes:
        raise InvalidValue(f"SPAT stores float16, float32 or float64; got {x.dtype}")
    if not 0 < x.ndim < 256:
        raise InvalidValue(f"SPAT rank must be 1..255; got {x.ndim}")

    header = ffi.new("spat_header*")
    header.magic = MAGIC
    header.version = VERSION
    header.dtype = _typecodes[x.dtype]
    header.rank = x.ndim

    with opener(filename, "wb") as f:
        fwrite = f.write
        fwrite(buff(header, HEADER_LEN))
        fwrite(np.asarray(x.shape, dtype="<u8").tobytes())
        fwrite(np.ascontiguousarray(x, dtype=x.dtype.newbyteorder("<")).tobytes())


def binread(filename, opener=Path.open):
    """Read a SPAT file back into a native-order array."""
    if isinstance(filename, str):
        filename = Path(filename)

    with opener(filename, "rb") as f:
        fread = f.read

        raw = fread(HEADER_LEN)
        if raw[: len(MAGIC)] != MAGIC:
            raise BadMagic(f"{filename} is not a SPAT file")
        if len(raw) < HEADER_LEN:
            raise TruncatedPayload(f"{filename}: header cut short")
        header = frombuff("spat_header*", raw)
        if header.version != VERSION:
            raise InvalidFile(f"{filename}: unsupported SPAT version {header.version}")
        if header.dtype not in _codetypes:
            raise InvalidFile(f"{filename}: unknown dtype code {header.dtype}")
        dtype = _codetypes[header.dtype]
        rank = header.rank
        if rank == 0:
            raise InvalidFile(f"{filename}: zero-rank tensor")

        raw = fread(rank * Dsize)
        if len(raw) < rank * Dsize:
            raise TruncatedPayload(f"{filename}: dimensions cut short")
        shape = [int(n) for n in np.frombuffer(raw, dtype="<u8")]
        if 0 in shape:
            raise InvalidFile(f"{filename}: zero-length dimension in {shape}")
        nbytes = dtype.itemsize
        for n in shape:
            nbytes *= n
            if nbytes >= MAX_BYTES:
                raise DimensionOverflow(f"{filename}: dimensions {shape} overflow 64 bits")

        # never allocate more than CHUNK ahead of the bytes actually present
        chunks = []
        have = 0
        while have <= nbytes:
            chunk = fread(min(CHUNK, nbytes + 1 - have))
            if not chunk:
                break
            chunks.append(chunk)
            have += len(chunk)
        if have != nbytes:
            raise TruncatedPayload(
                f"{filename}: payload holds {have} bytes; dimensions need {nbytes}"
            )
        payload = b"".join(chunks)
    data = np.frombuffer(payload, dtype=dtype.newbyteorder("<")).reshape(shape)
    return data.astype(dtype)
