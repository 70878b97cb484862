"""Named parameter collections and the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    b"ICAM" | u32 format version | u32 parameter count
    per parameter:
        u32 name length | UTF-8 name | u64 rank | u64 dim * rank
        u8 dtype tag (0 = f32, 1 = f64) | raw little-endian data
"""

import struct
from collections import OrderedDict

import numpy as np

from .autograd import Tensor
from .errors import ContractError, ParseError

MAGIC = b"ICAM"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class ParameterStore:
    """Ordered mapping from dotted parameter path to a grad-tracking Tensor."""

    def __init__(self, entries=None):
        self._entries = OrderedDict()
        self.version = 0
        for name, value in (entries or {}).items():
            self.add(name, value)

    def add(self, name, value):
        if name in self._entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        arr = np.array(value.data if isinstance(value, Tensor) else value, dtype=np.float64, order="C")
        self._entries[name] = Tensor(arr, requires_grad=True)
        self.version += 1
        return self._entries[name]

    def __getitem__(self, name):
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def values(self):
        return self._entries.values()

    def zero_grad(self):
        for t in self._entries.values():
            t.grad = None

    def numel(self):
        return sum(t.size for t in self._entries.values())

    def arrays(self):
        return OrderedDict((k, t.data.copy()) for k, t in self._entries.items())

    def load_arrays(self, arrays):
        for name, arr in arrays.items():
            t = self._entries[name]
            if t.shape != np.shape(arr):
                raise ContractError(f"{name}: shape {np.shape(arr)} != {t.shape}")
            t.data[...] = arr
        self.version += 1

    def copy(self):
        return ParameterStore(self.arrays())

    def save(self, path, dtype=np.float64):
        save_checkpoint(path, self.arrays(), dtype=dtype)

    @classmethod
    def load(cls, path):
        return cls(load_checkpoint(path))


def encode_checkpoint(arrays, dtype=np.float64):
    dt = np.dtype(dtype)
    tag = _TAGS[dt]
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(arrays))]
    for name, arr in arrays.items():
        raw_name = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack(f"<Q{arr.ndim}Q", arr.ndim, *arr.shape))
        chunks.append(struct.pack("<B", tag))
        chunks.append(np.ascontiguousarray(arr, dtype=dt.newbyteorder("<")).tobytes())
    return b"".join(chunks)


def decode_checkpoint(blob):
    """Bytes -> ordered {name: array}; float32 payloads are returned as float32."""
    if blob[:4] != MAGIC:
        raise ParseError("not an ICAM checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}")
    pos = 12
    out = OrderedDict()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            dims = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            (tag,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dt = _DTYPES[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(blob):
                raise ParseError(f"truncated payload for {name!r}")
            out[name] = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).copy()
            pos += nbytes
    except (struct.error, KeyError) as exc:
        raise ParseError(f"corrupt checkpoint: {exc}") from None
    if pos != len(blob):
        raise ParseError("trailing bytes after last parameter")
    return out


def save_checkpoint(path, arrays, dtype=np.float64):
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(arrays, dtype))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
