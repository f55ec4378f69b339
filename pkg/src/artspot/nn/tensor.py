"""Parameter containers and the TEN1 tensor / checkpoint formats."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError

MAGIC = b"TEN1"


@dataclass
class Tensor:
    data: np.ndarray
    grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def accumulate(self, g):
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g


class ParamStore:
    """Named parameters plus their momentum buffers."""

    def __init__(self, params: dict[str, np.ndarray] | None = None):
        self.params: dict[str, Tensor] = {}
        self.momentum: dict[str, np.ndarray] = {}
        for name, arr in (params or {}).items():
            self.add(name, arr)

    def add(self, name, arr) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(arr))
        self.params[name] = t
        self.momentum[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name) -> np.ndarray:
        return self.params[name].data

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def names(self):
        return list(self.params)

    def grad(self, name, g):
        self.params[name].accumulate(g)

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore({k: v.data.astype(dtype) for k, v in self.params.items()})
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())


def tensor_to_bytes(arr) -> bytes:
    a = np.ascontiguousarray(arr, dtype="<f4")
    header = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + a.tobytes(order="C")


def read_tensor(stream) -> np.ndarray:
    magic = stream.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", _read_exact(stream, 4))
    dims = struct.unpack(f"<{rank}I", _read_exact(stream, 4 * rank))
    count = int(np.prod(dims, dtype=np.int64))
    raw = _read_exact(stream, 4 * count)
    return np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(buf))


def _read_exact(stream, n):
    buf = stream.read(n)
    if len(buf) != n:
        raise ValueError("truncated tensor stream")
    return buf


def save_checkpoint(path, tensors: dict[str, np.ndarray]):
    """Write ``(u32 name length, utf-8 name, TEN1 tensor)`` records, sorted by name."""
    with open(path, "wb") as f:
        for name in sorted(tensors):
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(tensor_to_bytes(tensors[name]))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    out = {}
    with open(path, "rb") as f:
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise ValueError("truncated checkpoint")
            (n,) = struct.unpack("<I", head)
            name = _read_exact(f, n).decode("utf-8")
            out[name] = read_tensor(f)
    return out
