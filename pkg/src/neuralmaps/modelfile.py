"""Binary model files.

Layout, all integers little-endian u32 and all parameters little-endian f64::

    b"DNM1"
    C H W                      input dims
    n_conv, then (filters, kernel) per conv stage
    m                          embedding dim
    n_tensors, then per tensor: ndim, dims..., raw values (row-major)
    has_lattice (0 or 1)
    [rows cols m n_lo n_hi, then rows*cols*m weights]   when has_lattice

``n_lo``/``n_hi`` hold the map's schedule step counter as two u32 halves.
"""

from __future__ import annotations

import struct

import numpy as np

from .cae import Architecture, CaeModel
from .som import SomLattice
from .tensor import Tensor

MAGIC = b"DNM1"


class ModelFileError(ValueError):
    pass


def dumps(model: CaeModel, lattice: SomLattice | None = None, step: int = 0) -> bytes:
    arch = model.arch
    out = [MAGIC, struct.pack("<3I", *arch.input_shape), struct.pack("<I", len(arch.filters))]
    out += [struct.pack("<2I", f, k) for f, k in arch.filters]
    out.append(struct.pack("<I", arch.embedding_dim))
    out.append(struct.pack("<I", len(model.params)))
    for p in model.params:
        out.append(struct.pack(f"<I{p.data.ndim}I", p.data.ndim, *p.shape))
        out.append(p.data.astype("<f8").tobytes())
    if lattice is None:
        out.append(struct.pack("<I", 0))
    else:
        out.append(struct.pack("<6I", 1, lattice.rows, lattice.cols, lattice.dim,
                               step & 0xFFFFFFFF, step >> 32))
        out.append(lattice.weights.astype("<f8").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, raw: bytes, name: str):
        self.raw, self.pos, self.name = raw, 0, name

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise ModelFileError(f"{self.name}: truncated at byte {self.pos}")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32s(self, count: int) -> tuple[int, ...]:
        return struct.unpack(f"<{count}I", self.take(4 * count))

    def u32(self) -> int:
        return self.u32s(1)[0]

    def f64(self, shape) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)


def loads(raw: bytes, name: str = "<bytes>") -> tuple[CaeModel, SomLattice | None, int]:
    """Inverse of ``dumps``: (model, lattice or None, schedule step)."""
    r = _Reader(raw, name)
    if r.take(4) != MAGIC:
        raise ModelFileError(f"{name}: not a DNM1 model file")
    input_shape = r.u32s(3)
    n_conv = r.u32()
    filters = tuple(r.u32s(2) for _ in range(n_conv))
    arch = Architecture(input_shape, filters, r.u32())
    params = []
    for _ in range(r.u32()):
        shape = r.u32s(r.u32())
        params.append(Tensor(r.f64(shape), requires_grad=True))
    model = CaeModel(arch, params)
    lattice, step = None, 0
    if r.u32():
        rows, cols, m, lo, hi = r.u32s(5)
        lattice = SomLattice(rows, cols, r.f64((rows * cols, m)))
        step = lo | (hi << 32)
    if r.pos != len(raw):
        raise ModelFileError(f"{name}: {len(raw) - r.pos} trailing bytes")
    return model, lattice, step


def save(path, model: CaeModel, lattice: SomLattice | None = None, step: int = 0) -> None:
    try:
        with open(path, "wb") as f:
            f.write(dumps(model, lattice, step))
    except OSError as exc:
        raise OSError(f"cannot write model file {path}: {exc}") from exc


def load(path) -> tuple[CaeModel, SomLattice | None, int]:
    with open(path, "rb") as f:
        return loads(f.read(), str(path))
