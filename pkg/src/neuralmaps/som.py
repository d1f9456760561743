"""Self-organizing map over embedding vectors.

Neurons sit on an integer ``rows x cols`` grid; neuron ``j`` has lattice
position ``(j // cols, j % cols)``. Each presentation of one embedding moves
every neuron toward it by ``eta(n) * h(u, j)`` and advances ``n`` by one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import EmptyDatasetError
from .tensor import ShapeError


@dataclass
class Schedules:
    sigma0: float = 10.0
    alpha: float = 2000.0
    eta0: float = 0.3
    n: int = 0

    def at(self, n: int | None = None) -> tuple[float, float]:
        """(eta, sigma) at step ``n`` (default: the current step)."""
        n = self.n if n is None else n
        if n < 0:
            raise ValueError(f"step must be non-negative, got {n}")
        decay = np.exp(-n / self.alpha)
        return self.eta0 * decay, self.sigma0 * decay


def schedules_at(s: Schedules, n: int) -> tuple[float, float]:
    return s.at(n)


class SomLattice:
    def __init__(self, rows: int, cols: int, weights: np.ndarray):
        if rows < 1 or cols < 1:
            raise ValueError(f"lattice dims must be positive, got {rows}x{cols}")
        weights = np.array(weights, dtype=np.float64)
        if weights.ndim != 2 or weights.shape[0] != rows * cols:
            raise ShapeError(f"weights must be ({rows * cols}, m), got {weights.shape}")
        self.rows, self.cols = rows, cols
        self.weights = weights
        self._positions = np.indices((rows, cols)).reshape(2, -1).T.astype(np.float64)
        self._positions.flags.writeable = False

    @property
    def size(self) -> int:
        return self.rows * self.cols

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @property
    def positions(self) -> np.ndarray:
        """(l, 2) array of (row, col) grid coordinates."""
        return self._positions

    def copy(self) -> "SomLattice":
        return SomLattice(self.rows, self.cols, self.weights.copy())


def init_som(rows: int, cols: int, m: int, sample, encode: Callable | None = None,
             seed: int | np.random.Generator = 0) -> SomLattice:
    """Set every neuron to an embedding drawn with replacement from ``sample``.

    ``sample`` holds raw inputs when ``encode`` is given, embeddings otherwise.
    """
    if len(sample) == 0:
        raise EmptyDatasetError("cannot initialize a map from an empty sample")
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(sample), size=rows * cols)
    z = np.asarray(encode(np.asarray(sample)[picks]) if encode else np.asarray(sample)[picks],
                   dtype=np.float64)
    if z.shape[1] != m:
        raise ShapeError(f"embeddings have dim {z.shape[1]}, map expects m={m}")
    return SomLattice(rows, cols, z)


def _sq_distances(z: np.ndarray, weights: np.ndarray) -> np.ndarray:
    diff = weights - z
    return np.einsum("ij,ij->i", diff, diff)


def best_matching_unit(z, lattice: SomLattice) -> int:
    """Index of the neuron nearest to ``z``; ties go to the lowest index."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (lattice.dim,):
        raise ShapeError(f"embedding shape {z.shape} does not match map dim {lattice.dim}")
    return int(np.argmin(_sq_distances(z, lattice.weights)))


def best_matching_units(zs, lattice: SomLattice, chunk: int = 256) -> np.ndarray:
    """Vectorized ``best_matching_unit`` over the rows of ``zs``."""
    zs = np.asarray(zs, dtype=np.float64)
    if zs.ndim != 2 or zs.shape[1] != lattice.dim:
        raise ShapeError(f"embeddings shape {zs.shape} does not match map dim {lattice.dim}")
    out = np.empty(len(zs), dtype=np.int64)
    w = lattice.weights
    for s in range(0, len(zs), chunk):
        diff = zs[s:s + chunk, None, :] - w[None]
        out[s:s + chunk] = np.argmin(np.einsum("ijk,ijk->ij", diff, diff), axis=1)
    return out


def neighborhood(j, u, lattice: SomLattice, sigma: float):
    """Gaussian of lattice distance between neurons ``j`` and ``u``; ``j`` may be an array."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    pos = lattice.positions
    d = pos[j] - pos[u]
    return np.exp(-np.sum(d * d, axis=-1) / (2.0 * sigma * sigma))


def som_update(lattice: SomLattice, z, schedules: Schedules) -> SomLattice:
    """One presentation of ``z``: pull every neuron toward it, then advance n."""
    z = np.asarray(z, dtype=np.float64)
    eta, sigma = schedules.at()
    u = best_matching_unit(z, lattice)
    gain = eta * neighborhood(slice(None), u, lattice, sigma)
    lattice.weights += gain[:, None] * (z - lattice.weights)
    schedules.n += 1
    return lattice


def pretrain_som(lattice: SomLattice, embeddings, steps: int, schedules: Schedules,
                 seed: int | np.random.Generator = 0, callback: Callable | None = None) -> SomLattice:
    """Present ``steps`` embeddings in seeded shuffled order, cycling through the data.

    The encoder is frozen during this phase, so callers pass precomputed
    embeddings. ``callback(lattice, z)`` runs before each update if given.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if len(embeddings) == 0:
        raise EmptyDatasetError("cannot train a map on an empty dataset")
    if steps < 0:
        raise ValueError(f"steps must be non-negative, got {steps}")
    rng = np.random.default_rng(seed)
    order = np.empty(0, dtype=np.int64)
    for _ in range(steps):
        if len(order) == 0:
            order = rng.permutation(len(embeddings))
        z = embeddings[order[0]]
        order = order[1:]
        if callback is not None:
            callback(lattice, z)
        som_update(lattice, z, schedules)
    return lattice


def quantization_error(lattice: SomLattice, embeddings) -> float:
    """Mean Euclidean distance from each embedding to its best matching unit."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if len(embeddings) == 0:
        raise EmptyDatasetError("quantization error of an empty dataset is undefined")
    bmu = best_matching_units(embeddings, lattice)
    diff = embeddings - lattice.weights[bmu]
    return float(np.mean(np.sqrt(np.einsum("ij,ij->i", diff, diff))))
