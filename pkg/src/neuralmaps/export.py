"""Lattice projections (CSV/SVG) and decoder back-projection montages (PGM)."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cae import CaeModel
from .data import Dataset
from .pnm import write_pgm
from .som import SomLattice, best_matching_units
from .tensor import ShapeError

__all__ = ["ProjectionRecord", "PALETTE", "project", "backproject", "montage",
           "write_projection_csv", "write_scatter_svg", "write_pgm"]

# one color per label, shared by every plot of a dataset
PALETTE = (
    "#1f77b4", "#aec7e8", "#ff7f0e", "#ffbb78", "#2ca02c",
    "#98df8a", "#d62728", "#ff9896", "#9467bd", "#c5b0d5",
    "#8c564b", "#c49c94", "#e377c2", "#f7b6d2", "#7f7f7f",
    "#c7c7c7", "#bcbd22", "#dbdb8d", "#17becf", "#9edae5",
)

JITTER = 0.4
CELL = 12  # SVG pixels per lattice cell
MARGIN = 6


@dataclass(frozen=True)
class ProjectionRecord:
    index: int
    label: int
    row: int
    col: int
    dx: float
    dy: float


def jitter(index: int) -> tuple[float, float]:
    """Offsets in [-0.4, 0.4], a pure function of the sample index."""
    digest = hashlib.blake2b(int(index).to_bytes(8, "little", signed=True), digest_size=8).digest()
    a, b = np.frombuffer(digest, dtype="<u4")
    scale = 2.0 * JITTER / 0xFFFFFFFF
    return float(a) * scale - JITTER, float(b) * scale - JITTER


def project(dataset: Dataset, model: CaeModel, lattice: SomLattice) -> list[ProjectionRecord]:
    """One record per sample at the lattice cell of its best matching unit."""
    images, labels = dataset.images, dataset.labels
    if images.shape[1:] != model.arch.input_shape:
        raise ShapeError(f"images {images.shape[1:]} do not match model input {model.arch.input_shape}")
    bmu = best_matching_units(model.embed(images), lattice) if len(images) else np.zeros(0, int)
    records = []
    for i, (u, label) in enumerate(zip(bmu, labels)):
        dx, dy = jitter(i)
        records.append(ProjectionRecord(i, int(label), int(u) // lattice.cols, int(u) % lattice.cols, dx, dy))
    return records


def montage(tiles: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Tile (rows*cols, H, W) images in row-major order with 1-pixel black borders."""
    tiles = np.asarray(tiles, dtype=np.float64)
    n, h, w = tiles.shape
    if n != rows * cols:
        raise ShapeError(f"{n} tiles cannot fill a {rows}x{cols} grid")
    out = np.zeros((rows * (h + 1) + 1, cols * (w + 1) + 1))
    for j in range(n):
        r, c = divmod(j, cols)
        out[1 + r * (h + 1):1 + r * (h + 1) + h, 1 + c * (w + 1):1 + c * (w + 1) + w] = tiles[j]
    return out


def backproject(model: CaeModel, lattice: SomLattice) -> np.ndarray:
    """Decode every neuron's weights and arrange the images on the lattice grid."""
    decoded = np.concatenate([model.decode(lattice.weights[s:s + 256]).data
                              for s in range(0, lattice.size, 256)])
    # grayscale montage; multi-channel tiles are averaged
    return montage(decoded.mean(axis=1), lattice.rows, lattice.cols)


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def write_projection_csv(records: Sequence[ProjectionRecord], path) -> None:
    try:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["index", "label", "row", "col", "dx", "dy"])
            for r in records:
                w.writerow([r.index, r.label, r.row, r.col, _fmt(r.dx), _fmt(r.dy)])
    except OSError as exc:
        raise OSError(f"cannot write projection CSV to {path}: {exc}") from exc


def read_projection_csv(path) -> list[ProjectionRecord]:
    with open(path, newline="") as f:
        return [ProjectionRecord(int(r["index"]), int(r["label"]), int(r["row"]), int(r["col"]),
                                 float(r["dx"]), float(r["dy"])) for r in csv.DictReader(f)]


def render_scatter_svg(records: Sequence[ProjectionRecord], rows: int, cols: int) -> str:
    width = cols * CELL + 2 * MARGIN
    height = rows * CELL + 2 * MARGIN
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="{MARGIN}" y="{MARGIN}" width="{cols * CELL}" height="{rows * CELL}" '
        'fill="#ffffff" stroke="#000000" stroke-width="0.5"/>',
    ]
    for r in records:
        cx = MARGIN + (r.col + 0.5 + r.dx) * CELL
        cy = MARGIN + (r.row + 0.5 + r.dy) * CELL
        color = PALETTE[r.label % len(PALETTE)]
        lines.append(f'<circle cx="{cx:.3f}" cy="{cy:.3f}" r="1.5" fill="{color}"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def write_scatter_svg(records: Sequence[ProjectionRecord], lattice: SomLattice, path) -> None:
    """Scatter of records over the lattice, colored by label."""
    payload = render_scatter_svg(records, lattice.rows, lattice.cols)
    try:
        with open(path, "w", newline="\n") as f:
            f.write(payload)
    except OSError as exc:
        raise OSError(f"cannot write SVG to {path}: {exc}") from exc
