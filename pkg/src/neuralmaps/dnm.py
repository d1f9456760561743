"""Joint training of the autoencoder and the map.

Per batch: first present every fresh embedding to the map, then freeze the map
and take one gradient step on

    KL(P || Q) + gamma * reconstruction MSE + beta * ||encoder params||^2

where Q holds Student-t similarities between embeddings and neurons and P is
Q sharpened and normalized by soft cluster frequency within the batch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .cae import CaeModel, reconstruction_loss
from .data import EmptyDatasetError, iterate_batches
from .som import Schedules, SomLattice, quantization_error, som_update
from .tensor import ShapeError, Tape, Tensor

METRICS_HEADER = ("step", "kl", "recon", "reg", "total", "qe")


@dataclass
class LossConfig:
    gamma: float = 0.5
    beta: float = 1e-6
    lr: float = 0.001
    iterations: int = 500
    batch_size: int = 256
    squared_reg: bool = True

    def __post_init__(self):
        if self.gamma < 0 or self.beta < 0:
            raise ValueError("gamma and beta must be non-negative")


def soft_assignment(z, weights) -> Tensor:
    """Row-normalized Student-t kernel (1 + ||z_i - w_j||^2)^-1, shape (N, l).

    Both arguments may be Tensors; gradients flow to whichever is recorded.
    """
    z = z if isinstance(z, Tensor) else Tensor(z)
    w = weights if isinstance(weights, Tensor) else Tensor(weights)
    zd, wd = z.data, w.data
    if zd.ndim != 2 or wd.ndim != 2 or zd.shape[1] != wd.shape[1]:
        raise ShapeError(f"soft_assignment: embeddings {zd.shape} vs neurons {wd.shape}")
    d2 = np.maximum((zd * zd).sum(1)[:, None] + (wd * wd).sum(1)[None, :] - 2.0 * zd @ wd.T, 0.0)
    kern = 1.0 / (1.0 + d2)
    norm = kern.sum(axis=1, keepdims=True)
    q = kern / norm

    def vjp(g):
        g_kern = (g - (g * q).sum(axis=1, keepdims=True)) / norm
        g_d2 = -g_kern * kern * kern
        row = g_d2.sum(axis=1)
        col = g_d2.sum(axis=0)
        dz = 2.0 * (zd * row[:, None] - g_d2 @ wd)
        dw = 2.0 * (wd * col[:, None] - g_d2.T @ zd)
        return dz, dw

    return T.record_op("soft_assignment", (z, w), q, vjp)


def target_distribution(q) -> np.ndarray:
    """Sharpened targets p_ij = (q_ij^2 / f_j) / sum_j' (q_ij'^2 / f_j'), f_j = sum_i q_ij.

    Returned as a plain array: targets are constants for the gradient step.
    """
    q = q.data if isinstance(q, Tensor) else np.asarray(q, dtype=np.float64)
    weight = q * q / q.sum(axis=0)
    return weight / weight.sum(axis=1, keepdims=True)


def kl_divergence(p, q) -> Tensor:
    """(1/N) sum_ij p_ij log(p_ij / q_ij) with 0 log 0 = 0; ``p`` is constant."""
    q = q if isinstance(q, Tensor) else Tensor(q)
    p = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64)
    qd = q.data
    if p.shape != qd.shape:
        raise ShapeError(f"kl_divergence: p {p.shape} vs q {qd.shape}")
    support = p > 0
    if np.any(support & (qd <= 0)):
        raise ValueError("kl_divergence: q vanishes where p has mass")
    n = p.shape[0] if p.ndim > 1 else 1
    safe_q = np.where(support, qd, 1.0)
    terms = np.where(support, p * np.log(np.where(support, p, 1.0) / safe_q), 0.0)
    # KL is non-negative; clip rounding residue like -2e-16
    value = np.asarray(max(terms.sum() / n, 0.0))
    return T.record_op("kl_divergence", (q,), value, lambda g: (-g * np.where(support, p / safe_q, 0.0) / n,))


def regularizer(model: CaeModel, squared: bool = True) -> Tensor:
    """Squared L2 norm of the encoder parameters, or the plain norm when not ``squared``."""
    ss = T.sum_squares(model.encoder_params)
    return ss if squared else T.sqrt(ss)


def dnm_loss(x, model: CaeModel, lattice: SomLattice | np.ndarray, cfg: LossConfig,
             target: np.ndarray | None = None) -> tuple[Tensor, dict]:
    """Total loss and its terms for one batch; the map is held fixed.

    ``target`` overrides the P computed from this batch's Q.
    """
    x = np.asarray(x, dtype=np.float64)
    weights = lattice.weights if isinstance(lattice, SomLattice) else np.asarray(lattice)
    z = model.encode(x)
    q = soft_assignment(z, weights)
    p = target_distribution(q) if target is None else target
    kl = kl_divergence(p, q)
    recon = reconstruction_loss(x, model.decode(z))
    reg = regularizer(model, cfg.squared_reg)
    loss = T.add(T.add(kl, T.scale(recon, cfg.gamma)), T.scale(reg, cfg.beta))
    terms = {"kl": kl.item(), "recon": recon.item(), "reg": reg.item(),
             "total": loss.item(), "z": z.data}
    return loss, terms


def joint_train_step(batch, model: CaeModel, lattice: SomLattice, schedules: Schedules,
                     cfg: LossConfig) -> dict:
    """Map update on fresh embeddings, then one SGD step with the map frozen.

    Returns the loss terms measured before the parameter update, plus the
    batch quantization error against the updated map.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if len(batch) == 0:
        raise EmptyDatasetError("joint step needs a non-empty batch")
    for z in model.embed(batch):
        som_update(lattice, z, schedules)
    with Tape() as tape:
        loss, terms = dnm_loss(batch, model, lattice, cfg)
    T.sgd_step(model.params, tape.backward(loss, model.params), cfg.lr)
    terms["qe"] = quantization_error(lattice, terms.pop("z"))
    return terms


def train_dnm(images, model: CaeModel, lattice: SomLattice, schedules: Schedules,
              cfg: LossConfig, seed: int | np.random.Generator = 0) -> list[dict]:
    """Run ``cfg.iterations`` joint steps over seeded shuffled batches; one metrics row each."""
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise EmptyDatasetError("joint training needs a non-empty dataset")
    rng = np.random.default_rng(seed)
    batches = iterate_batches(len(images), cfg.batch_size, rng)
    log = []
    for step in range(cfg.iterations):
        row = joint_train_step(images[next(batches)], model, lattice, schedules, cfg)
        log.append({"step": step, **row})
    return log


def write_metrics_csv(rows, path) -> None:
    """CSV with header step,kl,recon,reg,total,qe; floats at 17 significant digits."""
    try:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(METRICS_HEADER)
            for row in rows:
                writer.writerow([row["step"]] + [f"{row[k]:.17g}" for k in METRICS_HEADER[1:]])
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc}") from exc


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(f)]
