"""Finite-difference checks for every differentiable op, at small random shapes."""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

from . import tensor as T
from .cae import Architecture, CaeModel
from .dnm import LossConfig, dnm_loss, kl_divergence, soft_assignment, target_distribution
from .tensor import Tensor, grad_check

TOLERANCE = 1e-4


class Check(NamedTuple):
    name: str
    fn: Callable[..., Tensor]
    make_inputs: Callable[[np.random.Generator], list[np.ndarray]]


def _conv_inputs(rng):
    c, f, k = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 4)
    h, w = rng.integers(k, 7), rng.integers(k, 7)
    return [rng.standard_normal((2, c, h, w)), rng.standard_normal((f, c, k, k)), rng.standard_normal(f)]


def _tconv_inputs(rng):
    c, f, k = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 4)
    h, w = rng.integers(1, 5), rng.integers(1, 5)
    return [rng.standard_normal((2, f, h, w)), rng.standard_normal((f, c, k, k)), rng.standard_normal(c)]


def _dense_inputs(rng):
    d, out = rng.integers(1, 7), rng.integers(1, 7)
    return [rng.standard_normal((3, d)), rng.standard_normal((out, d)), rng.standard_normal(out)]


def _kl_fn(logits):
    # q is reached through a softmax so it stays on the simplex under perturbation
    e = np.exp(logits.data - logits.data.max(axis=1, keepdims=True))
    q_data = e / e.sum(axis=1, keepdims=True)
    q = T.record_op("softmax", (logits,), q_data,
                    lambda g: (q_data * (g - (g * q_data).sum(axis=1, keepdims=True)),))
    return kl_divergence(_KL_TARGET, q)


_KL_TARGET = np.array([[0.7, 0.2, 0.1, 0.0], [0.25, 0.25, 0.25, 0.25], [0.1, 0.0, 0.3, 0.6]])

_TOY_ARCH = Architecture((1, 6, 6), ((2, 3), (2, 2)), 3)


def _dnm_check(rng, eps):
    """Gradient of the composite loss w.r.t. every model parameter, map and P frozen."""
    model = CaeModel.initialize(_TOY_ARCH, rng)
    # zero biases put relu inputs exactly on the kink; move off it
    for p in model.params:
        p.data += 0.1 * rng.standard_normal(p.shape)
    x = rng.uniform(0, 1, (3,) + _TOY_ARCH.input_shape)
    w = rng.standard_normal((4, _TOY_ARCH.embedding_dim))
    target = target_distribution(soft_assignment(model.encode(x), w))
    cfg = LossConfig(gamma=0.5, beta=1e-2)

    def loss(*params):
        return dnm_loss(x, CaeModel(_TOY_ARCH, list(params)), w, cfg, target=target)[0]

    return grad_check(loss, [p.data for p in model.params], eps)


REGISTRY = [
    Check("conv2d", T.conv2d, _conv_inputs),
    Check("conv2d_transposed", T.conv2d_transposed, _tconv_inputs),
    Check("dense", T.dense, _dense_inputs),
    Check("relu", T.relu, lambda rng: [rng.standard_normal((3, 4))]),
    Check("sigmoid", T.sigmoid, lambda rng: [rng.standard_normal((3, 4)) * 3]),
    Check("identity", lambda x: T.scale(T.identity(x), 1.0), lambda rng: [rng.standard_normal(5)]),
    Check("mse", lambda a: T.mse(a, np.linspace(0, 1, a.size).reshape(a.shape)),
          lambda rng: [rng.standard_normal((2, 3))]),
    Check("sum_squares", lambda a, b: T.sum_squares([a, b]),
          lambda rng: [rng.standard_normal(4), rng.standard_normal((2, 2))]),
    Check("soft_assignment", soft_assignment,
          lambda rng: [rng.standard_normal((3, 4)), rng.standard_normal((5, 4))]),
    Check("kl_divergence", _kl_fn, lambda rng: [rng.standard_normal(_KL_TARGET.shape)]),
]


def run_all(seed: int = 0, eps: float = 1e-5, repeats: int = 3) -> list[tuple[str, float]]:
    """Worst relative error per op over ``repeats`` random instances."""
    rng = np.random.default_rng(seed)
    report = []
    for check in REGISTRY:
        worst = max(grad_check(check.fn, check.make_inputs(rng), eps) for _ in range(repeats))
        report.append((check.name, worst))
    report.append(("dnm_loss", max(_dnm_check(rng, eps) for _ in range(repeats))))
    return report
