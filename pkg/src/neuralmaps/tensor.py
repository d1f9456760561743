"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations the convolutional autoencoder and the map losses need are
provided. Every op accepts an optional leading batch axis, so ``conv2d`` works
on ``(C, H, W)`` as well as ``(N, C, H, W)``.

Recording is define-by-run: ops evaluated inside ``with Tape() as tape:`` are
appended to ``tape.nodes`` in creation order, which is already a topological
order. Outside a tape nothing is recorded and ops are plain numpy math.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "record_op",
    "conv2d",
    "conv2d_transposed",
    "dense",
    "activation",
    "relu",
    "sigmoid",
    "identity",
    "reshape",
    "add",
    "mul",
    "scale",
    "total",
    "sqrt",
    "sum_squares",
    "mse",
    "sgd_step",
    "grad_check",
]

# Caps the im2col scratch buffer (in float64 elements) built per chunk.
_IM2COL_BUDGET = 1 << 22


class ShapeError(ValueError):
    """Raised when operand shapes do not agree."""


class Tensor:
    """A float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "neuralmaps_tape", default=None
)


class Tape:
    """Append-only record of ops; single writer.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = total(mul(x, x))
    >>> tape.backward(loss, [x])[0]
    array([6.])
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def backward(self, loss: Tensor, params: Iterable[Tensor] = ()) -> list[np.ndarray]:
        """Propagate d(loss)/d(.) back through the tape.

        Gradients are summed where a tensor feeds several consumers. Each
        tensor in ``params`` gets its ``grad`` slot set (zeros when it does not
        reach the loss) and the same arrays are returned in order.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g_out = grads.get(id(node.output))
            if g_out is None:
                continue
            for inp, g in zip(node.inputs, node.vjp(g_out)):
                if g is None:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        out = []
        for p in params:
            g = grads.get(id(p))
            g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64).reshape(p.shape)
            p.grad = g
            out.append(g)
        return out


def record_op(op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    """Wrap ``out`` as a Tensor and log it on the active tape, if any.

    ``vjp`` maps the output cotangent to one cotangent (or None) per input.
    """
    result = Tensor(out)
    tape = _active_tape.get()
    if tape is not None:
        tape.nodes.append(Node(op, tuple(inputs), result, vjp))
    return result


# ---------------------------------------------------------------------------
# convolution kernels on raw arrays, always batched (N, C, H, W)


def _chunks(n: int, per_item: int):
    step = max(1, _IM2COL_BUDGET // max(per_item, 1))
    for start in range(0, n, step):
        yield slice(start, min(n, start + step))


def _correlate(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Valid stride-1 cross-correlation: (N,C,H,W) * (F,C,K,K) -> (N,F,H-K+1,W-K+1)."""
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    ho, wo = h - kh + 1, w - kw + 1
    out = np.empty((n, f, ho, wo))
    for sl in _chunks(n, c * kh * kw * ho * wo):
        win = sliding_window_view(x[sl], (kh, kw), axis=(2, 3))  # N,C,Ho,Wo,K,K
        # contract with the window axes leading so the gather copies whole rows
        out[sl] = np.tensordot(k, win, axes=([1, 2, 3], [1, 4, 5])).transpose(1, 0, 2, 3)
    return out


def _correlate_kernel_grad(x: np.ndarray, g: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """d/dk of <correlate(x, k), g>: (N,C,H,W), (N,F,Ho,Wo) -> (F,C,K,K)."""
    n, c = x.shape[:2]
    f, ho, wo = g.shape[1:]
    dk = np.zeros((f, c, kh, kw))
    for sl in _chunks(n, c * kh * kw * ho * wo):
        win = sliding_window_view(x[sl], (kh, kw), axis=(2, 3))
        dk += np.tensordot(win, g[sl], axes=([0, 2, 3], [0, 2, 3])).transpose(3, 0, 1, 2)
    return dk


def _correlate_adjoint(g: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Adjoint of ``_correlate`` in its input: (N,F,Ho,Wo) -> (N,C,Ho+K-1,Wo+K-1)."""
    kh, kw = k.shape[2:]
    padded = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    flipped = np.ascontiguousarray(k.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    return _correlate(padded, flipped)


def _batched(x: Tensor, ndim: int, name: str) -> tuple[np.ndarray, bool]:
    if x.data.ndim == ndim:
        return x.data[None], True
    if x.data.ndim == ndim + 1:
        return x.data, False
    raise ShapeError(f"{name}: expected {ndim}-d or batched {ndim + 1}-d input, got shape {x.shape}")


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Valid, stride-1 cross-correlation plus per-filter bias."""
    xs, single = _batched(x, 3, "conv2d")
    k, b = kernels.data, bias.data
    if k.ndim != 4 or k.shape[2] != k.shape[3]:
        raise ShapeError(f"conv2d: kernels must be (F,C,K,K), got {k.shape}")
    f, c, ks, _ = k.shape
    if xs.shape[1] != c:
        raise ShapeError(f"conv2d: input has {xs.shape[1]} channels, kernels expect C={c}")
    if xs.shape[2] < ks or xs.shape[3] < ks:
        raise ShapeError(f"conv2d: input H×W {xs.shape[2]}×{xs.shape[3]} smaller than K={ks}")
    if b.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match F={f}")
    out = _correlate(xs, k) + b[None, :, None, None]

    def vjp(g):
        gs = g[None] if single else g
        dx = _correlate_adjoint(gs, k)
        return (dx[0] if single else dx,
                _correlate_kernel_grad(xs, gs, ks, ks),
                gs.sum(axis=(0, 2, 3)))

    return record_op("conv2d", (x, kernels, bias), out[0] if single else out, vjp)


def conv2d_transposed(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Adjoint of ``conv2d`` in its input, plus per-output-channel bias.

    kernels keep the encoder layout (F, C, K, K); output has C channels.
    """
    xs, single = _batched(x, 3, "conv2d_transposed")
    k, b = kernels.data, bias.data
    if k.ndim != 4 or k.shape[2] != k.shape[3]:
        raise ShapeError(f"conv2d_transposed: kernels must be (F,C,K,K), got {k.shape}")
    f, c, ks, _ = k.shape
    if xs.shape[1] != f:
        raise ShapeError(f"conv2d_transposed: input has {xs.shape[1]} channels, kernels expect F={f}")
    if b.shape != (c,):
        raise ShapeError(f"conv2d_transposed: bias shape {b.shape} does not match C={c}")
    out = _correlate_adjoint(xs, k) + b[None, :, None, None]

    def vjp(g):
        gs = g[None] if single else g
        dx = _correlate(gs, k)
        return (dx[0] if single else dx,
                _correlate_kernel_grad(gs, xs, ks, ks),
                gs.sum(axis=(0, 2, 3)))

    return record_op("conv2d_transposed", (x, kernels, bias), out[0] if single else out, vjp)


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``W @ x + b`` over the last axis."""
    xs, single = _batched(x, 1, "dense")
    w, b = weights.data, bias.data
    if w.ndim != 2 or w.shape[1] != xs.shape[1]:
        raise ShapeError(f"dense: weights {w.shape} incompatible with input dim d={xs.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"dense: bias shape {b.shape} does not match out={w.shape[0]}")
    out = xs @ w.T + b

    def vjp(g):
        gs = g[None] if single else g
        dx = gs @ w
        return dx[0] if single else dx, gs.T @ xs, gs.sum(axis=0)

    return record_op("dense", (x, weights, bias), out[0] if single else out, vjp)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record_op("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return record_op("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def identity(x: Tensor) -> Tensor:
    return x


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "identity": identity}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    return record_op("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(src),))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return record_op("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return record_op("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record_op("scale", (a,), a.data * c, lambda g: (g * c,))


def total(a: Tensor) -> Tensor:
    """Sum of all elements, as a 0-d tensor."""
    src = a.data
    return record_op("sum", (a,), np.asarray(src.sum()), lambda g: (np.full_like(src, g),))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return record_op("sqrt", (a,), out, lambda g: (g * 0.5 / out,))


def sum_squares(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of squared entries over every tensor in ``tensors``."""
    tensors = tuple(tensors)
    value = sum(float(np.dot(t.data.ravel(), t.data.ravel())) for t in tensors)
    return record_op("sum_squares", tensors, np.asarray(value),
                     lambda g: tuple(2.0 * g * t.data for t in tensors))


def mse(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over every element; ``target`` is constant."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {t.shape}")
    diff = pred.data - t
    n = diff.size
    return record_op("mse", (pred,), np.asarray(np.dot(diff.ravel(), diff.ravel()) / n),
                     lambda g: (g * 2.0 / n * diff,))


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray] | None = None, lr: float = 0.01) -> None:
    """In-place ``p <- p - lr * g``. Uses each ``p.grad`` when ``grads`` is None."""
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params):
        raise ShapeError(f"sgd_step: {len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if g is None:
            continue
        g = np.asarray(g)
        if g.shape != p.shape:
            raise ShapeError(f"sgd_step: grad shape {g.shape} does not match param {p.shape}")
        p.data -= lr * g


def grad_check(fn: Callable[..., Tensor], inputs: Sequence, eps: float = 1e-5,
               seed: int = 0, floor: float = 1e-6) -> float:
    """Worst per-coordinate relative error of backward() vs central differences.

    ``fn`` maps Tensors to a Tensor. Non-scalar outputs are contracted with a
    fixed random cotangent so every output entry contributes. The relative
    error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    probe = None

    def scalar(ts):
        nonlocal probe
        out = fn(*ts)
        if out.size == 1:
            return out
        if probe is None:
            probe = np.random.default_rng(seed).standard_normal(out.shape)
        return total(mul(out, Tensor(probe)))

    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = scalar(ts)
    analytic = tape.backward(loss, ts)

    worst = 0.0
    for i, a in enumerate(arrays):
        flat = a.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = scalar([Tensor(b) for b in arrays]).item()
            flat[j] = orig - eps
            down = scalar([Tensor(b) for b in arrays]).item()
            flat[j] = orig
            numeric = (up - down) / (2 * eps)
            exact = analytic[i].reshape(-1)[j]
            err = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            worst = max(worst, err)
    return worst
