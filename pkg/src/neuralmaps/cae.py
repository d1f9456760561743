"""Convolutional autoencoder with greedy layer-wise pretraining.

Encoder: valid 5x5 convolutions with relu, then a linear dense layer to the
embedding. Decoder mirrors it: relu dense, transposed convolutions with relu,
and a sigmoid on the final image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import EmptyDatasetError, iterate_batches
from .tensor import ShapeError, Tape, Tensor


@dataclass(frozen=True)
class Architecture:
    input_shape: tuple[int, int, int] = (1, 28, 28)
    filters: tuple[tuple[int, int], ...] = ((10, 5), (8, 5), (5, 5))
    embedding_dim: int = 100

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "filters", tuple((int(f), int(k)) for f, k in self.filters))
        for c, h, w in self.stage_shapes():
            if h < 1 or w < 1:
                raise ShapeError(f"filters {self.filters} shrink input {self.input_shape} below 1x1")

    def stage_shapes(self) -> list[tuple[int, int, int]]:
        """Shape entering each stage, followed by the shape the dense layer flattens."""
        shapes = [self.input_shape]
        c, h, w = self.input_shape
        for f, k in self.filters:
            c, h, w = f, h - k + 1, w - k + 1
            shapes.append((c, h, w))
        return shapes

    @property
    def flat_dim(self) -> int:
        c, h, w = self.stage_shapes()[-1]
        return c * h * w

    @property
    def n_stages(self) -> int:
        return len(self.filters) + 1


def parse_filters(text: str) -> tuple[tuple[int, int], ...]:
    """Parse ``"10x5,8x5,5x5"`` into ((10, 5), (8, 5), (5, 5))."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        f, k = part.lower().split("x")
        out.append((int(f), int(k)))
    return tuple(out)


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class CaeModel:
    """Encoder parameters then decoder parameters, in declaration order.

    Stage ``i`` of the encoder pairs with stage ``i`` of the decoder; the
    decoder runs its stages in reverse.
    """

    def __init__(self, arch: Architecture, params: list[Tensor]):
        self.arch = arch
        expected = [p for p, _ in self.param_specs(arch)]
        got = [t.shape for t in params]
        if got != expected:
            raise ShapeError(f"parameter shapes {got} do not match architecture {expected}")
        self.params = params

    @staticmethod
    def param_specs(arch: Architecture) -> list[tuple[tuple[int, ...], str]]:
        specs = []
        shapes = arch.stage_shapes()
        for i, (f, k) in enumerate(arch.filters):
            c = shapes[i][0]
            specs += [((f, c, k, k), f"enc.conv{i}.kernel"), ((f,), f"enc.conv{i}.bias")]
        m, d = arch.embedding_dim, arch.flat_dim
        specs += [((m, d), "enc.dense.weight"), ((m,), "enc.dense.bias")]
        specs += [((d, m), "dec.dense.weight"), ((d,), "dec.dense.bias")]
        for i in reversed(range(len(arch.filters))):
            f, k = arch.filters[i]
            c = shapes[i][0]
            specs += [((f, c, k, k), f"dec.tconv{i}.kernel"), ((c,), f"dec.tconv{i}.bias")]
        return specs

    @classmethod
    def initialize(cls, arch: Architecture, seed: int | np.random.Generator = 0) -> "CaeModel":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        params = []
        for shape, name in cls.param_specs(arch):
            if name.endswith("bias"):
                params.append(Tensor(np.zeros(shape), requires_grad=True))
                continue
            if len(shape) == 4:
                f, c, k, _ = shape
                fan_in, fan_out = c * k * k, f * k * k
            else:
                fan_out, fan_in = shape
            params.append(Tensor(_glorot(rng, shape, fan_in, fan_out), requires_grad=True))
        return cls(arch, params)

    @property
    def names(self) -> list[str]:
        return [name for _, name in self.param_specs(self.arch)]

    @property
    def n_encoder_params(self) -> int:
        return 2 * self.arch.n_stages

    @property
    def encoder_params(self) -> list[Tensor]:
        return self.params[:self.n_encoder_params]

    @property
    def decoder_params(self) -> list[Tensor]:
        return self.params[self.n_encoder_params:]

    def stage_params(self, i: int) -> tuple[list[Tensor], list[Tensor]]:
        """(encoder pair, decoder pair) for stage ``i``."""
        enc = self.params[2 * i:2 * i + 2]
        # decoder list runs [dense, tconv(L-1), ..., tconv0] for L conv stages
        j = len(self.arch.filters) - i
        dec = self.decoder_params[2 * j:2 * j + 2]
        return enc, dec

    def copy(self) -> "CaeModel":
        return CaeModel(self.arch, [Tensor(p.data.copy(), requires_grad=True) for p in self.params])

    # -- forward pieces -----------------------------------------------------

    def encode_stage(self, i: int, h: Tensor) -> Tensor:
        (w, b), _ = self.stage_params(i)
        if i < len(self.arch.filters):
            return T.relu(T.conv2d(h, w, b))
        return T.dense(T.reshape(h, (h.shape[0], -1)), w, b)

    def decode_stage(self, i: int, h: Tensor) -> Tensor:
        _, (w, b) = self.stage_params(i)
        if i < len(self.arch.filters):
            out = T.conv2d_transposed(h, w, b)
        else:
            out = T.reshape(T.dense(h, w, b), (h.shape[0],) + self.arch.stage_shapes()[-1])
        return T.sigmoid(out) if i == 0 else T.relu(out)

    def _batch(self, x, expected: tuple[int, ...], what: str) -> tuple[Tensor, bool]:
        t = x if isinstance(x, Tensor) else Tensor(x)
        if t.shape == expected:
            return T.reshape(t, (1,) + expected), True
        if t.data.ndim == len(expected) + 1 and t.shape[1:] == expected:
            return t, False
        raise ShapeError(f"{what}: expected {expected} or a batch of them, got {t.shape}")

    def encode(self, x) -> Tensor:
        """Map images (C,H,W) or (N,C,H,W) to embeddings (m,) or (N,m)."""
        h, single = self._batch(x, self.arch.input_shape, "encode")
        for i in range(self.arch.n_stages):
            h = self.encode_stage(i, h)
        return T.reshape(h, (self.arch.embedding_dim,)) if single else h

    def decode(self, z) -> Tensor:
        """Map embeddings (m,) or (N,m) to images in (0, 1)."""
        h, single = self._batch(z, (self.arch.embedding_dim,), "decode")
        for i in reversed(range(self.arch.n_stages)):
            h = self.decode_stage(i, h)
        return T.reshape(h, self.arch.input_shape) if single else h

    def embed(self, images: np.ndarray, chunk: int = 512) -> np.ndarray:
        """Untaped batch encoding, chunked to bound memory."""
        images = np.asarray(images, dtype=np.float64)
        parts = [self.encode(images[s:s + chunk]).data for s in range(0, len(images), chunk)]
        if not parts:
            return np.zeros((0, self.arch.embedding_dim))
        return np.concatenate(parts)

    def reconstruct(self, images: np.ndarray, chunk: int = 512) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        return np.concatenate([self.decode(self.encode(images[s:s + chunk])).data
                               for s in range(0, len(images), chunk)])


def reconstruction_loss(x, xhat) -> Tensor:
    """Mean squared error over batch items and pixels; ``x`` is the constant target."""
    xhat = xhat if isinstance(xhat, Tensor) else Tensor(xhat)
    return T.mse(xhat, x)


def _require_data(images) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise EmptyDatasetError("training needs at least one image")
    return images


def pretrain_layerwise(model: CaeModel, images, iterations: int = 500, batch_size: int = 256,
                       lr: float = 0.01, seed: int | np.random.Generator = 0) -> list[list[float]]:
    """Greedy layer-wise pretraining, in place.

    Stage ``i`` is trained as a shallow autoencoder (encoder stage plus its
    mirror) on the frozen output of stages ``0..i-1`` for ``iterations``
    mini-batch steps. Returns the per-stage loss history.
    """
    images = _require_data(images)
    rng = np.random.default_rng(seed)
    history = []
    for i in range(model.arch.n_stages):
        enc, dec = model.stage_params(i)
        params = enc + dec
        losses = []
        batches = iterate_batches(len(images), batch_size, rng)
        for _ in range(iterations):
            h = Tensor(images[next(batches)])
            for j in range(i):
                h = model.encode_stage(j, h)
            with Tape() as tape:
                recon = model.decode_stage(i, model.encode_stage(i, h))
                loss = T.mse(recon, h)
            T.sgd_step(params, tape.backward(loss, params), lr)
            losses.append(loss.item())
        history.append(losses)
    return history


def finetune(model: CaeModel, images, iterations: int = 500, batch_size: int = 256,
             lr: float = 0.01, seed: int | np.random.Generator = 0) -> list[float]:
    """End-to-end reconstruction training of all parameters, in place."""
    images = _require_data(images)
    rng = np.random.default_rng(seed)
    batches = iterate_batches(len(images), batch_size, rng)
    losses = []
    for _ in range(iterations):
        x = images[next(batches)]
        with Tape() as tape:
            loss = reconstruction_loss(x, model.decode(model.encode(x)))
        T.sgd_step(model.params, tape.backward(loss, model.params), lr)
        losses.append(loss.item())
    return losses
