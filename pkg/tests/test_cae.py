import numpy as np
import pytest

from neuralmaps.cae import (Architecture, CaeModel, finetune, parse_filters, pretrain_layerwise,
                            reconstruction_loss)
from neuralmaps.data import EmptyDatasetError
from neuralmaps.tensor import ShapeError, grad_check

MNIST_ARCH = Architecture((1, 28, 28))
COIL_ARCH = Architecture((1, 64, 64))
TOY_ARCH = Architecture((1, 8, 8), ((3, 3),), 4)


def zeroed(arch):
    model = CaeModel.initialize(arch, 0)
    for p in model.params:
        p.data[...] = 0.0
    return model


def snapshot(model):
    return [p.data.copy() for p in model.params]


def test_parse_filters():
    assert parse_filters("10x5,8x5,5x5") == ((10, 5), (8, 5), (5, 5))
    assert parse_filters(" 2X3 ") == ((2, 3),)


def test_default_architecture():
    assert MNIST_ARCH.filters == ((10, 5), (8, 5), (5, 5))
    assert MNIST_ARCH.embedding_dim == 100


def test_coil_stage_shapes():
    assert [s[1:] for s in COIL_ARCH.stage_shapes()] == [(64, 64), (60, 60), (56, 56), (52, 52)]
    assert COIL_ARCH.flat_dim == 5 * 52 * 52


def test_architecture_too_small():
    with pytest.raises(ShapeError):
        Architecture((1, 10, 10))


class TestEncodeDecode:
    def test_zero_model_zero_embedding(self):
        z = zeroed(MNIST_ARCH).encode(np.zeros((1, 28, 28)))
        assert z.shape == (100,)
        assert not z.data.any()

    def test_mnist_embedding_shape(self, rng):
        model = CaeModel.initialize(MNIST_ARCH, 0)
        assert model.encode(rng.random((1, 28, 28))).shape == (100,)
        assert model.encode(rng.random((3, 1, 28, 28))).shape == (3, 100)

    def test_coil_embedding_shape(self, rng):
        model = CaeModel.initialize(COIL_ARCH, 0)
        assert model.encode(rng.random((1, 64, 64))).shape == (100,)

    def test_zero_decoder_gives_gray(self, rng):
        out = zeroed(MNIST_ARCH).decode(rng.standard_normal(100))
        assert out.shape == (1, 28, 28)
        assert np.all(out.data == 0.5)

    @pytest.mark.parametrize("arch", [MNIST_ARCH, COIL_ARCH])
    def test_round_trip_shape(self, arch, rng):
        model = CaeModel.initialize(arch, 1)
        x = rng.random((2,) + arch.input_shape)
        out = model.decode(model.encode(x)).data
        assert out.shape == x.shape
        assert np.all((out > 0) & (out < 1))

    def test_dimension_mismatch(self):
        model = CaeModel.initialize(MNIST_ARCH, 0)
        with pytest.raises(ShapeError):
            model.encode(np.zeros((1, 27, 28)))
        with pytest.raises(ShapeError):
            model.decode(np.zeros(99))

    def test_deterministic(self, rng):
        model = CaeModel.initialize(MNIST_ARCH, 0)
        x = rng.random((4, 1, 28, 28))
        assert model.embed(x).tobytes() == model.embed(x.copy()).tobytes()

    def test_seeded_init_repeatable(self):
        a, b = CaeModel.initialize(MNIST_ARCH, 5), CaeModel.initialize(MNIST_ARCH, 5)
        assert all(np.array_equal(p.data, q.data) for p, q in zip(a.params, b.params))

    def test_parameter_layout(self):
        model = CaeModel.initialize(MNIST_ARCH, 0)
        assert len(model.encoder_params) == 8 and len(model.decoder_params) == 8
        assert model.names[0] == "enc.conv0.kernel" and model.names[-1] == "dec.tconv0.bias"
        assert model.encoder_params[6].shape == (100, 5 * 16 * 16)


class TestReconstructionLoss:
    def test_equal(self):
        x = np.random.default_rng(0).random((2, 1, 3, 3))
        assert reconstruction_loss(x, x).item() == 0.0

    def test_ones_vs_zeros(self):
        assert reconstruction_loss(np.ones((2, 1, 2, 2)), np.zeros((2, 1, 2, 2))).item() == 1.0

    def test_hand_value(self):
        assert reconstruction_loss(np.array([1.0, 0.0]), np.array([0.5, 0.5])).item() == 0.25

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            reconstruction_loss(np.zeros(3), np.zeros(2))


class TestPretraining:
    def test_zero_iterations_is_noop(self, rng):
        model = CaeModel.initialize(TOY_ARCH, 0)
        before = snapshot(model)
        assert pretrain_layerwise(model, rng.random((10, 1, 8, 8)), iterations=0) == [[], []]
        assert finetune(model, rng.random((10, 1, 8, 8)), iterations=0) == []
        assert all(np.array_equal(a, p.data) for a, p in zip(before, model.params))

    def test_empty_dataset(self):
        model = CaeModel.initialize(TOY_ARCH, 0)
        with pytest.raises(EmptyDatasetError):
            pretrain_layerwise(model, np.zeros((0, 1, 8, 8)))
        with pytest.raises(EmptyDatasetError):
            finetune(model, np.zeros((0, 1, 8, 8)))

    def test_toy_layer_losses_do_not_increase(self):
        model = CaeModel.initialize(TOY_ARCH, 3)
        data = np.full((16, 1, 8, 8), 0.7)
        history = pretrain_layerwise(model, data, iterations=60, batch_size=8, lr=1.0, seed=4)
        assert len(history) == TOY_ARCH.n_stages
        for losses in history:
            assert losses[-1] <= losses[0]

    def test_full_arch_smoke(self, mnist):
        model = CaeModel.initialize(MNIST_ARCH, 0)
        history = pretrain_layerwise(model, mnist.images[:500], iterations=100, batch_size=32, lr=1.0, seed=1)
        assert all(np.all(np.isfinite(h)) for h in history)
        assert all(np.all(np.isfinite(p.data)) for p in model.params)

    def test_finetune_reduces_loss_and_heldout_error(self, mnist):
        train, held = mnist.images[::2][:500], mnist.images[1::2][:300]
        model = CaeModel.initialize(MNIST_ARCH, 0)
        before = np.mean((model.reconstruct(held) - held) ** 2)
        losses = finetune(model, train, iterations=100, batch_size=32, lr=1.0, seed=2)
        after = np.mean((model.reconstruct(held) - held) ** 2)
        assert losses[-1] < losses[0]
        assert after < before

    def test_finetune_is_deterministic(self, mnist):
        runs = []
        for _ in range(2):
            model = CaeModel.initialize(TOY_ARCH, 7)
            data = mnist.images[:40, :, 10:18, 10:18]
            finetune(model, data, iterations=5, batch_size=8, lr=0.5, seed=9)
            runs.append(b"".join(p.data.tobytes() for p in model.params))
        assert runs[0] == runs[1]

    def test_total_loss_gradient_matches_finite_differences(self, rng):
        model = CaeModel.initialize(TOY_ARCH, 2)
        for p in model.params:
            p.data += 0.05 * rng.standard_normal(p.shape)
        x = rng.random((3, 1, 8, 8))

        def loss(*params):
            m = CaeModel(TOY_ARCH, list(params))
            return reconstruction_loss(x, m.decode(m.encode(x)))

        assert grad_check(loss, [p.data for p in model.params]) <= 1e-4
