import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuralmaps.data import EmptyDatasetError, synthetic_blobs
from neuralmaps.som import (Schedules, SomLattice, best_matching_unit, best_matching_units, init_som,
                            neighborhood, pretrain_som, quantization_error, schedules_at, som_update)


def brute_bmu(z, weights):
    best, best_d = 0, math.inf
    for j, w in enumerate(weights):
        d = math.sqrt(sum((a - b) ** 2 for a, b in zip(z, w)))
        if d < best_d:
            best, best_d = j, d
    return best


def brute_qe(zs, weights):
    return sum(min(math.dist(z, w) for w in weights) for z in zs) / len(zs)


def blob_embeddings(dim=2, spread=0.05, seed=7):
    ds = synthetic_blobs(5, 200, dim, spread, seed)
    return ds.images.reshape(len(ds), -1)


class TestLattice:
    def test_positions_are_grid(self):
        lat = SomLattice(2, 3, np.zeros((6, 4)))
        assert lat.positions.tolist() == [[0, 0], [0, 1], [0, 2], [1, 0], [1, 1], [1, 2]]
        assert lat.size == 6 and lat.dim == 4

    def test_positions_read_only(self):
        lat = SomLattice(2, 2, np.zeros((4, 1)))
        with pytest.raises(ValueError):
            lat.positions[0, 0] = 5

    def test_weight_shape_checked(self):
        with pytest.raises(ValueError):
            SomLattice(2, 3, np.zeros((5, 2)))


class TestInit:
    def test_single_point_sample(self):
        z = np.array([[0.1, 0.2, 0.3]])
        lat = init_som(3, 4, 3, z, seed=0)
        assert np.all(lat.weights == z)

    def test_seeded(self, rng):
        sample = rng.standard_normal((50, 5))
        a, b = init_som(4, 4, 5, sample, seed=11), init_som(4, 4, 5, sample, seed=11)
        assert a.weights.tobytes() == b.weights.tobytes()

    def test_full_lattice_size(self, rng):
        lat = init_som(20, 30, 100, rng.standard_normal((80, 100)), seed=0)
        assert lat.weights.shape == (600, 100)

    def test_rows_come_from_sample(self, rng):
        sample = rng.standard_normal((7, 3))
        lat = init_som(3, 3, 3, sample, seed=1)
        assert all(any(np.array_equal(w, s) for s in sample) for w in lat.weights)

    def test_uses_encoder(self):
        lat = init_som(1, 2, 2, np.ones((3, 5)), encode=lambda x: x[:, :2] * 2, seed=0)
        assert np.all(lat.weights == 2.0)

    def test_empty(self):
        with pytest.raises(EmptyDatasetError):
            init_som(2, 2, 3, np.zeros((0, 3)))


class TestBmu:
    def test_exact_match(self, rng):
        w = rng.standard_normal((10, 4))
        assert best_matching_unit(w[6], SomLattice(2, 5, w)) == 6

    def test_nearer_neuron(self):
        lat = SomLattice(1, 2, np.array([[0.0, 0.0], [1.0, 1.0]]))
        assert best_matching_unit([0.9, 0.9], lat) == 1

    def test_tie_goes_to_lowest_index(self):
        lat = SomLattice(1, 3, np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]]))
        assert best_matching_unit([0.0, 0.0], lat) == 0

    def test_matches_exhaustive_scan(self, rng):
        w = rng.standard_normal((20, 6))
        lat = SomLattice(4, 5, w)
        for _ in range(50):
            z = rng.standard_normal(6)
            assert best_matching_unit(z, lat) == brute_bmu(z, w)

    def test_vectorized_agrees(self, rng):
        lat = SomLattice(3, 7, rng.standard_normal((21, 4)))
        zs = rng.standard_normal((300, 4))
        assert best_matching_units(zs, lat).tolist() == [best_matching_unit(z, lat) for z in zs]


class TestNeighborhood:
    lat = SomLattice(10, 10, np.zeros((100, 1)))

    def test_self(self):
        assert neighborhood(37, 37, self.lat, 2.0) == 1.0

    def test_distance_equal_sigma(self):
        # neurons 0 and 3 are three columns apart
        assert neighborhood(0, 3, self.lat, 3.0) == pytest.approx(0.60653, abs=1e-5)
        assert neighborhood(0, 3, self.lat, 3.0) == pytest.approx(math.exp(-0.5), rel=1e-15)

    def test_distance_three_unit_sigma(self):
        assert neighborhood(0, 30, self.lat, 1.0) == pytest.approx(0.01111, abs=1e-5)

    def test_bad_sigma(self):
        with pytest.raises(ValueError):
            neighborhood(0, 1, self.lat, 0.0)

    @settings(max_examples=100, deadline=None)
    @given(j=st.integers(0, 99), u=st.integers(0, 99), sigma=st.floats(0.05, 50))
    def test_symmetric_and_bounded(self, j, u, sigma):
        h = neighborhood(j, u, self.lat, sigma)
        assert h == neighborhood(u, j, self.lat, sigma)
        assert 0.0 <= h <= 1.0

    def test_monotone_in_distance(self):
        hs = [neighborhood(0, k, self.lat, 2.5) for k in range(10)]
        assert all(a > b for a, b in zip(hs, hs[1:]))


class TestSchedules:
    def test_start(self):
        assert schedules_at(Schedules(), 0) == (0.3, 10.0)

    def test_at_alpha(self):
        eta, sigma = schedules_at(Schedules(), 2000)
        assert eta == pytest.approx(0.3 / math.e, rel=1e-14)
        assert sigma == pytest.approx(10 / math.e, rel=1e-14)
        assert (round(eta, 5), round(sigma, 4)) == (0.11036, 3.6788)

    @settings(max_examples=100, deadline=None)
    @given(n1=st.integers(0, 10**5), gap=st.integers(1, 10**4))
    def test_strictly_decreasing_and_positive(self, n1, gap):
        s = Schedules()
        e1, s1 = s.at(n1)
        e2, s2 = s.at(n1 + gap)
        assert e2 < e1 and s2 < s1
        assert e2 > 0 and s2 > 0

    def test_negative_step(self):
        with pytest.raises(ValueError):
            Schedules().at(-1)


class TestUpdate:
    def test_fixed_point(self):
        z = np.array([0.3, -0.7])
        lat = SomLattice(2, 2, np.tile(z, (4, 1)))
        som_update(lat, z, Schedules())
        assert np.all(lat.weights == z)

    def test_unit_gain_moves_onto_input(self):
        lat = SomLattice(1, 2, np.array([[0.0, 0.0], [5.0, 5.0]]))
        z = np.array([1.0, 2.0])
        som_update(lat, z, Schedules(eta0=1.0))
        np.testing.assert_array_equal(lat.weights[0], z)

    def test_hand_value(self):
        # neurons 1 apart, sigma chosen so h = 0.5 at the neighbor
        sigma = 1.0 / math.sqrt(2 * math.log(2))
        lat = SomLattice(1, 2, np.array([[0.0, 0.0], [1.0, 0.0]]))
        som_update(lat, np.array([1.0, 0.0]), Schedules(sigma0=sigma, eta0=0.3))
        np.testing.assert_allclose(lat.weights[0], [0.15, 0.0], atol=1e-15)
        np.testing.assert_array_equal(lat.weights[1], [1.0, 0.0])

    def test_counter_and_positions(self, rng):
        lat = SomLattice(3, 3, rng.standard_normal((9, 2)))
        pos = lat.positions.copy()
        s = Schedules(n=5)
        som_update(lat, rng.standard_normal(2), s)
        assert s.n == 6
        assert np.array_equal(lat.positions, pos)

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**31), n=st.integers(0, 20000))
    def test_contraction(self, seed, n):
        rng = np.random.default_rng(seed)
        lat = SomLattice(4, 5, rng.standard_normal((20, 3)))
        z = rng.standard_normal(3)
        before = np.linalg.norm(lat.weights - z, axis=1)
        som_update(lat, z, Schedules(n=n))
        assert np.all(np.linalg.norm(lat.weights - z, axis=1) <= before)


class TestPretrain:
    def test_zero_steps(self, rng):
        lat = SomLattice(2, 2, rng.standard_normal((4, 2)))
        before = lat.weights.copy()
        pretrain_som(lat, rng.standard_normal((10, 2)), 0, Schedules())
        assert np.array_equal(lat.weights, before)

    def test_empty(self, rng):
        with pytest.raises(EmptyDatasetError):
            pretrain_som(SomLattice(1, 1, np.zeros((1, 2))), np.zeros((0, 2)), 5, Schedules())

    def test_deterministic(self):
        z = blob_embeddings()
        runs = []
        for _ in range(2):
            lat = init_som(5, 5, 2, z, seed=1)
            pretrain_som(lat, z, 500, Schedules(), seed=2)
            runs.append(lat.weights.tobytes())
        assert runs[0] == runs[1]

    def test_cycles_through_every_point(self, rng):
        z = rng.standard_normal((7, 2))
        seen = []
        pretrain_som(SomLattice(1, 2, np.zeros((2, 2))), z, 14, Schedules(),
                     callback=lambda lat, x: seen.append(tuple(x)))
        assert sorted(seen[:7]) == sorted(map(tuple, z)) == sorted(seen[7:])

    def test_trained_from_noise_lowers_error(self):
        z = blob_embeddings()
        lat = SomLattice(10, 10, np.random.default_rng(3).uniform(0, 1, (100, 2)))
        start = quantization_error(lat, z)
        pretrain_som(lat, z, 5000, Schedules(), seed=7)
        assert quantization_error(lat, z) < start

    @pytest.mark.xfail(strict=True, reason=(
        "with neurons initialized on sampled data points the starting error is already near its "
        "floor; 5000 steps ending at sigma ~0.8 leave it slightly higher (measured ratio ~1.16)"))
    def test_trained_from_sampled_init_lowers_error(self):
        z = blob_embeddings()
        lat = init_som(10, 10, 2, z, seed=7)
        start = quantization_error(lat, z)
        pretrain_som(lat, z, 5000, Schedules(), seed=7)
        assert quantization_error(lat, z) < start


class TestQuantizationError:
    def test_zero_when_on_neurons(self, rng):
        w = rng.standard_normal((6, 3))
        assert quantization_error(SomLattice(2, 3, w), w[[0, 5, 5, 2]]) == 0.0

    def test_single_pair(self):
        lat = SomLattice(1, 1, np.array([[1.0, 1.0]]))
        assert quantization_error(lat, [[4.0, 5.0]]) == 5.0

    def test_matches_brute_force(self, rng):
        w, zs = rng.standard_normal((12, 4)), rng.standard_normal((40, 4))
        assert quantization_error(SomLattice(3, 4, w), zs) == pytest.approx(brute_qe(zs, w), rel=1e-12)

    def test_empty(self):
        with pytest.raises(EmptyDatasetError):
            quantization_error(SomLattice(1, 1, np.zeros((1, 2))), np.zeros((0, 2)))
