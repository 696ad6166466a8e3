import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ggnet import graphs
from ggnet import tensor as tn
from ggnet.exceptions import CalibrationError, ConfigError, GeometryError

from oracles import softmax_10_identity

R = graphs.EARTH_RADIUS_KM


def _mlp(dim, scale, rng):
    return {k: v * scale for k, v in graphs.init_score_mlp(dim, rng).items()}


class TestLearnedAdjacency:
    def test_zero_parameters_give_uniform_rows(self):
        zero = {k: np.zeros_like(v) for k, v in graphs.init_score_mlp(3, np.random.default_rng(0)).items()}
        A = graphs.build_inter_adjacency(np.zeros((4, 3)), zero, zero).data
        np.testing.assert_allclose(A, 0.25)

    def test_single_location(self):
        rng = np.random.default_rng(0)
        A = graphs.build_inter_adjacency(rng.normal(size=(1, 3)), _mlp(3, 1, rng), _mlp(3, 1, rng))
        assert A.data.tolist() == [[1.0]]

    def test_intra_zero_is_uniform(self):
        np.testing.assert_allclose(graphs.build_intra_adjacency(np.zeros((3, 3))).data, 1 / 3)

    def test_intra_scaled_identity(self):
        A = graphs.build_intra_adjacency(10 * np.eye(3)).data
        diag, off = softmax_10_identity()
        np.testing.assert_allclose(np.diag(A), diag, rtol=1e-12)
        np.testing.assert_allclose(A[0, 1], off, rtol=1e-12)
        assert diag == pytest.approx(0.99991, abs=1e-5) and off == pytest.approx(4.54e-5, rel=1e-3)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 7), st.integers(0, 10_000), st.floats(0.01, 50))
    def test_rows_stochastic(self, N, seed, scale):
        rng = np.random.default_rng(seed)
        E = rng.normal(scale=scale, size=(N, 3))
        A = graphs.build_inter_adjacency(E, _mlp(3, scale, rng), _mlp(3, scale, rng)).data
        np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(A >= 0)
        B = graphs.build_intra_adjacency(rng.normal(scale=scale, size=(N, N))).data
        np.testing.assert_allclose(B.sum(axis=1), 1.0, atol=1e-9)

    def test_inter_gradient(self):
        rng = np.random.default_rng(1)
        m1, m2 = _mlp(3, 1, rng), _mlp(3, 1, rng)
        keys = list(m1)
        w = rng.normal(size=(4, 4))

        def f(E, *vals):
            A = graphs.build_inter_adjacency(E, dict(zip(keys, vals[:4])), dict(zip(keys, vals[4:])))
            return tn.sum_(A * w)

        point = [rng.normal(size=(4, 3))] + [m1[k] for k in keys] + [m2[k] for k in keys]
        assert tn.grad_check(f, point) < 1e-5


class TestHaversine:
    def test_same_point(self):
        assert graphs.haversine([10.0, 20.0], [10.0, 20.0]) == 0.0

    def test_quarter_circle(self):
        d = graphs.haversine([0.0, 0.0], [0.0, 90.0])
        assert d == pytest.approx(math.pi * R / 2, rel=1e-12)
        assert d == pytest.approx(10007.54, abs=0.01)

    def test_poles(self):
        d = graphs.haversine([90.0, 0.0], [-90.0, 0.0])
        assert d == pytest.approx(math.pi * R, rel=1e-12)
        assert d == pytest.approx(20015.09, abs=0.01)

    def test_longitude_wraps(self):
        assert graphs.haversine([10.0, 170.0], [10.0, -190.0]) == pytest.approx(0.0, abs=1e-9)


class TestGaussianKernel:
    coords = np.array([[0.0, 0.0], [0.0, 10.0], [0.0, 30.0], [5.0, 5.0]])

    def test_zero_distance_weight_one(self):
        A = graphs.gaussian_kernel_adjacency(self.coords, 1e9, self_loops=True)
        np.testing.assert_array_equal(np.diag(A), 1.0)

    def test_threshold(self):
        dist = graphs.pairwise_distances(self.coords)
        delta = np.sort(dist[np.triu_indices(4, 1)])[2]
        A = graphs.gaussian_kernel_adjacency(self.coords, delta)
        assert np.all(A[dist >= delta] == 0)

    def test_one_sigma(self):
        w = graphs.kernel_weights([0.0, 700.0, 1000.0, 1500.0], 700.0 ** 2, 1000.0)
        assert w[0] == 1.0 and w[2] == 0.0 and w[3] == 0.0
        assert w[1] == pytest.approx(math.exp(-1)) and w[1] == pytest.approx(0.3679, abs=1e-4)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_permutation_equivariant(self, seed):
        rng = np.random.default_rng(seed)
        coords = np.column_stack([rng.uniform(-60, 60, 6), rng.uniform(-170, 170, 6)])
        perm = rng.permutation(6)
        A = graphs.gaussian_kernel_adjacency(coords, 5000.0)
        B = graphs.gaussian_kernel_adjacency(coords[perm], 5000.0)
        np.testing.assert_allclose(B, A[np.ix_(perm, perm)], rtol=1e-12, atol=1e-15)

    def test_missing_coords(self):
        with pytest.raises(GeometryError):
            graphs.gaussian_kernel_adjacency(None, 1.0)


class TestCalibrateDelta:
    def test_complete_graph(self):
        coords = np.array([[0.0, 0.0], [0.0, 10.0], [0.0, 30.0]])
        delta = graphs.calibrate_delta(coords, 2.0)
        assert delta > graphs.pairwise_distances(coords).max()

    def test_collinear(self):
        coords = np.array([[0.0, 0.0], [0.0, 1.0], [0.0, 2.0]])
        spacing = graphs.haversine(coords[0], coords[1])
        delta = graphs.calibrate_delta(coords, 1.0)
        assert spacing < delta < spacing * (1 + 1e-9)
        assert graphs.average_degree(coords, delta) == pytest.approx(4 / 3)

    def test_capitals_order_of_magnitude(self):
        from ggnet.ingestion import world_capitals
        coords = np.array([[r["lat"], r["lon"]] for r in world_capitals()])
        delta = graphs.calibrate_delta(coords, 10.0)
        assert 1000 < delta < 10_000

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_monotone(self, seed):
        rng = np.random.default_rng(seed)
        coords = np.column_stack([rng.uniform(-60, 60, 8), rng.uniform(-170, 170, 8)])
        deltas = [graphs.calibrate_delta(coords, t) for t in (1.0, 2.0, 3.5, 5.0, 7.0)]
        assert deltas == sorted(deltas)

    def test_unreachable(self):
        with pytest.raises(CalibrationError):
            graphs.calibrate_delta(np.zeros((3, 2)) + [[0, 0], [0, 1], [0, 2]], 5.0)


class TestKnnNeighbors:
    def test_pair(self):
        assert graphs.knn_neighbors([[0.0, 0.0], [0.0, 1.0]], 1).ravel().tolist() == [1, 0]

    def test_duplicate_is_nearest(self):
        coords = [[0.0, 0.0], [10.0, 10.0], [0.0, 0.0]]
        assert graphs.knn_neighbors(coords, 1)[0, 0] == 2

    def test_line(self):
        coords = [[0.0, 0.0], [0.0, 1.0], [0.0, 2.0], [0.0, 10.0]]
        assert set(graphs.knn_neighbors(coords, 2)[0].tolist()) == {1, 2}

    def test_k_too_large(self):
        with pytest.raises(ConfigError):
            graphs.knn_neighbors([[0.0, 0.0], [0.0, 1.0]], 2)


def test_export_skips_absent(tmp_path):
    paths = graphs.export_graphs(tmp_path, np.eye(2), None, np.ones((2, 3)), ("a", "b"), ("x",))
    assert [p.name for p in paths] == ["A_G.csv", "E_G.csv"]
    assert (tmp_path / "A_G.csv").read_text().splitlines()[0] == "location_id,a,b"
