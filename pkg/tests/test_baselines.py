import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ggnet import tensor as tn
from ggnet.baselines import (RecurrentModel, RnnVariantConfig, filler, gru_cell, init_gru,
                             knn_impute, mean_impute, select_knn_k)
from ggnet.dataset import TEST, TRAIN, VAL, ChannelSplit, SpatioTemporalDataset, standardize
from ggnet.exceptions import ConfigError, GeometryError
from ggnet.metrics import mae

from oracles import gru_zero_params, half_normal_mean


def _split(rows):
    return ChannelSplit(np.array(rows, dtype=np.int8))


def _ds(values, coords, mask=None):
    values = np.asarray(values, dtype=float)
    return SpatioTemporalDataset(values, np.ones(values.shape) if mask is None else mask,
                                 coords=coords)


class TestKnn:
    def test_duplicate_location_copies_exactly(self):
        rng = np.random.default_rng(0)
        vals = rng.normal(size=(4, 10, 2))
        vals[3] = vals[0]
        coords = [[0, 0], [10, 10], [-20, 40], [0, 0]]
        split = _split([[TRAIN, TRAIN], [TRAIN, VAL], [TRAIN, TRAIN], [TEST, TEST]])
        ds = _ds(vals, coords)
        pred = knn_impute(ds, split, 1)
        target = split.entry_mask(TEST, ds.mask)
        assert pred.valid[target].all()
        assert mae(pred.point, vals, target) == 0.0

    def test_equidistant_average(self):
        vals = np.zeros((3, 4, 1))
        vals[1], vals[2] = 2.0, 4.0
        coords = [[0, 0], [0, 10], [0, -10]]
        pred = knn_impute(_ds(vals, coords), _split([[TEST], [TRAIN], [TRAIN]]), 2)
        np.testing.assert_array_equal(pred.point[0, :, 0], 3.0)

    def test_partially_observed_neighbour(self):
        vals = np.ones((2, 6, 1))
        mask = np.ones(vals.shape, dtype=np.uint8)
        mask[1, 1::2] = 0
        pred = knn_impute(_ds(vals, [[0, 0], [0, 1]], mask), _split([[TEST], [TRAIN]]), 1)
        assert pred.valid[0, :, 0].tolist() == [True, False] * 3

    def test_needs_coords(self):
        with pytest.raises(GeometryError):
            knn_impute(SpatioTemporalDataset(np.zeros((2, 2, 1)), np.ones((2, 2, 1))),
                       _split([[TEST], [TRAIN]]), 1)

    def test_selects_best_k(self):
        rng = np.random.default_rng(1)
        vals = rng.normal(size=(6, 20, 2)) + 5
        vals[5] = vals[0]
        coords = [[0, 0], [30, 30], [-30, 60], [40, -80], [10, 120], [0, 0]]
        split = _split([[TRAIN, TRAIN]] * 5 + [[VAL, TEST]])
        k, scores = select_knn_k(_ds(vals, coords), split, (1, 2, 3, 5, 10))
        assert k == 1 and scores[1] == 0.0 and 10 not in scores


class TestMean:
    def test_standardized_predicts_zero(self):
        rng = np.random.default_rng(0)
        ds, _ = standardize(_ds(rng.normal(3, 2, size=(4, 30, 1)), None))
        split = _split([[TRAIN], [TRAIN], [TRAIN], [TEST]])
        pred = mean_impute(ds, split)
        assert abs(pred.point[3, 0, 0]) < 0.5

    def test_gaussian_mae(self):
        rng = np.random.default_rng(1)
        vals = rng.normal(size=(10, 20_000, 1))
        split = _split([[TRAIN]] * 9 + [[TEST]])
        ds = _ds(vals, None)
        pred = mean_impute(ds, split)
        err = mae(pred.point, vals, split.entry_mask(TEST, ds.mask))
        assert err == pytest.approx(half_normal_mean(), abs=0.01)

    def test_constant_channel_exact(self):
        vals = np.full((3, 5, 1), 4.2)
        split = _split([[TRAIN], [TRAIN], [TEST]])
        ds = _ds(vals, None)
        assert mae(mean_impute(ds, split).point, vals, split.entry_mask(TEST, ds.mask)) == 0.0


class TestGru:
    def test_zero_parameters_halve_state(self):
        zero = {k: np.zeros_like(v) for k, v in init_gru(2, 3, np.random.default_rng(0)).items()}
        h = np.array([[0.4, -1.0, 2.0]])
        out = gru_cell(np.ones((1, 2)), h, zero).data
        np.testing.assert_allclose(out[0], gru_zero_params(h[0]), rtol=1e-15)

    def test_fixed_point(self):
        p = {k: np.zeros_like(v) for k, v in init_gru(1, 2, np.random.default_rng(0)).items()}
        h = np.zeros((1, 2))
        np.testing.assert_array_equal(gru_cell(np.zeros((1, 1)), h, p).data, h)

    def test_gradient(self):
        rng = np.random.default_rng(2)
        p = init_gru(2, 3, rng)
        keys = list(p)
        x, h = rng.normal(size=(4, 2)), rng.normal(size=(4, 3))
        w = rng.normal(size=(4, 3))

        def f(x, h, *vals):
            return tn.sum_(gru_cell(x, h, dict(zip(keys, vals))) * w)

        assert tn.grad_check(f, [x, h] + [p[k] for k in keys]) < 1e-5


class TestRecurrent:
    def _model(self, variant, N=3, D=2, seed=0):
        return RecurrentModel(RnnVariantConfig(variant, hidden=5, h_e=3), N, D, seed=seed)

    def test_filler_keeps_observed(self):
        x = np.array([[1.0, 2.0]])
        np.testing.assert_array_equal(filler(x, np.ones((1, 2)), np.array([[9.0, 9.0]])).data, x)

    def test_filler_fills_missing(self):
        out = filler(np.array([[1.0, 2.0]]), np.array([[1.0, 0.0]]), np.array([[9.0, 9.0]])).data
        assert out.tolist() == [[1.0, 9.0]]

    @pytest.mark.parametrize("variant,future_matters", [("plain", False), ("bidirectional", True),
                                                        ("embedded", True), ("graph", True)])
    def test_causality(self, variant, future_matters):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1, 3, 10, 2))
        m = np.ones(x.shape)
        model = self._model(variant)
        base = model.forward(x, m).data
        x2 = x.copy()
        x2[:, :, 6] += 1.0
        out = model.forward(x2, m).data
        # the plain readout at step t only sees steps before t
        np.testing.assert_array_equal(out[:, :, :7], base[:, :, :7]) if not future_matters else None
        assert np.any(out[:, :, :6] != base[:, :, :6]) == future_matters

    def test_head_counts(self):
        assert self._model("plain").n_heads == 1 and self._model("graph").n_heads == 3
        assert self._model("plain").loss_kind == "mae"

    def test_graph_with_identity_and_zero_theta_matches_embedded(self):
        g = self._model("graph", seed=4)
        e = self._model("embedded", seed=9)
        H = 5
        params = {}
        for k, t in e.params.items():
            src = g.params[k].data
            if k == "mlp.w1":
                src = np.concatenate([src[:2 * H], src[4 * H:]])
            params[k] = tn.Tensor(src.copy())
        for k in ("gc.theta", "gc.theta_skip", "gc.bias"):
            g.params[k].data = np.zeros_like(g.params[k].data)
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 3, 7, 2))
        m = (rng.uniform(size=x.shape) > 0.3).astype(float)
        a = g.forward(x, m, adjacency=np.eye(3)).data
        b = e.forward(x, m, params=params).data
        np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-14)

    @settings(max_examples=10, deadline=None)
    @given(st.sampled_from(["plain", "bidirectional", "embedded", "graph"]), st.integers(0, 1000))
    def test_mask_invariance(self, variant, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(1, 3, 6, 2))
        m = (rng.uniform(size=x.shape) > 0.4).astype(float)
        model = self._model(variant)
        a = model.forward(x, m).data
        b = model.forward(np.where(m > 0, x, 1e3), m).data
        np.testing.assert_array_equal(a, b)

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            RnnVariantConfig("lstm")
