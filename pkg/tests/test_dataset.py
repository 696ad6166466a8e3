import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ggnet.dataset import (TEST, TRAIN, UNAVAILABLE, VAL, SpatioTemporalDataset, cut_windows,
                           input_mask, partition_sets, sample_whitening_mask, split_channels,
                           standardize, stitch_windows, window_batches)
from ggnet.exceptions import ConfigError, ShapeError, SplitError

from oracles import partition_sets_bruteforce, population_stats


def _ds(values, mask=None):
    values = np.asarray(values, dtype=float)
    return SpatioTemporalDataset(values, np.ones(values.shape) if mask is None else mask)


class TestDatasetType:
    def test_masked_values_are_zeroed(self):
        ds = _ds([[[1.0], [2.0]]], np.array([[[1], [0]]]))
        assert ds.values[0, 1, 0] == 0.0

    def test_rejects_non_binary_mask(self):
        with pytest.raises(ShapeError):
            _ds(np.zeros((1, 2, 1)), np.full((1, 2, 1), 2))

    def test_rejects_bad_latitude(self):
        with pytest.raises(ShapeError):
            SpatioTemporalDataset(np.zeros((1, 2, 1)), np.ones((1, 2, 1)), coords=[[91.0, 0.0]])

    def test_default_metadata(self):
        ds = _ds(np.zeros((2, 3, 2)))
        assert ds.channel_names == ("ch0", "ch1") and len(ds.timestamps) == 3


class TestStandardize:
    def test_population_statistics(self):
        ds = _ds(np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1))
        out, stats = standardize(ds)
        mu, sd = population_stats([1.0, 2.0, 3.0])
        assert stats.mean[0] == pytest.approx(mu)
        assert stats.std[0] == pytest.approx(sd)
        np.testing.assert_allclose(out.values.ravel(), [-1.224744871391589, 0, 1.224744871391589])

    def test_constant_channel_std_clamped(self):
        out, stats = standardize(_ds(np.full((1, 3, 1), 5.0)))
        assert stats.std[0] == 1.0
        np.testing.assert_array_equal(out.values.ravel(), [0, 0, 0])

    def test_masked_entry_excluded(self):
        ds = _ds(np.array([1.0, 2.0, 100.0]).reshape(1, 3, 1), np.array([1, 1, 0]).reshape(1, 3, 1))
        _, stats = standardize(ds)
        mu, sd = population_stats([1.0, 2.0])
        assert stats.mean[0] == pytest.approx(mu) and stats.std[0] == pytest.approx(sd)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_inverse_recovers_observed(self, seed):
        rng = np.random.default_rng(seed)
        vals = rng.normal(3, 10, size=(3, 5, 2))
        mask = (rng.uniform(size=vals.shape) > 0.3).astype(np.uint8)
        mask[0, 0, :] = 1
        ds = _ds(vals, mask)
        out, stats = standardize(ds)
        back = stats.inverse(out.values)
        np.testing.assert_allclose(back[mask == 1], vals[mask == 1], atol=1e-10)


class TestSplit:
    def test_fractions_on_100_channels(self):
        split = split_channels(_ds(np.zeros((10, 2, 10))), (0.7, 0.1, 0.2), seed=0)
        assert split.counts() == {"train": 70, "val": 10, "test": 20}

    def test_deterministic(self):
        ds = _ds(np.zeros((5, 2, 4)))
        assert split_channels(ds, seed=3) == split_channels(ds, seed=3)

    def test_partition_of_available_pairs(self):
        mask = np.ones((6, 3, 4), dtype=np.uint8)
        mask[2, :, 1] = 0
        split = split_channels(_ds(np.zeros(mask.shape), mask), seed=1)
        a = split.assignment
        assert a[2, 1] == UNAVAILABLE
        labelled = np.isin(a, [TRAIN, VAL, TEST])
        np.testing.assert_array_equal(labelled, mask.any(axis=1))
        assert (split.train & split.val).sum() == 0 and (split.val & split.test).sum() == 0

    def test_too_few_channels(self):
        with pytest.raises(SplitError):
            split_channels(_ds(np.zeros((1, 2, 2))))

    def test_bad_fractions(self):
        with pytest.raises(ConfigError):
            split_channels(_ds(np.zeros((3, 2, 3))), (0.5, 0.5, 0.5))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 1000), st.floats(-100, 100))
    def test_independent_of_values(self, seed, fill):
        rng = np.random.default_rng(seed)
        mask = (rng.uniform(size=(4, 3, 3)) > 0.2).astype(np.uint8)
        mask[:, 0, :] = 1
        a = split_channels(_ds(np.zeros(mask.shape), mask), seed=seed)
        b = split_channels(_ds(np.full(mask.shape, fill), mask), seed=seed)
        assert a == b


class TestWhitening:
    def _setup(self, N=4, T=6, D=3):
        ds = _ds(np.zeros((N, T, D)))
        return ds.mask, split_channels(ds, seed=0)

    def test_zero_probabilities_keep_availability(self):
        avail, split = self._setup()
        wm = sample_whitening_mask(avail, split, 0.0, 0.0, seed=1)
        np.testing.assert_array_equal(wm.combined, avail)

    def test_full_channel_drop(self):
        avail, split = self._setup()
        wm = sample_whitening_mask(avail, split, 1.0, 0.0, seed=1)
        assert not wm.combined[np.broadcast_to(split.train[:, None, :], avail.shape)].any()
        assert wm.combined[np.broadcast_to(~split.train[:, None, :], avail.shape)].all()

    def test_drop_rate(self):
        # 10,000 independent draws of one eligible channel
        avail = np.ones((1, 1, 1), dtype=np.uint8)
        split = type(split_channels(_ds(np.zeros((3, 1, 1))), seed=0))(np.zeros((1, 1), np.int8))
        rng = np.random.default_rng(0)
        drops = [sample_whitening_mask(avail, split, 0.3, 0.0, rng=rng).channel_mask[0, 0] == 0
                 for _ in range(10_000)]
        assert abs(np.mean(drops) - 0.30) <= 0.01

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0, 1), st.floats(0, 1))
    def test_combined_below_availability(self, seed, pc, pp):
        rng = np.random.default_rng(seed)
        avail = (rng.uniform(size=(3, 5, 3)) > 0.3).astype(np.uint8)
        avail[:, 0, :] = 1
        split = split_channels(avail, seed=seed)
        wm = sample_whitening_mask(avail, split, pc, pp, seed=seed)
        assert np.all(wm.combined <= avail)

    def test_rejects_probability(self):
        avail, split = self._setup()
        with pytest.raises(ConfigError):
            sample_whitening_mask(avail, split, 1.5, 0.0)


class TestWindows:
    def test_exact_tiling(self):
        ds = _ds(np.arange(48.0).reshape(1, 48, 1))
        wins = list(window_batches(ds, t_w=24, batch_size=8, shuffle=False))
        assert len(wins) == 1
        np.testing.assert_array_equal(wins[0].offsets, [0, 24])
        assert wins[0].values[1, 0, 0, 0] == 24.0

    def test_padding(self):
        v, m, offs = cut_windows(np.ones((1, 50, 1)), np.ones((1, 50, 1)), 24)
        assert v.shape[0] == 3
        assert m[2, 0, :2, 0].tolist() == [1, 1] and m[2, 0, 2:, 0].sum() == 0

    def test_ascending_without_shuffle(self):
        ds = _ds(np.zeros((1, 100, 1)))
        offsets = np.concatenate([w.offsets for w in window_batches(ds, 10, 3, shuffle=False)])
        assert offsets.tolist() == sorted(offsets.tolist())

    def test_stitch_inverts_cut(self):
        x = np.random.default_rng(0).normal(size=(2, 29, 3))
        v, _, _ = cut_windows(x, np.ones(x.shape), 8)
        np.testing.assert_array_equal(stitch_windows(v, 29), x)

    def test_window_longer_than_series(self):
        with pytest.raises(ConfigError):
            list(window_batches(_ds(np.zeros((1, 5, 1))), t_w=10))


class TestPartitionSets:
    def test_nothing_missing(self):
        target, *_ = partition_sets(0, 0, np.ones((2, 2), bool))
        assert target == []

    def test_two_by_two_example(self):
        avail = np.array([[0, 1], [1, 1]], bool)
        target, obs, intra, inter = partition_sets(0, 0, avail)
        assert target == [(0, 0)]
        assert obs == [(1, 0)] and intra == [(0, 1)] and inter == [(1, 1)]

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
    def test_matches_bruteforce(self, N, D, seed):
        rng = np.random.default_rng(seed)
        avail = rng.uniform(size=(N, D)) > 0.4
        n, d = int(rng.integers(N)), int(rng.integers(D))
        got = partition_sets(n, d, avail)
        assert [sorted(s) for s in got] == [sorted(s) for s in
                                             partition_sets_bruteforce(n, d, avail.tolist())]
        # disjoint, and together cover every observed or queried pair
        flat = [p for s in got for p in s]
        assert len(flat) == len(set(flat))
        observed = {(v, c) for v in range(N) for c in range(D) if avail[v, c]}
        assert set(flat) | {(n, d)} == observed | {(n, d)}


def test_input_mask_hides_val_and_test():
    ds = _ds(np.zeros((5, 2, 4)))
    split = split_channels(ds, seed=0)
    m = input_mask(ds.mask, split)
    assert not m[np.broadcast_to(~split.train[:, None, :], m.shape)].any()
    assert math.isclose(m.mean(), split.train.mean())
