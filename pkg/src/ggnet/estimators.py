"""scikit-learn style estimators over spatio-temporal panels.

All estimators take ``X`` as a :class:`~ggnet.dataset.SpatioTemporalDataset`
or an ``(N, T, D)`` array with NaN marking missing values.  ``fit`` splits
the available (location, channel) pairs into train/validation/test unless a
split is given, standardizes internally and learns from train channels only.
``predict`` returns a :class:`~ggnet.metrics.PredictionSet` in original
units; ``transform`` returns ``X`` with missing entries filled in.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import baselines, graphs
from ._validation import check_panel, check_same_panel, check_split
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import (TEST, TRAIN, ChannelSplit, SpatioTemporalDataset, Standardization,
                      input_mask, standardize)
from .exceptions import DataError, FormatError, GeometryError
from .metrics import PredictionSet, evaluate, mre
from .model import GgNet, GgNetConfig
from .training import TrainConfig, predict_series, train


class _PanelImputer(TransformerMixin, BaseEstimator):
    """Shared fit/predict/transform plumbing; subclasses supply the model."""

    def fit(self, X, y=None, split=None, mask=None):
        ds = check_panel(X, mask)
        self.split_ = check_split(split, ds, self.split_fractions, self.random_state)
        self.n_locations_, self.n_channels_ = ds.n_locations, ds.n_channels
        self.dataset_ = ds
        self.standardized_, self.stats_ = standardize(ds)
        self._fit(self.standardized_, self.split_)
        return self

    def _panel(self, X, mask=None):
        fitted = getattr(self, "dataset_", None)
        if X is None:
            if fitted is None:
                raise DataError("no data attached; pass X")
            return fitted
        ds = check_panel(X, mask)
        check_same_panel(ds, self.n_locations_, self.n_channels_)
        if isinstance(X, SpatioTemporalDataset) or fitted is None:
            return ds
        # bare arrays inherit names and coordinates from the fitted panel
        stamps = self.dataset_.timestamps if ds.n_steps == self.dataset_.n_steps else ()
        return replace(self.dataset_, values=ds.values, mask=ds.mask, timestamps=stamps)

    def predict(self, X=None, mask=None, visible="train"):
        """Predictions for every entry.

        ``visible`` chooses what the model sees: ``"train"`` shows only
        train-labelled channels (the evaluation protocol), ``"observed"``
        shows every observed entry.
        """
        check_is_fitted(self, "split_")
        ds = self._panel(X, mask)
        std, _ = standardize(ds, self.stats_)
        if visible == "train":
            shown = input_mask(ds.mask, self.split_, (TRAIN,))
        elif visible == "observed":
            shown = ds.mask
        else:
            raise ValueError(f"visible must be 'train' or 'observed', got {visible!r}")
        q, valid = self._predict_quantiles(std, shown)
        q = self.stats_.inverse(np.moveaxis(q, -1, 0))
        return PredictionSet.from_quantiles(np.moveaxis(q, 0, -1), valid, self._quantiles())

    def transform(self, X=None, mask=None):
        """Copy of the values with missing entries replaced by median predictions."""
        ds = self._panel(X, mask)
        pred = self.predict(ds, visible="observed")
        observed = ds.mask.astype(bool)
        return np.where(observed, ds.values, np.where(pred.valid, pred.point, np.nan))

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y, **fit_params).transform(self.dataset_)

    def score(self, X=None, y=None, label=TEST):
        """Negative MRE on channels with ``label`` (test by default); higher is better."""
        check_is_fitted(self, "split_")
        ds = self._panel(X)
        pred = self.predict(ds)
        target = self.split_.entry_mask(label, ds.mask) & pred.valid
        return -mre(pred.point, ds.values, target)

    def report(self, X=None, label=TEST):
        """Per-cell metrics on channels with ``label``."""
        ds = self._panel(X)
        pred = self.predict(ds)
        return evaluate(pred, ds.values, self.split_.entry_mask(label, ds.mask),
                        ds.channel_names, ds.location_ids)

    def _quantiles(self):
        return (0.5,)

    def save(self, path):
        """Write a checkpoint holding parameters, constructor arguments and fitted state."""
        check_is_fitted(self, "split_")
        extras = {"estimator": type(self).__name__, "split": self.split_.assignment.tolist(),
                  "mean": self.stats_.mean.tolist(), "std": self.stats_.std.tolist()}
        extras.update(self._state())
        return save_checkpoint(path, self._params(), self.get_params(), extras)

    def _params(self):
        return {}

    def _state(self):
        return {}


def load_imputer(path, X=None, mask=None):
    """Rebuild a fitted estimator from :meth:`_PanelImputer.save`; ``X`` attaches data."""
    params, config, extras = load_checkpoint(path)
    try:
        cls = _ESTIMATORS[extras["estimator"]]
        # JSON has no tuples; constructor arguments were tuples or scalars
        est = cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in config.items()})
        est.split_ = ChannelSplit(np.asarray(extras["split"], dtype=np.int8))
        est.stats_ = Standardization(np.asarray(extras["mean"]), np.asarray(extras["std"]))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: incomplete estimator checkpoint ({exc})") from None
    est.n_locations_, est.n_channels_ = est.split_.assignment.shape
    est._restore(params, extras)
    if X is not None:
        ds = check_panel(X, mask)
        check_same_panel(ds, est.n_locations_, est.n_channels_)
        est.dataset_ = ds
    return est


_TRAIN_KEYS = ("lr", "max_epochs", "patience", "batch_size", "t_w", "p_whiten_channels",
               "p_whiten_points", "w_whiten", "quantiles")


class _NeuralImputer(_PanelImputer):
    def _train_config(self):
        kw = {k: getattr(self, k) for k in _TRAIN_KEYS}
        return TrainConfig(**kw, seed=self.random_state)

    def _fit(self, std, split):
        self.model_ = self._build(std.n_locations, std.n_channels)
        self.params_, self.history_ = train(self.model_, std, split, self._train_config(),
                                            stats=self.stats_)

    def _predict_quantiles(self, std, shown):
        q = predict_series(self.model_, std.values, shown, self.t_w)
        return q, np.ones(std.shape, dtype=bool)

    def _quantiles(self):
        return self.model_.quantiles

    def _params(self):
        return self.model_.params

    def _restore(self, params, extras):
        self.model_ = self._build(self.n_locations_, self.n_channels_)
        missing = set(self.model_.params) ^ set(params)
        if missing:
            raise FormatError(f"checkpoint parameters do not match the model: {sorted(missing)}")
        self.model_.params = params


class GgNetImputer(_NeuralImputer):
    """Nested-graph network imputer."""

    def __init__(self, hidden=128, h_e_G=16, h_e_g=8, block_pattern="2(3T-G-g)", kernel_k=3,
                 dilations=(1, 2, 4), activation="elu", residual=True, channel_embeddings=True,
                 lr=0.001, max_epochs=500, patience=30, batch_size=32, t_w=24,
                 p_whiten_channels=0.3, p_whiten_points=0.05, w_whiten=5.0,
                 quantiles=(0.159, 0.5, 0.841), split_fractions=(0.7, 0.1, 0.2), random_state=0):
        self.hidden = hidden
        self.h_e_G = h_e_G
        self.h_e_g = h_e_g
        self.block_pattern = block_pattern
        self.kernel_k = kernel_k
        self.dilations = dilations
        self.activation = activation
        self.residual = residual
        self.channel_embeddings = channel_embeddings
        self.lr = lr
        self.max_epochs = max_epochs
        self.patience = patience
        self.batch_size = batch_size
        self.t_w = t_w
        self.p_whiten_channels = p_whiten_channels
        self.p_whiten_points = p_whiten_points
        self.w_whiten = w_whiten
        self.quantiles = quantiles
        self.split_fractions = split_fractions
        self.random_state = random_state

    def model_config(self):
        return GgNetConfig(hidden=self.hidden, h_e_G=self.h_e_G, h_e_g=self.h_e_g,
                           block_pattern=self.block_pattern, kernel_k=self.kernel_k,
                           dilations=tuple(self.dilations), activation=self.activation,
                           quantiles=tuple(self.quantiles), residual=self.residual,
                           channel_embeddings=self.channel_embeddings)

    def _build(self, N, D):
        return GgNet(self.model_config(), N, D, seed=self.random_state)

    @property
    def embeddings_(self):
        check_is_fitted(self, "model_")
        return self.model_.embeddings()

    def adjacencies(self):
        """Learned ``(A_G, A_g)`` as arrays (``None`` for absent blocks)."""
        check_is_fitted(self, "model_")
        return tuple(None if a is None else a.data.copy() for a in self.model_.adjacencies())


class RecurrentImputer(_NeuralImputer):
    """GRU baselines: ``plain``, ``bidirectional``, ``embedded`` or ``graph``."""

    def __init__(self, variant="plain", hidden=64, h_e=16, lr=0.001, max_epochs=500,
                 patience=30, batch_size=32, t_w=24, p_whiten_channels=0.3, p_whiten_points=0.05,
                 w_whiten=5.0, quantiles=(0.159, 0.5, 0.841), split_fractions=(0.7, 0.1, 0.2),
                 random_state=0):
        self.variant = variant
        self.hidden = hidden
        self.h_e = h_e
        self.lr = lr
        self.max_epochs = max_epochs
        self.patience = patience
        self.batch_size = batch_size
        self.t_w = t_w
        self.p_whiten_channels = p_whiten_channels
        self.p_whiten_points = p_whiten_points
        self.w_whiten = w_whiten
        self.quantiles = quantiles
        self.split_fractions = split_fractions
        self.random_state = random_state

    def model_config(self):
        return baselines.RnnVariantConfig(self.variant, self.hidden, self.h_e, tuple(self.quantiles))

    def _build(self, N, D):
        return baselines.RecurrentModel(self.model_config(), N, D, seed=self.random_state)

    def _train_config(self):
        cfg = super()._train_config()
        cfg.quantiles = self.model_.quantiles
        return cfg


class GeoKNNImputer(_PanelImputer):
    """Average of the nearest locations' train channels; ``k=None`` picks it on validation MRE."""

    def __init__(self, k=None, candidates=baselines.KNN_CANDIDATES,
                 split_fractions=(0.7, 0.1, 0.2), random_state=0):
        self.k = k
        self.candidates = candidates
        self.split_fractions = split_fractions
        self.random_state = random_state

    def _fit(self, std, split):
        if self.k is None:
            self.k_, self.validation_scores_ = baselines.select_knn_k(std, split, self.candidates,
                                                                       self.stats_)
        else:
            self.k_, self.validation_scores_ = self.k, {}

    def _state(self):
        return {"k": int(self.k_),
                "validation_scores": {str(k): v for k, v in self.validation_scores_.items()}}

    def _restore(self, params, extras):
        self.k_ = int(extras["k"])
        self.validation_scores_ = {int(k): v for k, v in extras["validation_scores"].items()}

    def _predict_quantiles(self, std, shown):
        point, valid = knn_fill(std.values, shown, std.coords, self.k_)
        return point[..., None], valid


def knn_fill(values, shown, coords, k):
    """Per-step mean of the ``k`` nearest locations that show channel ``d``.

    Donors are locations with at least one shown entry on that channel.
    Shown entries keep their own value.  Returns ``(point, valid)``.
    """
    if coords is None:
        raise GeometryError("KNN imputation needs location coordinates")
    shown = np.asarray(shown).astype(bool)
    N, T, D = values.shape
    dist = graphs.pairwise_distances(coords)
    np.fill_diagonal(dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")
    donor = shown.any(axis=1)
    point = np.where(shown, values, 0.0)
    valid = shown.copy()
    for n in range(N):
        for d in range(D):
            near = [v for v in order[n] if v != n and donor[v, d]][:k]
            if not near:
                continue
            seen = shown[near, :, d]
            counts = seen.sum(axis=0)
            total = np.where(seen, values[near, :, d], 0.0).sum(axis=0)
            fill = (counts > 0) & ~shown[n, :, d]
            point[n, fill, d] = total[fill] / counts[fill]
            valid[n, fill, d] = True
    return point, valid


class MeanImputer(_PanelImputer):
    """Per-channel mean of the train-labelled observations."""

    def __init__(self, split_fractions=(0.7, 0.1, 0.2), random_state=0):
        self.split_fractions = split_fractions
        self.random_state = random_state

    def _fit(self, std, split):
        train = split.entry_mask(TRAIN, std.mask)
        counts = train.sum(axis=(0, 1))
        sums = np.where(train, std.values, 0.0).sum(axis=(0, 1))
        self._std_means = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
        self._has_mean = counts > 0
        self.means_ = self.stats_.inverse(self._std_means)

    def _state(self):
        return {"means": self._std_means.tolist(), "has_mean": self._has_mean.tolist()}

    def _restore(self, params, extras):
        self._std_means = np.asarray(extras["means"], dtype=np.float64)
        self._has_mean = np.asarray(extras["has_mean"], dtype=bool)
        self.means_ = self.stats_.inverse(self._std_means)

    def _predict_quantiles(self, std, shown):
        point = np.broadcast_to(self._std_means, std.shape).copy()
        return point[..., None], np.broadcast_to(self._has_mean, std.shape).copy()


_ESTIMATORS = {c.__name__: c for c in (GgNetImputer, RecurrentImputer, GeoKNNImputer, MeanImputer)}
