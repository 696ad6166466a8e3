"""Input checks shared by the estimators and the command line."""

from __future__ import annotations

import numpy as np

from .dataset import ChannelSplit, SpatioTemporalDataset, split_channels
from .exceptions import ShapeError, SplitError


def check_panel(X, mask=None) -> SpatioTemporalDataset:
    """Coerce ``X`` into a dataset.

    ``X`` may already be a :class:`SpatioTemporalDataset`, or an ``(N, T, D)``
    array in which non-finite entries count as missing.  An explicit ``mask``
    (1 = observed) takes precedence over NaN detection.
    """
    if isinstance(X, SpatioTemporalDataset):
        if mask is None:
            return X
        return X.with_values(X.values, np.asarray(mask).astype(np.uint8))
    values = np.asarray(X, dtype=np.float64)
    if values.ndim != 3:
        raise ShapeError(f"expected an N x T x D array, got shape {values.shape}")
    if mask is None:
        mask = np.isfinite(values)
    else:
        mask = np.asarray(mask).astype(bool)
        if mask.shape != values.shape:
            raise ShapeError(f"mask shape {mask.shape} != data shape {values.shape}")
        mask &= np.isfinite(values)
    return SpatioTemporalDataset(np.where(mask, values, 0.0), mask.astype(np.uint8))


def check_split(split, ds, fractions=(0.7, 0.1, 0.2), seed=0) -> ChannelSplit:
    """Return a split consistent with ``ds``, drawing one when ``split`` is ``None``."""
    if split is None:
        return split_channels(ds, fractions, seed)
    if not isinstance(split, ChannelSplit):
        split = ChannelSplit(np.asarray(split))
    if split.assignment.shape != (ds.n_locations, ds.n_channels):
        raise ShapeError(f"split covers {split.assignment.shape}, data has "
                         f"{(ds.n_locations, ds.n_channels)}")
    if not split.train.any():
        raise SplitError("split has no train channels")
    return split


def check_same_panel(ds, n_locations, n_channels):
    if (ds.n_locations, ds.n_channels) != (n_locations, n_channels):
        raise ShapeError(f"fitted on N={n_locations}, D={n_channels}; "
                         f"got N={ds.n_locations}, D={ds.n_channels}")
