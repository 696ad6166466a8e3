"""Spatio-temporal data model, standardization, channel splits and masking."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from .exceptions import ConfigError, ShapeError, SplitError, UnstandardizableChannelError

TRAIN, VAL, TEST, UNAVAILABLE = 0, 1, 2, -1
LABEL_NAMES = {TRAIN: "train", VAL: "val", TEST: "test", UNAVAILABLE: "unavailable"}
_STD_FLOOR = 1e-8


@dataclass(frozen=True, eq=False)
class SpatioTemporalDataset:
    """Values ``(N, T, D)`` with a binary availability mask (1 = observed).

    Values under ``mask == 0`` are meaningless and are stored as zero.
    """

    values: np.ndarray
    mask: np.ndarray
    channel_names: tuple = ()
    timestamps: tuple = ()
    location_ids: tuple = ()
    coords: np.ndarray | None = None
    resolution: str = "daily"
    units: tuple = ()

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        mask = np.asarray(self.mask)
        if values.ndim != 3:
            raise ShapeError(f"values must be N x T x D, got shape {values.shape}")
        if mask.shape != values.shape:
            raise ShapeError(f"mask shape {mask.shape} != values shape {values.shape}")
        if not np.isin(mask, (0, 1)).all():
            raise ShapeError("mask entries must be 0 or 1")
        mask = mask.astype(np.uint8)
        values = np.where(mask == 1, values, 0.0)
        N, T, D = values.shape
        names = tuple(self.channel_names) or tuple(f"ch{d}" for d in range(D))
        stamps = tuple(self.timestamps) or tuple(str(t) for t in range(T))
        ids = tuple(self.location_ids) or tuple(f"loc{n}" for n in range(N))
        units = tuple(self.units) or ("",) * D
        if (len(names), len(stamps), len(ids), len(units)) != (D, T, N, D):
            raise ShapeError("metadata lengths do not match the value tensor")
        coords = self.coords
        if coords is not None:
            coords = np.asarray(coords, dtype=np.float64).reshape(N, 2)
            if np.any(np.abs(coords[:, 0]) > 90) or np.any(np.abs(coords[:, 1]) > 180):
                raise ShapeError("coordinates must have |lat| <= 90 and |lon| <= 180")
        for name, val in (("values", values), ("mask", mask), ("channel_names", names),
                          ("timestamps", stamps), ("location_ids", ids), ("coords", coords),
                          ("units", units)):
            object.__setattr__(self, name, val)

    @property
    def shape(self):
        return self.values.shape

    @property
    def n_locations(self):
        return self.values.shape[0]

    @property
    def n_steps(self):
        return self.values.shape[1]

    @property
    def n_channels(self):
        return self.values.shape[2]

    def channel_availability(self):
        """``(N, D)`` boolean: channel has at least one observed step."""
        return self.mask.any(axis=1)

    def with_values(self, values, mask=None):
        return replace(self, values=values, mask=self.mask if mask is None else mask)

    def permute_locations(self, order):
        order = np.asarray(order)
        return replace(
            self, values=self.values[order], mask=self.mask[order],
            location_ids=tuple(self.location_ids[i] for i in order),
            coords=None if self.coords is None else self.coords[order])


@dataclass(frozen=True)
class Standardization:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, values):
        return (values - self.mean) / self.std

    def inverse(self, values):
        return values * self.std + self.mean

    def inverse_scale(self, values):
        """Map a deviation (not a level) back to original units."""
        return values * self.std


def fit_standardization(values, mask) -> Standardization:
    m = mask.astype(bool)
    counts = m.sum(axis=(0, 1))
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise UnstandardizableChannelError(f"channels without observations: {empty.tolist()}")
    total = np.where(m, values, 0.0).sum(axis=(0, 1))
    mu = total / counts
    var = (np.where(m, values - mu, 0.0) ** 2).sum(axis=(0, 1)) / counts
    std = np.sqrt(var)
    std = np.where(std < _STD_FLOOR, 1.0, std)
    return Standardization(mean=mu, std=std)


def standardize(ds: SpatioTemporalDataset, stats: Standardization | None = None):
    """Per-channel zero mean / unit population variance over observed entries."""
    if stats is None:
        stats = fit_standardization(ds.values, ds.mask)
    out = np.where(ds.mask == 1, stats.transform(ds.values), 0.0)
    return ds.with_values(out), stats


@dataclass(frozen=True, eq=False)
class ChannelSplit:
    """Per (location, channel) label: TRAIN, VAL, TEST or UNAVAILABLE."""

    assignment: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int8)
        if a.ndim != 2:
            raise ShapeError("assignment must be N x D")
        if not np.isin(a, list(LABEL_NAMES)).all():
            raise ShapeError("unknown split label")
        object.__setattr__(self, "assignment", a)

    def __eq__(self, other):
        return isinstance(other, ChannelSplit) and np.array_equal(self.assignment, other.assignment)

    def channels(self, label):
        return self.assignment == label

    @property
    def train(self):
        return self.assignment == TRAIN

    @property
    def val(self):
        return self.assignment == VAL

    @property
    def test(self):
        return self.assignment == TEST

    def entry_mask(self, label, availability):
        """Broadcast a channel-level label onto an ``(N, T, D)`` availability mask."""
        return (availability.astype(bool) & self.channels(label)[:, None, :])

    def counts(self):
        return {LABEL_NAMES[k]: int((self.assignment == k).sum()) for k in (TRAIN, VAL, TEST)}


def _largest_remainder(total, fractions):
    raw = np.asarray(fractions, dtype=np.float64) * total
    counts = np.floor(raw).astype(int)
    remainder = total - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:remainder]] += 1
    return counts


def split_channels(ds_or_mask, fractions=(0.7, 0.1, 0.2), seed=0) -> ChannelSplit:
    """Uniform random partition of the available (location, channel) pairs."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) <= 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    if isinstance(ds_or_mask, SpatioTemporalDataset):
        available = ds_or_mask.channel_availability()
    else:
        available = np.asarray(ds_or_mask).astype(bool)
        if available.ndim == 3:
            available = available.any(axis=1)
    pairs = np.argwhere(available)
    if len(pairs) < 3:
        raise SplitError(f"need at least 3 available channels, found {len(pairs)}")
    counts = _largest_remainder(len(pairs), fractions)
    perm = np.random.default_rng(seed).permutation(len(pairs))
    labels = np.repeat([TRAIN, VAL, TEST], counts)
    assignment = np.full(available.shape, UNAVAILABLE, dtype=np.int8)
    chosen = pairs[perm]
    assignment[chosen[:, 0], chosen[:, 1]] = labels
    return ChannelSplit(assignment)


@dataclass(frozen=True, eq=False)
class WhiteningMask:
    channel_mask: np.ndarray
    point_mask: np.ndarray
    combined: np.ndarray
    availability: np.ndarray

    @property
    def hidden(self):
        """Entries that were available but dropped for this batch."""
        return self.availability.astype(bool) & (self.combined == 0)


def sample_whitening_mask(availability, split, p_channels=0.3, p_points=0.05, seed=0,
                          rng=None) -> WhiteningMask:
    """Simulated missingness for one window ``(N, T_w, D)`` (or a batch ``(B, N, T_w, D)``).

    Only train-labelled channels are eligible.  Each is dropped for the whole
    window with probability ``p_channels``; surviving observed points are
    then dropped independently with probability ``p_points``.
    """
    for p in (p_channels, p_points):
        if not 0.0 <= p <= 1.0:
            raise ConfigError(f"whitening probabilities must lie in [0, 1], got {p}")
    avail = np.asarray(availability).astype(bool)
    rng = np.random.default_rng(seed) if rng is None else rng
    lead = avail.shape[:-3]
    N, T, D = avail.shape[-3:]
    eligible = np.broadcast_to(split.train, lead + (N, D))
    drop = (rng.random(lead + (N, D)) < p_channels) & eligible
    channel_mask = (~drop).astype(np.uint8)
    point_drop = (rng.random(avail.shape) < p_points) & eligible[..., None, :]
    point_mask = (~point_drop).astype(np.uint8)
    combined = (avail & channel_mask[..., None, :].astype(bool) & point_mask.astype(bool))
    return WhiteningMask(channel_mask, point_mask, combined.astype(np.uint8), avail.astype(np.uint8))


@dataclass(frozen=True)
class Window:
    values: np.ndarray
    mask: np.ndarray
    offsets: np.ndarray


def n_windows(T, t_w):
    return -(-T // t_w)


def cut_windows(values, mask, t_w):
    """Tile ``(N, T, D)`` into ``(W, N, t_w, D)`` non-overlapping windows, zero-padded at the end."""
    if t_w <= 0:
        raise ConfigError(f"window length must be positive, got {t_w}")
    N, T, D = values.shape
    W = n_windows(T, t_w)
    pad = W * t_w - T
    v = np.pad(values, ((0, 0), (0, pad), (0, 0)))
    m = np.pad(mask, ((0, 0), (0, pad), (0, 0)))
    v = v.reshape(N, W, t_w, D).transpose(1, 0, 2, 3)
    m = m.reshape(N, W, t_w, D).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(v), np.ascontiguousarray(m), np.arange(W) * t_w


def stitch_windows(windows, T):
    """Inverse of :func:`cut_windows` for arrays ``(W, N, t_w, D, ...)``."""
    W, N, t_w = windows.shape[:3]
    rest = windows.shape[3:]
    full = np.moveaxis(windows, 0, 1).reshape((N, W * t_w) + rest)
    return full[:, :T]


def window_batches(ds, t_w=24, batch_size=32, seed=0, shuffle=True) -> Iterator[Window]:
    """Yield batches of non-overlapping windows with their time offsets."""
    if batch_size <= 0:
        raise ConfigError(f"batch size must be positive, got {batch_size}")
    if isinstance(ds, SpatioTemporalDataset):
        values, mask = ds.values, ds.mask
    else:
        values, mask = ds
    if t_w > values.shape[1]:
        raise ConfigError(f"window length {t_w} exceeds series length {values.shape[1]}")
    v, m, offsets = cut_windows(values, mask, t_w)
    order = np.arange(len(offsets))
    if shuffle:
        order = np.random.default_rng(seed).permutation(order)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield Window(v[idx], m[idx], offsets[idx])


def partition_sets(n, d, channel_mask):
    """Target, observed-target, intra- and inter-location covariate sets for pair ``(n, d)``.

    ``channel_mask`` is the ``(N, D)`` channel availability.  Each set is a
    sorted list of ``(location, channel)`` tuples.
    """
    m = np.asarray(channel_mask).astype(bool)
    N, D = m.shape
    if not (0 <= n < N and 0 <= d < D):
        raise IndexError(f"pair ({n}, {d}) outside {N} x {D}")
    target = [(n, d)] if not m[n, d] else []
    observed_target = [(v, d) for v in range(N) if v != n and m[v, d]]
    intra = [(n, c) for c in range(D) if c != d and m[n, c]]
    inter = [(v, c) for v in range(N) for c in range(D) if v != n and c != d and m[v, c]]
    return target, observed_target, intra, inter


def input_mask(availability, split, labels: Sequence[int] = (TRAIN,)):
    """Entries visible to a model: available and belonging to the given channel labels."""
    allowed = np.isin(split.assignment, list(labels))
    return (np.asarray(availability).astype(bool) & allowed[:, None, :]).astype(np.uint8)
