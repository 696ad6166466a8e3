"""Synthetic spatio-temporal benchmarks with known cross-channel and cross-location structure.

Each location belongs to a cluster.  Cluster latents are sums of sinusoids
with random phase plus an AR(1) process; a location adds a constant offset
and, optionally, its own AR(1) deviation.  Channels mix the location latent
through ``W`` and may additionally carry a cluster-level signal that no other
channel sees (a target that can only be recovered from other locations).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import date, timedelta

import numpy as np

from .dataset import SpatioTemporalDataset
from .exceptions import ConfigError, OracleUnavailableError


@dataclass
class SyntheticSpec:
    N: int = 20
    T: int = 512
    D: int = 4
    latent_dim: int = 2
    periods: tuple = (24.0, 96.0)
    n_clusters: int = 3
    noise_std: float = 0.05
    ar_coef: float = 0.9
    ar_weight: float = 0.5
    location_offset_std: float = 0.1
    location_dynamic_std: float = 0.0
    W: np.ndarray | None = None
    clusters: np.ndarray | None = None
    cluster_channel_weight: np.ndarray | float = 0.0
    channel_offsets: np.ndarray | None = None
    twins: tuple = ()
    seed: int = 0

    def __post_init__(self):
        for name in ("N", "T", "D", "latent_dim", "n_clusters"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.noise_std < 0 or self.location_offset_std < 0 or self.location_dynamic_std < 0:
            raise ConfigError("standard deviations must be non-negative")
        if not -1.0 < self.ar_coef < 1.0:
            raise ConfigError("ar_coef must lie in (-1, 1)")
        if self.W is not None:
            self.W = np.asarray(self.W, dtype=np.float64)
            if self.W.shape != (self.D, self.latent_dim):
                raise ConfigError(f"W must be {self.D} x {self.latent_dim}, got {self.W.shape}")
        if self.clusters is not None:
            self.clusters = np.asarray(self.clusters, dtype=int)
            if self.clusters.shape != (self.N,) or self.clusters.min() < 0:
                raise ConfigError("clusters must hold one non-negative label per location")
            self.n_clusters = max(self.n_clusters, int(self.clusters.max()) + 1)
        w = np.broadcast_to(np.asarray(self.cluster_channel_weight, dtype=np.float64), (self.D,))
        self.cluster_channel_weight = w.copy()
        self.twins = tuple((int(a), int(b)) for a, b in self.twins)


@dataclass
class SyntheticTruth:
    """Generating factors kept next to the dataset for oracle comparisons."""

    W: np.ndarray
    clusters: np.ndarray
    latents: np.ndarray
    cluster_signal: np.ndarray
    channel_offsets: np.ndarray
    cluster_channel_weight: np.ndarray
    noise_std: float
    clean: np.ndarray = field(repr=False)


def _ar1(rng, shape, coef):
    """Unit-variance stationary AR(1) along axis 0."""
    innov = rng.normal(size=shape) * np.sqrt(1.0 - coef ** 2)
    out = np.empty(shape)
    out[0] = rng.normal(size=shape[1:])
    for t in range(1, shape[0]):
        out[t] = coef * out[t - 1] + innov[t]
    return out


def _smooth_signals(rng, T, k, periods, ar_coef, ar_weight):
    """``(T, k)`` sums of random-phase sinusoids plus a scaled AR(1) process."""
    t = np.arange(T)[:, None]
    out = np.zeros((T, k))
    for p in periods:
        phase = rng.uniform(0, 2 * np.pi, size=k)
        amp = rng.uniform(0.5, 1.0, size=k)
        out += amp * np.sin(2 * np.pi * t / p + phase)
    return out + ar_weight * _ar1(rng, (T, k), ar_coef)


def generate(spec: SyntheticSpec):
    """Build the dataset and its :class:`SyntheticTruth`; deterministic per ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    N, T, D, L = spec.N, spec.T, spec.D, spec.latent_dim
    W = spec.W if spec.W is not None else rng.normal(size=(D, L)) / np.sqrt(L)
    clusters = spec.clusters if spec.clusters is not None else np.arange(N) % spec.n_clusters
    C = spec.n_clusters
    cluster_lat = np.stack([_smooth_signals(rng, T, L, spec.periods, spec.ar_coef, spec.ar_weight)
                            for _ in range(C)])
    cluster_sig = np.stack([_smooth_signals(rng, T, D, spec.periods, spec.ar_coef, spec.ar_weight)
                            for _ in range(C)])
    offsets = rng.normal(scale=spec.location_offset_std, size=(N, L))
    dynamic = spec.location_dynamic_std * np.stack([_ar1(rng, (T, L), spec.ar_coef) for _ in range(N)])
    for src, dst in spec.twins:
        offsets[dst] = offsets[src]
        dynamic[dst] = dynamic[src]
    latents = cluster_lat[clusters] + offsets[:, None, :] + dynamic
    ch_off = (np.zeros(D) if spec.channel_offsets is None
              else np.asarray(spec.channel_offsets, dtype=np.float64))
    clean = latents @ W.T + spec.cluster_channel_weight * cluster_sig[clusters] + ch_off
    noise = rng.normal(scale=spec.noise_std, size=clean.shape) if spec.noise_std > 0 else 0.0
    values = clean + noise
    centers = np.column_stack([rng.uniform(-50, 50, C), rng.uniform(-150, 150, C)])
    coords = centers[clusters] + rng.normal(scale=2.0, size=(N, 2))
    for src, dst in spec.twins:
        coords[dst] = coords[src]
    start = date(2000, 1, 1)
    ds = SpatioTemporalDataset(
        values=values, mask=np.ones(values.shape, dtype=np.uint8),
        channel_names=tuple(f"ch{d}" for d in range(D)),
        timestamps=tuple((start + timedelta(days=t)).isoformat() for t in range(T)),
        location_ids=tuple(f"loc{n:03d}" for n in range(N)),
        coords=coords)
    truth = SyntheticTruth(W, clusters, latents, cluster_sig, ch_off,
                           spec.cluster_channel_weight.copy(), spec.noise_std, clean)
    return ds, truth


def oracle_linear_reconstruction(ds, truth: SyntheticTruth, target, covariates=None):
    """Least-squares estimate of channel ``d`` at location ``n`` from other channels there.

    The latent state is recovered from the covariates through ``W`` and mapped
    back with ``W[d]``.  ``covariates`` defaults to every other channel of
    ``n`` with at least one observation.  Returns ``(series, mae)`` with the
    MAE against the stored values on observed steps.  Raises
    :class:`OracleUnavailableError` when ``W[d]`` is not determined by the
    covariate rows.
    """
    n, d = target
    if covariates is None:
        avail = ds.mask[n].any(axis=0)
        covariates = [c for c in range(ds.n_channels) if c != d and avail[c]]
    covariates = list(covariates)
    if not covariates:
        raise OracleUnavailableError(f"no covariates at location {n}")
    W_c = truth.W[covariates]
    w_d = truth.W[d]
    coef, *_ = np.linalg.lstsq(W_c.T, w_d, rcond=None)
    if not np.allclose(W_c.T @ coef, w_d, atol=1e-9):
        raise OracleUnavailableError(
            f"channel {d} is not a linear function of covariates {covariates} through W")
    if truth.cluster_channel_weight[d] != 0:
        raise OracleUnavailableError(f"channel {d} carries a cluster signal outside W")
    x_c = ds.values[n][:, covariates] - truth.channel_offsets[covariates]
    series = x_c @ coef + truth.channel_offsets[d]
    observed = ds.mask[n, :, d].astype(bool)
    err = float(np.abs(series - ds.values[n, :, d])[observed].mean()) if observed.any() else np.nan
    return series, err
