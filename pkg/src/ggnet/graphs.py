"""Learned and geographic adjacency matrices."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from . import tensor as tn
from .exceptions import CalibrationError, ConfigError, GeometryError

EARTH_RADIUS_KM = 6371.0


def init_embedding(n, dim, rng):
    """Uniform in ``[-0.5/sqrt(dim), 0.5/sqrt(dim)]``; keeps the initial softmax near uniform."""
    bound = 0.5 / math.sqrt(dim)
    return rng.uniform(-bound, bound, size=(n, dim))


def init_score_mlp(dim, rng):
    bound = 1.0 / math.sqrt(dim)
    return {
        "w1": rng.uniform(-bound, bound, size=(dim, dim)),
        "b1": np.zeros(dim),
        "w2": rng.uniform(-bound, bound, size=(dim, dim)),
        "b2": np.zeros(dim),
    }


def score_mlp(x, params):
    """One hidden layer with tanh, linear output."""
    h = tn.tanh(x @ params["w1"] + params["b1"])
    return h @ params["w2"] + params["b2"]


def build_inter_adjacency(E_G, mlp1_params, mlp2_params):
    """Row-wise ``softmax(MLP1(E) MLP2(E)^T)`` over locations."""
    src = score_mlp(E_G, mlp1_params)
    dst = score_mlp(E_G, mlp2_params)
    return tn.softmax_rows(src @ tn.transpose(dst))


def build_intra_adjacency(phi):
    """Row-wise softmax of the free ``D x D`` score matrix."""
    return tn.softmax_rows(phi)


def haversine(p, q):
    """Great-circle distance in km between ``(lat, lon)`` points given in degrees.

    Broadcasts over leading axes of ``p`` and ``q``.
    """
    p = np.radians(np.asarray(p, dtype=np.float64))
    q = np.radians(np.asarray(q, dtype=np.float64))
    dlat = q[..., 0] - p[..., 0]
    dlon = q[..., 1] - p[..., 1]
    a = np.sin(dlat / 2) ** 2 + np.cos(p[..., 0]) * np.cos(q[..., 0]) * np.sin(dlon / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def pairwise_distances(coords):
    coords = _check_coords(coords)
    return haversine(coords[:, None, :], coords[None, :, :])


def _check_coords(coords):
    if coords is None:
        raise GeometryError("coordinates are required for geographic graphs")
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise GeometryError(f"coordinates must be N x 2, got {coords.shape}")
    if not np.all(np.isfinite(coords)):
        raise GeometryError("coordinates contain non-finite values")
    return coords


def gaussian_kernel_adjacency(coords, delta, self_loops=False):
    """Thresholded Gaussian kernel ``exp(-d^2 / sigma^2)`` for ``d < delta``.

    ``sigma^2`` is the population variance of the distances between distinct
    location pairs.
    """
    dist = pairwise_distances(coords)
    N = dist.shape[0]
    if N < 2:
        raise GeometryError("at least two locations are needed")
    iu = np.triu_indices(N, 1)
    sigma2 = dist[iu].var()
    if sigma2 <= 0:
        sigma2 = 1.0
    adj = kernel_weights(dist, sigma2, delta)
    if not self_loops:
        np.fill_diagonal(adj, 0.0)
    return adj


def kernel_weights(dist, sigma2, delta):
    """``exp(-dist^2 / sigma2)`` inside the threshold, 0 at or beyond it."""
    dist = np.asarray(dist, dtype=np.float64)
    return np.where(dist < delta, np.exp(-dist ** 2 / sigma2), 0.0)


def calibrate_delta(coords, target_avg_degree=10.0):
    """Smallest threshold whose graph reaches the requested average degree."""
    dist = pairwise_distances(coords)
    N = dist.shape[0]
    if N < 2 or not 0 < target_avg_degree <= N - 1:
        raise CalibrationError(f"average degree {target_avg_degree} unreachable with {N} locations")
    pair_d = np.sort(dist[np.triu_indices(N, 1)])
    candidates = np.nextafter(pair_d, np.inf)

    def degree(delta):
        return 2.0 * np.searchsorted(pair_d, delta, side="left") / N

    lo, hi = 0, len(candidates) - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if degree(candidates[mid]) >= target_avg_degree - 1e-12:
            hi = mid
        else:
            lo = mid + 1
    return float(candidates[lo])


def average_degree(coords, delta):
    dist = pairwise_distances(coords)
    N = dist.shape[0]
    return float(((dist < delta).sum() - N) / N)


def knn_neighbors(coords, k):
    """``(N, k)`` indices of the nearest other locations; ties go to the lower index."""
    dist = pairwise_distances(coords)
    N = dist.shape[0]
    if not 0 < k < N:
        raise ConfigError(f"k must satisfy 0 < k < N={N}, got {k}")
    np.fill_diagonal(dist, np.inf)
    return np.argsort(dist, axis=1, kind="stable")[:, :k]


def export_graphs(out_dir, A_G, A_g, E_G, location_ids, channel_names):
    """Write the learned graphs and location embeddings as labelled CSV tables.

    Any of ``A_G``, ``A_g`` or ``E_G`` may be ``None`` (model without that
    component); the corresponding file is skipped.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def write(name, header, labels, table):
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows([lab, *(repr(float(v)) for v in row)]
                        for lab, row in zip(labels, np.asarray(table)))
        written.append(out / name)

    if A_G is not None:
        write("A_G.csv", ["location_id", *location_ids], location_ids, A_G)
    if A_g is not None:
        write("A_g.csv", ["channel", *channel_names], channel_names, A_g)
    if E_G is not None:
        E = np.asarray(E_G)
        write("E_G.csv", ["location_id", *[f"e{i}" for i in range(E.shape[1])]], location_ids, E)
    return written
