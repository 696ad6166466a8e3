"""Reference imputers: geographic KNN, a family of recurrent models and a mean predictor."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import graphs
from . import tensor as tn
from .dataset import TEST, TRAIN, VAL
from .exceptions import ConfigError, GeometryError, ShapeError, UndefinedMetricError
from .metrics import PredictionSet, mre

VARIANTS = ("plain", "bidirectional", "embedded", "graph")
KNN_CANDIDATES = (1, 2, 3, 5, 10)


# --------------------------------------------------------------------- KNN / mean

def knn_impute(ds, split, k, target_label=TEST, coords=None):
    """Average of the ``k`` nearest locations whose channel ``d`` is train-labelled.

    Neighbours are ranked by great-circle distance (ties to the lower index).
    At each step only neighbours observed at that step are averaged; steps
    where none is observed stay invalid in the returned set.
    """
    coords = ds.coords if coords is None else np.asarray(coords, dtype=np.float64)
    if coords is None:
        raise GeometryError("KNN imputation needs location coordinates")
    if k < 1:
        raise ConfigError(f"k must be positive, got {k}")
    N, T, D = ds.shape
    dist = graphs.pairwise_distances(coords)
    np.fill_diagonal(dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")
    train = split.train
    point = np.zeros((N, T, D))
    valid = np.zeros((N, T, D), dtype=bool)
    obs = ds.mask.astype(bool)
    for n, d in np.argwhere(split.channels(target_label)):
        eligible = [v for v in order[n] if v != n and train[v, d]][:k]
        if not eligible:
            continue
        seen = obs[eligible, :, d]
        counts = seen.sum(axis=0)
        total = np.where(seen, ds.values[eligible, :, d], 0.0).sum(axis=0)
        has = counts > 0
        point[n, has, d] = total[has] / counts[has]
        valid[n, :, d] = has
    return PredictionSet(point, valid & obs)


def select_knn_k(ds, split, candidates=KNN_CANDIDATES, stats=None):
    """Pick ``k`` with the lowest validation MRE (original units when ``stats`` is given)."""
    best_k, best = None, math.inf
    target = split.entry_mask(VAL, ds.mask)
    truth = ds.values if stats is None else stats.inverse(ds.values)
    scores = {}
    for k in candidates:
        if k >= ds.n_locations:
            continue
        pred = knn_impute(ds, split, k, target_label=VAL)
        point = pred.point if stats is None else stats.inverse(pred.point)
        try:
            score = mre(point, truth, target & pred.valid)
        except UndefinedMetricError:
            continue
        scores[k] = score
        if score < best:
            best_k, best = k, score
    if best_k is None:
        raise UndefinedMetricError("no KNN candidate could be scored on validation channels")
    return best_k, scores


def mean_impute(ds, split, target_label=TEST):
    """Per-channel mean of the observed train-labelled entries."""
    train_entries = split.entry_mask(TRAIN, ds.mask)
    counts = train_entries.sum(axis=(0, 1))
    # shift by one observed value per channel so a constant channel comes back exactly
    flat = ds.values.reshape(-1, ds.n_channels)
    first = np.argmax(train_entries.reshape(-1, ds.n_channels), axis=0)
    ref = np.where(counts > 0, flat[first, np.arange(ds.n_channels)], 0.0)
    sums = np.where(train_entries, ds.values - ref, 0.0).sum(axis=(0, 1))
    means = ref + np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    query = split.entry_mask(target_label, ds.mask)
    point = np.broadcast_to(means, ds.shape).copy()
    return PredictionSet(point, query & (counts > 0))


# --------------------------------------------------------------------- recurrent

def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_gru(n_in, hidden, rng):
    return {"wx": _uniform(rng, hidden, (n_in, 3 * hidden)),
            "wh": _uniform(rng, hidden, (hidden, 3 * hidden)),
            "b": np.zeros(3 * hidden)}


def gru_cell(x_in, h_prev, params, x_proj=None):
    """One GRU step with update gate ``z``, reset gate ``r`` and candidate ``n``.

    ``h_next = (1 - z) * n + z * h_prev``.  ``x_proj`` may carry a precomputed
    part of ``x_in @ wx`` (for inputs that do not depend on the recurrence).
    """
    H = h_prev.shape[-1]
    gx = tn.matmul(x_in, params["wx"]) + params["b"]
    if x_proj is not None:
        gx = gx + x_proj
    gh = tn.matmul(h_prev, params["wh"])
    z = tn.sigmoid(gx[..., :H] + gh[..., :H])
    r = tn.sigmoid(gx[..., H:2 * H] + gh[..., H:2 * H])
    cand = tn.tanh(gx[..., 2 * H:] + r * gh[..., 2 * H:])
    return cand + z * (h_prev - cand)


@dataclass
class RnnVariantConfig:
    variant: str = "plain"
    hidden: int = 64
    h_e: int = 16
    quantiles: tuple = (0.159, 0.5, 0.841)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.hidden < 1 or self.h_e < 1:
            raise ConfigError("hidden and h_e must be positive")
        self.quantiles = tuple(float(q) for q in self.quantiles)

    @property
    def bidirectional(self):
        return self.variant != "plain"

    @property
    def uses_embeddings(self):
        return self.variant in ("embedded", "graph")

    def to_dict(self):
        d = asdict(self)
        d["quantiles"] = list(self.quantiles)
        return d


class RecurrentModel:
    """GRU imputer family sharing one model across locations.

    ``plain`` reads out ``W_out h_{t-1} + b`` and is trained with MAE.
    ``bidirectional`` adds a backward pass and an MLP over both states.
    ``embedded`` feeds a location embedding to every step and to the readout.
    ``graph`` mixes the concatenated states across locations with a learned
    graph before the readout.  The last two predict three quantiles.
    """

    kind = "rnn"

    def __init__(self, config: RnnVariantConfig, n_locations, n_channels, seed=0, params=None):
        self.config = config
        self.n_locations = n_locations
        self.n_channels = n_channels
        self.seed = seed
        self.params = params if params is not None else self._init_params(seed)

    @property
    def quantiles(self):
        return self.config.quantiles if self.config.uses_embeddings else (0.5,)

    @property
    def loss_kind(self):
        return "quantile" if self.config.uses_embeddings else "mae"

    @property
    def n_heads(self):
        return len(self.quantiles)

    def _init_params(self, seed):
        cfg = self.config
        rng = np.random.default_rng(seed)
        D, H, N = self.n_channels, cfg.hidden, self.n_locations
        he = cfg.h_e if cfg.uses_embeddings else 0
        n_in = 2 * D + he
        p = {}
        if he:
            p["E"] = graphs.init_embedding(N, he, rng)
        directions = ("fwd", "bwd") if cfg.bidirectional else ("fwd",)
        for name in directions:
            for k, v in init_gru(n_in, H, rng).items():
                p[f"{name}.gru.{k}"] = v
            p[f"{name}.out.w"] = _uniform(rng, H, (H, D))
            p[f"{name}.out.b"] = np.zeros(D)
        if cfg.variant == "graph":
            for i in (1, 2):
                for k, v in graphs.init_score_mlp(he, rng).items():
                    p[f"adj_G.mlp{i}.{k}"] = v
            p["gc.theta"] = _uniform(rng, 2 * H, (2 * H, 2 * H))
            p["gc.theta_skip"] = _uniform(rng, 2 * H, (2 * H, 2 * H))
            p["gc.bias"] = np.zeros(2 * H)
        if cfg.bidirectional:
            f_in = 2 * H + he + (2 * H if cfg.variant == "graph" else 0)
            p["mlp.w1"] = _uniform(rng, f_in, (f_in, H))
            p["mlp.b1"] = np.zeros(H)
            p["mlp.w2"] = _uniform(rng, H, (H, D * self.n_heads))
            p["mlp.b2"] = np.zeros(D * self.n_heads)
        return {k: tn.Tensor(v, requires_grad=True) for k, v in p.items()}

    def adjacency(self, params=None):
        p = self.params if params is None else params
        if self.config.variant != "graph":
            return None
        return graphs.build_inter_adjacency(
            p["E"], {k: p[f"adj_G.mlp1.{k}"] for k in ("w1", "b1", "w2", "b2")},
            {k: p[f"adj_G.mlp2.{k}"] for k in ("w1", "b1", "w2", "b2")})

    def _run(self, x, m, emb, p, prefix, reverse):
        """Iterate readout, filler and GRU update; returns per-step states and imputations.

        ``x``/``m`` are ``(R, T, D)`` arrays; states are returned aligned with
        time (state ``t`` has consumed step ``t``) together with the pre-update
        readouts ``W_out h_{t-1} + b``.
        """
        R, T, D = x.shape
        H = self.config.hidden
        gru = {k: p[f"{prefix}.gru.{k}"] for k in ("wx", "wh", "b")}
        cell = {"wx": gru["wx"][:2 * D], "wh": gru["wh"], "b": gru["b"]}
        # the embedding part of the input projection is the same at every step
        emb_proj = None if emb is None else tn.matmul(emb, gru["wx"][2 * D:])
        h = tn.Tensor(np.zeros((R, H)))
        states, reads = [None] * T, [None] * T
        steps = range(T - 1, -1, -1) if reverse else range(T)
        for t in steps:
            x_hat = tn.matmul(h, p[f"{prefix}.out.w"]) + p[f"{prefix}.out.b"]
            reads[t] = x_hat
            filled = filler(x[:, t], m[:, t], x_hat)
            h = gru_cell(tn.concat([filled, m[:, t]], axis=-1), h, cell, x_proj=emb_proj)
            states[t] = h
        return states, reads

    def forward(self, x, m, params=None, adjacency=None):
        """Predictions ``(B, N, T, D, Q)`` for windows ``x``, ``m`` of shape ``(B, N, T, D)``."""
        p = self.params if params is None else params
        cfg = self.config
        x = np.asarray(x, dtype=np.float64)
        m = np.asarray(m, dtype=np.float64)
        if x.ndim == 3:
            x, m = x[None], m[None]
        B, N, T, D = x.shape
        if (N, D) != (self.n_locations, self.n_channels):
            raise ShapeError(f"model built for N={self.n_locations}, D={self.n_channels}; "
                             f"got N={N}, D={D}")
        x = np.where(m > 0, x, 0.0)
        R = B * N
        xr, mr = x.reshape(R, T, D), m.reshape(R, T, D)
        emb = None
        if cfg.uses_embeddings:
            emb = tn.reshape(tn.broadcast_to(tn.reshape(p["E"], (1, N, -1)), (B, N, cfg.h_e)),
                             (R, cfg.h_e))
        fwd, reads = self._run(xr, mr, emb, p, "fwd", reverse=False)
        if not cfg.bidirectional:
            out = _stack_time(reads)
            return tn.reshape(out, (B, N, T, D, 1))
        bwd, _ = self._run(xr, mr, emb, p, "bwd", reverse=True)
        states = tn.concat([_stack_time(fwd), _stack_time(bwd)], axis=-1)  # (R, T, 2H)
        feats = [states]
        if cfg.variant == "graph":
            A = self.adjacency(p) if adjacency is None else adjacency
            Hs = tn.reshape(states, (B, N, T, 2 * cfg.hidden))
            mixed = tn.propagate(A, tn.matmul(Hs, p["gc.theta"]), axis=1)
            mixed = mixed + tn.matmul(Hs, p["gc.theta_skip"]) + p["gc.bias"]
            feats.append(tn.reshape(mixed, (R, T, 2 * cfg.hidden)))
        if emb is not None:
            feats.append(tn.broadcast_to(tn.reshape(emb, (R, 1, cfg.h_e)), (R, T, cfg.h_e)))
        inp = tn.concat(feats, axis=-1) if len(feats) > 1 else feats[0]
        hid = tn.elu(tn.matmul(inp, p["mlp.w1"]) + p["mlp.b1"])
        out = tn.matmul(hid, p["mlp.w2"]) + p["mlp.b2"]
        return tn.reshape(out, (B, N, T, D, self.n_heads))

    __call__ = forward

    def embeddings(self):
        return self.params["E"].data.copy() if "E" in self.params else None


def _stack_time(steps):
    R = steps[0].shape[0]
    return tn.concat([tn.reshape(s, (R, 1, s.shape[-1])) for s in steps], axis=1)


def filler(x, m, x_hat):
    """Observed entries pass through, missing ones take the model's estimate."""
    m = np.asarray(m, dtype=np.float64)
    return tn.as_tensor(x_hat) * (1.0 - m) + np.asarray(x, dtype=np.float64) * m
