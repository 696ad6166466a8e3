"""The GgNet architecture: encoder, temporal/inter-location/intra-location blocks, readout.

Hidden states are kept channel-major, ``(D, B, N, T, H)``: the temporal
convolutions and decoders use a separate weight set per channel, which then
maps onto one batched matrix product over the leading axis, while the two
graph convolutions mix along axis 2 (locations) or axis 0 (channels).
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field

import numpy as np

from . import graphs
from . import tensor as tn
from .exceptions import ConfigError, ShapeError

_ACTIVATIONS = {"elu": tn.elu, "tanh": tn.tanh, "relu": tn.relu, "linear": None}


def parse_block_pattern(pattern: str) -> list[str]:
    """Expand a layer pattern such as ``"2(3T-G-g)"`` into ``['T', 'T', 'T', 'G', 'g', ...]``."""
    tokens = re.findall(r"\d+|[TGg()]|[-,\s]+|.", pattern)
    tokens = [t for t in tokens if not re.fullmatch(r"[-,\s]+", t)]
    pos = 0

    def parse_seq(depth):
        nonlocal pos
        out = []
        while pos < len(tokens):
            tok = tokens[pos]
            if tok == ")":
                if depth == 0:
                    raise ConfigError(f"unbalanced ')' in block pattern {pattern!r}")
                pos += 1
                return out
            repeat = 1
            if tok.isdigit():
                repeat = int(tok)
                pos += 1
                if pos >= len(tokens):
                    raise ConfigError(f"dangling repeat count in {pattern!r}")
                tok = tokens[pos]
            if tok == "(":
                pos += 1
                body = parse_seq(depth + 1)
            elif tok in ("T", "G", "g"):
                pos += 1
                body = [tok]
            else:
                raise ConfigError(f"unexpected {tok!r} in block pattern {pattern!r}")
            out.extend(body * repeat)
        if depth:
            raise ConfigError(f"unbalanced '(' in block pattern {pattern!r}")
        return out

    layers = parse_seq(0)
    if not layers:
        raise ConfigError("block pattern is empty")
    return layers


@dataclass
class GgNetConfig:
    hidden: int = 128
    h_e_G: int = 16
    h_e_g: int = 8
    block_pattern: str = "2(3T-G-g)"
    kernel_k: int = 3
    dilations: tuple = (1, 2, 4)
    activation: str = "elu"
    quantiles: tuple = (0.159, 0.5, 0.841)
    residual: bool = True
    channel_embeddings: bool = True

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        self.quantiles = tuple(float(q) for q in self.quantiles)
        if self.kernel_k < 1 or self.kernel_k % 2 == 0:
            raise ConfigError(f"kernel_k must be odd and positive, got {self.kernel_k}")
        if not self.dilations or min(self.dilations) < 1:
            raise ConfigError(f"dilations must be >= 1, got {self.dilations}")
        q = np.asarray(self.quantiles)
        if q.size == 0 or np.any(q <= 0) or np.any(q >= 1) or np.any(np.diff(q) <= 0):
            raise ConfigError(f"quantiles must be strictly increasing in (0, 1), got {self.quantiles}")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        for name in ("hidden", "h_e_G"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        parse_block_pattern(self.block_pattern)

    def layers(self):
        """``[(kind, dilation_or_None), ...]``; dilation restarts on every run of T layers."""
        out, run = [], 0
        for kind in parse_block_pattern(self.block_pattern):
            if kind == "T":
                if run < len(self.dilations):
                    dil = self.dilations[run]
                else:
                    dil = self.dilations[-1] * 2 ** (run - len(self.dilations) + 1)
                out.append(("T", dil))
                run += 1
            else:
                out.append((kind, None))
                run = 0
        return out

    @property
    def median_index(self):
        return int(np.argmin(np.abs(np.asarray(self.quantiles) - 0.5)))

    def to_dict(self):
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        d["quantiles"] = list(self.quantiles)
        return d


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: GgNetConfig, n_locations: int, n_channels: int, seed=0):
    """Fresh trainable tensors keyed by name."""
    rng = np.random.default_rng(seed)
    H, D, N = config.hidden, n_channels, n_locations
    hG = config.h_e_G
    hg = config.h_e_g if config.channel_embeddings else 0
    Q = len(config.quantiles)
    kinds = {k for k, _ in config.layers()}
    p = {"E_G": graphs.init_embedding(N, hG, rng)}
    if hg:
        p["E_g"] = graphs.init_embedding(D, hg, rng)
    if "G" in kinds:
        for i in (1, 2):
            for k, v in graphs.init_score_mlp(hG, rng).items():
                p[f"adj_G.mlp{i}.{k}"] = v
    if "g" in kinds:
        p["phi"] = np.zeros((D, D))
    p["enc1.w1"] = _uniform(rng, 1, (1, H))
    p["enc1.b1"] = np.zeros(H)
    p["enc1.w2"] = _uniform(rng, H, (H, H))
    p["enc1.b2"] = np.zeros(H)
    p["enc2.w1"] = _uniform(rng, hG + hg, (hG + hg, H))
    p["enc2.b1"] = np.zeros(H)
    p["enc2.w2"] = _uniform(rng, H, (H, H))
    p["enc2.b2"] = np.zeros(H)
    f_t = H + 1 + hG
    f_c = H + 1 + hG + hg
    k = config.kernel_k
    for i, (kind, _) in enumerate(config.layers()):
        if kind == "T":
            p[f"layer{i}.kernel"] = _uniform(rng, k * f_t, (D, k, f_t, H))
            p[f"layer{i}.bias"] = np.zeros((D, 1, 1, 1, H))
        else:
            p[f"layer{i}.theta"] = _uniform(rng, f_c, (f_c, H))
            p[f"layer{i}.theta_skip"] = _uniform(rng, f_c, (f_c, H))
            p[f"layer{i}.bias"] = np.zeros(H)
    p["dec.w1"] = _uniform(rng, f_c, (D, f_c, H))
    p["dec.b1"] = np.zeros((D, 1, H))
    p["dec.w2"] = _uniform(rng, H, (D, H, Q))
    p["dec.b2"] = np.zeros((D, 1, Q))
    return {name: tn.Tensor(v, requires_grad=True) for name, v in p.items()}


def _mlp(x, params, prefix, activation=tn.elu):
    h = x @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"]
    h = activation(h)
    return h @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"]


def _activate(x, activation):
    fn = _ACTIVATIONS[activation] if isinstance(activation, str) else activation
    return x if fn is None else fn(x)


def to_channel_major(a):
    """``(B, N, T, D)`` array -> ``(D, B, N, T, 1)``."""
    return np.ascontiguousarray(np.moveaxis(np.asarray(a, dtype=np.float64), 3, 0))[..., None]


def encode_inputs(x, m, E_G, E_g, params):
    """Per-entry hidden state ``m * MLP1(x) + MLP2(e_G[n] || e_g[d])``.

    ``x`` and ``m`` are channel-major ``(D, B, N, T, 1)``; masked entries of
    ``x`` are zeroed before encoding so their stored values cannot leak.
    """
    x = np.where(m > 0, x, 0.0)
    D, _, N = x.shape[:3]
    # a 1-wide input makes the first product an outer product
    hid = tn.elu(params["enc1.w1"] * x + params["enc1.b1"])
    h_obs = (hid @ params["enc1.w2"] + params["enc1.b2"]) * m
    emb = tn.broadcast_to(tn.reshape(E_G, (1,) + E_G.shape), (D,) + E_G.shape)
    if E_g is not None:
        eg = tn.broadcast_to(tn.reshape(E_g, (D, 1, E_g.shape[1])), (D, N, E_g.shape[1]))
        emb = tn.concat([emb, eg], axis=-1)
    h_emb = _mlp(emb, params, "enc2")
    h_emb = tn.reshape(h_emb, (D, 1, N, 1, h_emb.shape[-1]))
    return h_obs + h_emb


@dataclass
class Conditioning:
    """Side inputs concatenated to the hidden state ahead of every learned transform.

    Feature order is ``h || m || e_G || e_g``; ``E_g`` is ``None`` when the
    layer sees no channel embeddings.
    """

    m: np.ndarray | None
    E_G: tn.Tensor | None
    E_g: tn.Tensor | None = None

    def width(self):
        return ((self.m is not None) + (0 if self.E_G is None else self.E_G.shape[1])
                + (0 if self.E_g is None else self.E_g.shape[1]))

    def without_channel(self):
        return Conditioning(self.m, self.E_G, None)


def project_concat(h, cond, weight, bias=None):
    """``concat(h, m, e_G[n], e_g[d]) @ weight (+ bias)`` without materialising the concatenation.

    ``h`` is ``(D, B, N, T, H)``.  ``weight`` is ``(F, O)``, shared by all
    channels, or ``(D, F, O)`` with one block per channel.  The embedding
    rows are projected at table size and broadcast, which gives the same
    result as projecting the broadcast features.
    """
    cond = cond or Conditioning(None, None)
    D, B, N, T, H = h.shape
    weight = tn.as_tensor(weight)
    F, O = weight.shape[-2:]
    if F != H + cond.width():
        raise ShapeError(f"weight expects {F} input features, got {H} + {cond.width()}")
    grouped = weight.ndim == 3
    r = H
    w_m = None
    if cond.m is not None:
        w_m = weight[..., r:r + 1, :]
        r += 1
    offset = bias
    if cond.E_G is not None:
        proj = tn.matmul(cond.E_G, weight[..., r:r + cond.E_G.shape[1], :])
        proj = tn.reshape(proj, (D if grouped else 1, 1, N, 1, O))
        offset = proj if offset is None else proj + offset
        r += cond.E_G.shape[1]
    if cond.E_g is not None:
        w = weight[..., r:r + cond.E_g.shape[1], :]
        if grouped:
            proj = tn.matmul(tn.reshape(cond.E_g, (D, 1, -1)), w)
        else:
            proj = tn.matmul(cond.E_g, w)
        proj = tn.reshape(proj, (D, 1, 1, 1, O))
        offset = proj if offset is None else offset + proj
    return tn.masked_affine(h, weight[..., :H, :], cond.m, w_m, offset)


def temporal_layer(h, cond, kernel, bias, dilation, activation="elu", residual=True):
    """One channel-wise dilated convolution over ``h || cond`` along time.

    ``kernel`` is ``(D, k, F, H)``; each tap is projected first and the
    shifted projections are summed, which equals convolving the padded input.
    """
    k = kernel.shape[-3]
    z = project_concat(h, cond, tn.stack_taps(kernel))
    out = _activate(tn.shift_sum(z, k, dilation) + bias, activation)
    return h + out if residual else out


def temporal_block(h, m, E_G, layer_params, dilations, activation="elu", residual=True):
    """Stack of temporal layers conditioned on the mask and location embeddings.

    ``layer_params`` is a sequence of ``(kernel, bias)`` pairs, one per
    entry of ``dilations``.
    """
    cond = Conditioning(m, E_G)
    for (kernel, bias), dil in zip(layer_params, dilations):
        h = temporal_layer(h, cond, kernel, bias, dil, activation, residual)
    return h


def graph_conv(h, adj, cond, params, axis=0, activation="elu"):
    """``act(A (in) Theta + (in) Theta_skip + b)`` with ``in = h || cond``, mixing along ``axis``."""
    adj = tn.as_tensor(adj)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ShapeError(f"adjacency must be square, got {adj.shape}")
    agg = tn.propagate(adj, project_concat(h, cond, params["theta"]), axis=axis)
    out = agg + project_concat(h, cond, params["theta_skip"], params["bias"])
    return _activate(out, activation)


def readout(h, cond, params):
    """Per-channel two-layer decoders mapping ``h || cond`` to quantile predictions.

    Returns ``(B, N, T, D, Q)``.
    """
    D, B, N, T, _ = h.shape
    b1 = tn.reshape(params["dec.b1"], (D, 1, 1, 1, -1))
    hid = tn.elu(tn.reshape(project_concat(h, cond, params["dec.w1"], b1), (D, B * N * T, -1)))
    out = tn.matmul(hid, params["dec.w2"]) + params["dec.b2"]
    Q = out.shape[-1]
    return tn.transpose(tn.reshape(out, (D, B, N, T, Q)), (1, 2, 3, 0, 4))


class GgNet:
    """Nested-graph network over a fixed set of locations and channels."""

    kind = "ggnet"

    def __init__(self, config: GgNetConfig, n_locations: int, n_channels: int, seed=0, params=None):
        self.config = config
        self.n_locations = n_locations
        self.n_channels = n_channels
        self.seed = seed
        self.params = params if params is not None else init_params(config, n_locations,
                                                                    n_channels, seed)

    @property
    def quantiles(self):
        return self.config.quantiles

    def adjacencies(self, params=None):
        p = self.params if params is None else params
        A_G = A_g = None
        if "adj_G.mlp1.w1" in p:
            A_G = graphs.build_inter_adjacency(
                p["E_G"], {k: p[f"adj_G.mlp1.{k}"] for k in ("w1", "b1", "w2", "b2")},
                {k: p[f"adj_G.mlp2.{k}"] for k in ("w1", "b1", "w2", "b2")})
        if "phi" in p:
            A_g = graphs.build_intra_adjacency(p["phi"])
        return A_G, A_g

    def forward(self, x, m, params=None, adjacency=None):
        """Quantile predictions ``(B, N, T, D, Q)`` from inputs ``x``, ``m`` of shape ``(B, N, T, D)``.

        ``adjacency`` optionally overrides the learned ``(A_G, A_g)`` pair.
        """
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
        xc, mc = to_channel_major(x), to_channel_major(m)
        E_G = p["E_G"]
        E_g = p.get("E_g")
        A_G, A_g = self.adjacencies(p) if adjacency is None else adjacency
        h = encode_inputs(xc, mc, E_G, E_g, p)
        cond_c = Conditioning(mc, E_G, E_g)
        cond_t = cond_c.without_channel()
        for i, (kind, dil) in enumerate(cfg.layers()):
            if kind == "T":
                h = temporal_layer(h, cond_t, p[f"layer{i}.kernel"], p[f"layer{i}.bias"], dil,
                                   cfg.activation, cfg.residual)
                continue
            lp = {"theta": p[f"layer{i}.theta"], "theta_skip": p[f"layer{i}.theta_skip"],
                  "bias": p[f"layer{i}.bias"]}
            if kind == "G":
                out = graph_conv(h, A_G, cond_c, lp, axis=2, activation=cfg.activation)
            else:
                out = graph_conv(h, A_g, cond_c, lp, axis=0, activation=cfg.activation)
            h = h + out if cfg.residual else out
        return readout(h, cond_c, p)

    __call__ = forward

    def embeddings(self):
        return self.params["E_G"].data.copy()
