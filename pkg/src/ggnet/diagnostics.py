"""Finite-difference checks of every differentiable building block."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import baselines, graphs, model as gm
from . import tensor as tn
from .tensor import grad_check
from .training import model_loss

GRAD_TOLERANCE = 1e-4


@dataclass
class GradientReport:
    errors: dict = field(default_factory=dict)
    seconds: float = 0.0
    tolerance: float = GRAD_TOLERANCE

    @property
    def worst(self):
        return max(self.errors.values(), default=0.0)

    @property
    def failures(self):
        return sorted(k for k, v in self.errors.items() if not v < self.tolerance)

    @property
    def passed(self):
        return not self.failures

    def to_rows(self):
        return [(k, v, v < self.tolerance) for k, v in sorted(self.errors.items())]


def _sq(t):
    return tn.sum_(t * t)


def _wsum(t, w):
    # random weights keep every output coordinate in the gradient
    return tn.sum_(t * w)


def _primitive_cases(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    w34 = rng.normal(size=(3, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    adj = rng.uniform(size=(3, 3))
    w32, w54, w62 = rng.normal(size=(3, 2)), rng.normal(size=(5, 4)), rng.normal(size=(6, 2))
    keep = (rng.uniform(size=(2, 3, 1)) > 0.5).astype(float)
    return {
        "matmul": (lambda x, y: _wsum(tn.matmul(x, y), w32), [a, b]),
        "add": (lambda x, y: _wsum(x + y, w34), [a, rng.normal(size=(4,))]),
        "mul": (lambda x, y: _wsum(x * y, w34), [a, rng.normal(size=(3, 4))]),
        "div": (lambda x, y: _wsum(x / y, w34), [a, pos]),
        "exp": (lambda x: _wsum(tn.exp(x), w34), a),
        "log": (lambda x: _wsum(tn.log(x), w34), pos),
        "elu": (lambda x: _wsum(tn.elu(x), w34), a),
        "tanh": (lambda x: _wsum(tn.tanh(x), w34), a),
        "sigmoid": (lambda x: _wsum(tn.sigmoid(x), w34), a),
        "relu": (lambda x: _wsum(tn.relu(x), w34), a),
        "concat": (lambda x, y: _wsum(tn.concat([x, y], axis=0), w54),
                   [a, rng.normal(size=(2, 4))]),
        "softmax_rows": (lambda x: _wsum(tn.softmax_rows(x), w34), a),
        "reductions": (lambda x: _sq(tn.sum_(x, axis=0)) + _sq(tn.mean(x, axis=1)), a),
        "getitem": (lambda x: _sq(x[1:, ::2]), a),
        "take": (lambda x: _sq(tn.take(x, np.array([0, 2, 2]), axis=0)), a),
        "scatter_add": (lambda x, y: _sq(tn.scatter_add(x, np.array([0, 2]), y, axis=0)),
                        [a, rng.normal(size=(2, 4))]),
        "conv1d_centered": (lambda x, k: _sq(tn.conv1d_centered(x, k, dilation=2)),
                            [rng.normal(size=(7, 2)), rng.normal(size=(3, 2, 3))]),
        "shift_sum": (lambda z: _wsum(tn.shift_sum(z, 3, 2), w62),
                      rng.normal(size=(6, 6))),
        "masked_affine": (lambda h, w, wm, off: _sq(tn.masked_affine(h, w, keep, wm, off)),
                          [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 2)),
                           rng.normal(size=(1, 2)), rng.normal(size=(2,))]),
        "propagate": (lambda A, x: _sq(tn.propagate(A, x, axis=1)),
                      [adj, rng.normal(size=(2, 3, 2))]),
    }


def _gru_case(rng):
    p = baselines.init_gru(2, 3, rng)
    names = list(p)

    def f(x, h, *vals):
        return _sq(baselines.gru_cell(x, h, dict(zip(names, vals))))

    return f, [rng.normal(size=(2, 2)), rng.normal(size=(2, 3))] + [p[k] for k in names]


def _adjacency_cases(rng):
    hG = 3
    m1, m2 = graphs.init_score_mlp(hG, rng), graphs.init_score_mlp(hG, rng)
    keys = list(m1)
    w = rng.normal(size=(4, 4))

    def inter(E, *vals):
        a = dict(zip(keys, vals[:4]))
        b = dict(zip(keys, vals[4:]))
        return _wsum(graphs.build_inter_adjacency(E, a, b), w)

    point = [rng.normal(size=(4, hG))] + [m1[k] for k in keys] + [m2[k] for k in keys]
    return {
        "adjacency_inter": (inter, point),
        "adjacency_intra": (lambda phi: _wsum(graphs.build_intra_adjacency(phi), w),
                            rng.normal(size=(4, 4))),
    }


def _block_cases(rng):
    D, B, N, T, H, hG, hg = 2, 1, 3, 5, 3, 2, 2
    m = (rng.uniform(size=(D, B, N, T, 1)) > 0.3).astype(float)
    h0 = rng.normal(size=(D, B, N, T, H))
    E_G, E_g = rng.normal(size=(N, hG)), rng.normal(size=(D, hg))
    f_t, f_c = H + 1 + hG, H + 1 + hG + hg
    adj_N, adj_D = rng.dirichlet(np.ones(N), size=N), rng.dirichlet(np.ones(D), size=D)

    def temporal(h, EG, kernel, bias):
        return _sq(gm.temporal_layer(h, gm.Conditioning(m, EG), kernel, bias, 2))

    def gconv(axis, adj):
        def f(h, EG, Eg, A, theta, skip, bias):
            lp = {"theta": theta, "theta_skip": skip, "bias": bias}
            return _sq(gm.graph_conv(h, A, gm.Conditioning(m, EG, Eg), lp, axis=axis))
        return f, [h0, E_G, E_g, adj, rng.normal(size=(f_c, H)), rng.normal(size=(f_c, H)),
                   rng.normal(size=(H,))]

    def read(h, EG, Eg, w1, b1, w2, b2):
        p = {"dec.w1": w1, "dec.b1": b1, "dec.w2": w2, "dec.b2": b2}
        return _sq(gm.readout(h, gm.Conditioning(m, EG, Eg), p))

    enc_keys = ("enc1.w1", "enc1.b1", "enc1.w2", "enc1.b2",
                "enc2.w1", "enc2.b1", "enc2.w2", "enc2.b2")
    x = rng.normal(size=(D, B, N, T, 1))

    def encode(EG, Eg, *vals):
        return _sq(gm.encode_inputs(x, m, EG, Eg, dict(zip(enc_keys, vals))))

    enc_point = [E_G, E_g, rng.normal(size=(1, H)), rng.normal(size=(H,)),
                 rng.normal(size=(H, H)), rng.normal(size=(H,)),
                 rng.normal(size=(hG + hg, H)), rng.normal(size=(H,)),
                 rng.normal(size=(H, H)), rng.normal(size=(H,))]
    return {
        "encoder": (encode, enc_point),
        "temporal_layer": (temporal, [h0, E_G, rng.normal(size=(D, 3, f_t, H)) * 0.5,
                                      rng.normal(size=(D, 1, 1, 1, H))]),
        "graph_conv_G": gconv(2, adj_N),
        "graph_conv_g": gconv(0, adj_D),
        "readout": (read, [h0, E_G, E_g, rng.normal(size=(D, f_c, H)), rng.normal(size=(D, 1, H)),
                           rng.normal(size=(D, H, 3)), rng.normal(size=(D, 1, 3))]),
    }


def _loss_case(net, x, avail, rng):
    """Whole training loss as a function of every parameter tensor."""
    names = sorted(net.params)
    for k in names:  # move off zero-initialised biases and the flat phi
        net.params[k].data = net.params[k].data + 0.1 * rng.normal(size=net.params[k].shape)
    shown = avail * (rng.uniform(size=avail.shape) > 0.3)
    hidden = avail.astype(bool) & (shown == 0)

    def f(*vals):
        return model_loss(net, x, shown, x, avail, hidden, 5.0, params=dict(zip(names, vals)))

    return f, [net.params[k].data for k in names]


def _model_cases(rng):
    N, T, D = 3, 8, 2
    x = rng.normal(size=(1, N, T, D))
    avail = (rng.uniform(size=x.shape) > 0.1).astype(np.uint8)
    cfg = gm.GgNetConfig(hidden=3, h_e_G=2, h_e_g=2)
    cases = {"ggnet_loss": _loss_case(gm.GgNet(cfg, N, D, seed=1), x, avail, rng)}
    xr = rng.normal(size=(1, 2, 6, 2))
    ar = (rng.uniform(size=xr.shape) > 0.2).astype(np.uint8)
    for variant in baselines.VARIANTS:
        rc = baselines.RnnVariantConfig(variant, hidden=3, h_e=2)
        net = baselines.RecurrentModel(rc, 2, 2, seed=1)
        cases[f"rnn_{variant}_loss"] = _loss_case(net, xr, ar, rng)
    return cases


def gradient_suite(seed=0, epsilon=1e-6, include_models=True) -> GradientReport:
    """Max relative gradient error for each primitive, block, adjacency and full loss."""
    rng = np.random.default_rng(seed)
    cases = dict(_primitive_cases(rng))
    cases["gru_cell"] = _gru_case(rng)
    cases.update(_adjacency_cases(rng))
    cases.update(_block_cases(rng))
    if include_models:
        cases.update(_model_cases(rng))
    report = GradientReport()
    start = time.perf_counter()
    for name, (fn, point) in cases.items():
        report.errors[name] = grad_check(fn, point, epsilon)
    report.seconds = time.perf_counter() - start
    return report
