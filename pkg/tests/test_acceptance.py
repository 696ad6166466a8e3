"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line; ``conftest.py`` prints them after the run
and ``python tests/test_acceptance.py`` prints them directly.  The synthetic
experiments use small networks and short schedules so the module finishes in
a few minutes on one core.
"""

import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import LeaveOneOut, cross_val_score

from ggnet import model as gm
from ggnet import tensor as tn
from ggnet.baselines import filler, knn_impute
from ggnet.dataset import TEST, TRAIN, VAL, ChannelSplit, SpatioTemporalDataset, split_channels
from ggnet.diagnostics import gradient_suite
from ggnet.estimators import GgNetImputer, MeanImputer, RecurrentImputer, load_imputer
from ggnet.graphs import build_inter_adjacency, build_intra_adjacency, init_score_mlp
from ggnet.metrics import mae, mre
from ggnet.synthetic import SyntheticSpec, generate, oracle_linear_reconstruction
from ggnet.training import AdamState, EarlyStopping, adam_step, cosine_lr

RESULTS = []

SMALL_NET = dict(hidden=16, lr=0.003, batch_size=4)


def record(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    RESULTS.append(line)
    print(line)
    return ok


# --------------------------------------------------------------------- gradients

def test_gradient_suite():
    report = gradient_suite(seed=0, epsilon=1e-6)
    ok = report.passed and report.seconds < 60 and report.tolerance == 1e-4
    detail = (f"{len(report.errors)} modules, worst {report.worst:.2e} (< 1e-4), "
              f"{report.seconds:.1f}s (< 60s)")
    if report.failures:
        detail += "; failing: " + ", ".join(report.failures)
    assert record("gradient suite", ok, detail)


# --------------------------------------------------------------------- invariants

def _invariant_checks():
    rng = np.random.default_rng(0)
    checks = {}

    worst = 0.0
    for scale in (0.1, 1.0, 10.0, 40.0):
        E = rng.normal(scale=scale, size=(7, 4))
        m1 = {k: v * scale for k, v in init_score_mlp(4, rng).items()}
        m2 = {k: v * scale for k, v in init_score_mlp(4, rng).items()}
        A = build_inter_adjacency(E, m1, m2).data
        B = build_intra_adjacency(rng.normal(scale=scale, size=(5, 5))).data
        worst = max(worst, np.abs(A.sum(1) - 1).max(), np.abs(B.sum(1) - 1).max())
    checks["row-stochastic"] = worst <= 1e-9

    net = gm.GgNet(gm.GgNetConfig(hidden=6, h_e_G=3, h_e_g=2), 4, 3, seed=1)
    x = rng.normal(size=(2, 4, 16, 3))
    m = (rng.uniform(size=x.shape) > 0.4).astype(float)
    base = net.forward(x, m).data
    noisy = np.where(m > 0, x, rng.normal(scale=1e3, size=x.shape))
    checks["mask invariance"] = np.array_equal(base, net.forward(noisy, m).data)

    x_hat = rng.normal(size=(5, 3))
    xt, mt = rng.normal(size=(5, 3)), (rng.uniform(size=(5, 3)) > 0.5).astype(float)
    out = filler(xt, mt, x_hat).data
    checks["filler keeps observed"] = np.array_equal(out[mt > 0], xt[mt > 0])

    perm = rng.permutation(4)
    params = dict(net.params)
    params["E_G"] = tn.Tensor(net.params["E_G"].data[perm])
    moved = net.forward(x[:, perm], m[:, perm], params=params).data
    checks["permutation consistency"] = np.allclose(moved, base[:, perm], rtol=1e-12, atol=1e-13)

    ds, _ = generate(SyntheticSpec(N=5, T=48, D=3, seed=2))
    est = GgNetImputer(hidden=4, h_e_G=2, h_e_g=2, max_epochs=1, t_w=16).fit(ds)
    with tempfile.TemporaryDirectory() as tmp:
        back = load_imputer(est.save(Path(tmp) / "c.zip"), ds)
    same_params = all(np.array_equal(est.model_.params[k].data, back.model_.params[k].data)
                      for k in est.model_.params)
    checks["load-save identity"] = same_params and np.array_equal(
        est.predict(ds).point, back.predict(ds).point)
    return checks


def test_invariant_suite():
    checks = _invariant_checks()
    detail = ", ".join(f"{k} {'ok' if v else 'BROKEN'}" for k, v in checks.items())
    assert record("invariant suite", all(checks.values()), detail)


# --------------------------------------------------------------------- synthetic recovery

@pytest.fixture(scope="module")
def recovery_run():
    """GgNet trained on the default synthetic benchmark (3 clusters), shared by two criteria."""
    ds, truth = generate(SyntheticSpec(N=20, T=512, D=4, latent_dim=2, noise_std=0.05, seed=0))
    split = split_channels(ds, (0.7, 0.1, 0.2), seed=0)
    t0 = time.perf_counter()
    est = GgNetImputer(**SMALL_NET, max_epochs=60, patience=60).fit(ds, split=split)
    seconds = time.perf_counter() - t0
    return ds, truth, split, est, seconds


def test_recovery_cross_channel(recovery_run):
    ds, truth, split, est, seconds = recovery_run
    test = split.entry_mask(TEST, ds.mask)
    ggnet = mre(est.predict(ds).point, ds.values, test)
    mean = mre(MeanImputer().fit(ds, split=split).predict(ds).point, ds.values, test)
    oracle_pred = np.zeros(ds.shape)
    for n, d in np.argwhere(split.test):
        oracle_pred[n, :, d] = oracle_linear_reconstruction(ds, truth, (n, d))[0]
    oracle = mre(oracle_pred, ds.values, test)
    ok = ggnet < 0.5 * mean and ggnet <= 3 * oracle and seconds < 600
    detail = (f"GgNet MRE {ggnet:.1f} vs mean {mean:.1f} (need < {0.5 * mean:.1f}), "
              f"oracle {oracle:.1f} (need <= {3 * oracle:.1f}), train {seconds:.0f}s (< 600s)")
    assert record("synthetic recovery C->Y", ok, detail)


def test_embedding_clusters(recovery_run):
    ds, truth, _, est, _ = recovery_run
    acc = cross_val_score(LogisticRegression(max_iter=5000), est.embeddings_, truth.clusters,
                          cv=LeaveOneOut()).mean()
    assert record("embedding clustering", acc >= 0.9,
                  f"leave-one-out logistic accuracy {acc:.2f} on 3 clusters (>= 0.90)")


def _private_channel_benchmark():
    # channel 0 is a cluster signal no other channel sees; locations 0-2 have it hidden
    # and each has a twin (same cluster, offset and coordinates) that observes it
    W = np.random.default_rng(0).normal(size=(4, 2)) / np.sqrt(2)
    W[0] = 0.0
    spec = SyntheticSpec(N=20, T=512, D=4, latent_dim=2, noise_std=0.05, W=W,
                         cluster_channel_weight=[1.0, 0.0, 0.0, 0.0],
                         twins=[(0, 9), (1, 10), (2, 11)], seed=0)
    ds, _ = generate(spec)
    labels = split_channels(ds, seed=0).assignment.copy()
    labels[:, 0] = TRAIN
    labels[[0, 1, 2], 0] = TEST
    labels[[3, 4], 0] = VAL
    return ds, ChannelSplit(labels)


def test_recovery_cross_location():
    ds, split = _private_channel_benchmark()
    target = split.entry_mask(TEST, ds.mask)
    target[..., 1:] = False
    fit = dict(SMALL_NET, max_epochs=40, patience=40)
    scores = {
        "2(3T-g)": GgNetImputer(block_pattern="2(3T-g)", **fit),
        "GgNet": GgNetImputer(**fit),
        "RNN_G": RecurrentImputer("graph", h_e=8, **fit),
    }
    for name, est in scores.items():
        scores[name] = mre(est.fit(ds, split=split).predict(ds).point, ds.values, target)
    ref = scores["2(3T-g)"]
    gains = {k: 1 - scores[k] / ref for k in ("GgNet", "RNN_G")}
    ok = all(g >= 0.2 for g in gains.values())
    detail = (f"channel-only MRE {ref:.1f}; GgNet {scores['GgNet']:.1f} ({gains['GgNet']:.0%} better), "
              f"RNN_G {scores['RNN_G']:.1f} ({gains['RNN_G']:.0%} better); need >= 20%")
    assert record("synthetic recovery T->Y", ok, detail)


ABLATION = ("2(3T-G)", "2(3T-g)", "2(3T-G-g)")


def test_ablation_ordering():
    rows = []
    for seed in (0, 1, 2):
        ds, _ = generate(SyntheticSpec(N=12, T=240, D=4, location_dynamic_std=0.4,
                                       cluster_channel_weight=0.5, seed=seed))
        split = split_channels(ds, seed=seed)
        test = split.entry_mask(TEST, ds.mask)
        rows.append([mre(GgNetImputer(block_pattern=p, max_epochs=40, patience=40,
                                      random_state=seed, **SMALL_NET)
                         .fit(ds, split=split).predict(ds).point, ds.values, test)
                     for p in ABLATION])
    votes = sum(a > b > c for a, b, c in rows)
    avg = np.mean(rows, axis=0)
    detail = (f"seed-wise MRE {[[round(v, 1) for v in r] for r in rows]}, ordered in {votes}/3; "
              f"average {' > '.join(f'{p} {v:.1f}' for p, v in zip(ABLATION, avg))}")
    assert record("ablation ordering", votes >= 2, detail)


# --------------------------------------------------------------------- baselines and optimiser

def test_knn_duplicate_location():
    rng = np.random.default_rng(0)
    vals = rng.normal(size=(6, 50, 3))
    vals[5] = vals[2]
    coords = np.array([[0, 0], [20, 30], [-10, 100], [45, -60], [-30, -120], [-10, 100]], float)
    ds = SpatioTemporalDataset(vals, np.ones(vals.shape), coords=coords)
    labels = np.full((6, 3), TRAIN, dtype=np.int8)
    labels[5] = [TEST, TEST, VAL]
    split = ChannelSplit(labels)
    pred = knn_impute(ds, split, k=1)
    target = split.entry_mask(TEST, ds.mask)
    err = mae(pred.point, vals, target & pred.valid)
    ok = err == 0.0 and pred.valid[target].all()
    assert record("KNN oracle", ok, f"k=1 MAE {err} on the duplicate's test channels (== 0)")


def test_scheduler_and_optimizer():
    cosine = cosine_lr(0, 200, 1e-3, 1e-6) == 1e-3 and cosine_lr(200, 200, 1e-3, 1e-6) == 1e-6
    p = {"w": tn.Tensor(np.zeros(5), requires_grad=True)}
    adam_step(p, {"w": np.array([1.0, -1.0, 1.0, 1.0, -1.0])}, AdamState(), 1e-3)
    adam_dev = float(np.abs(np.abs(p["w"].data) - 1e-3).max())
    stopper, plateau_from = EarlyStopping(30), 17
    for epoch in range(500):
        if stopper.update(float(max(100 - epoch, 100 - plateau_from)), epoch):
            break
    stop_ok = epoch == plateau_from + 30
    ok = cosine and adam_dev <= 1e-6 and stop_ok
    detail = (f"cosine endpoints {'exact' if cosine else 'off'}, Adam first-step deviation "
              f"{adam_dev:.1e} (<= 1e-6), plateau from {plateau_from} stopped at {epoch} (== {plateau_from + 30})")
    assert record("scheduler/optimizer", ok, detail)


def _gconv_seconds(N, H=8, D=2, T=24, reps=7):
    rng = np.random.default_rng(0)
    h = tn.Tensor(rng.normal(size=(D, 1, N, T, H)), requires_grad=True)
    A = tn.Tensor(np.full((N, N), 1.0 / N), requires_grad=True)
    p = {"theta": tn.Tensor(rng.normal(size=(H, H)), requires_grad=True),
         "theta_skip": tn.Tensor(rng.normal(size=(H, H)), requires_grad=True),
         "bias": tn.Tensor(np.zeros(H), requires_grad=True)}
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        tn.sum_(gm.graph_conv(h, A, None, p, axis=2)).backward()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def test_complexity_scaling():
    small, large = _gconv_seconds(256), _gconv_seconds(512)
    ratio = large / small
    assert record("complexity scaling", 2 <= ratio <= 8,
                  f"G-conv step {small * 1e3:.1f}ms at N=256, {large * 1e3:.1f}ms at N=512, "
                  f"ratio {ratio:.2f} (in [2, 8])")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
