"""Losses, optimizer, learning-rate schedule and the masked-channel training loop."""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .dataset import TRAIN, VAL, cut_windows, sample_whitening_mask, stitch_windows
from .exceptions import (ConfigError, DivergenceError, EmptyBatchError, NonFiniteGradientError,
                         UndefinedMetricError)
from .metrics import mre


def pinball_loss(pred, target, q):
    """Quantile loss ``q (y - p)`` if ``y >= p`` else ``(1 - q)(p - y)``; elementwise on tensors."""
    if not 0.0 < q < 1.0:
        raise ConfigError(f"quantile must lie in (0, 1), got {q}")
    if isinstance(pred, tn.Tensor):
        diff = target - pred
        return diff * q + tn.relu(-diff)
    diff = np.asarray(target, dtype=np.float64) - np.asarray(pred, dtype=np.float64)
    out = np.where(diff >= 0, q * diff, (q - 1.0) * diff)
    return float(out) if out.ndim == 0 else out


def entry_weights(eval_mask, whiten_mask, w_whiten):
    """1 on evaluated entries, ``w_whiten`` where they were also hidden from the model."""
    ev = np.asarray(eval_mask).astype(bool)
    wh = np.asarray(whiten_mask).astype(bool) & ev
    return np.where(wh, float(w_whiten), ev.astype(np.float64))


def reconstruction_loss(preds, targets, eval_mask, whiten_mask=None, w_whiten=5.0,
                        quantiles=(0.159, 0.5, 0.841)):
    """Weighted, normalised sum of per-entry quantile losses.

    ``preds`` is ``(..., Q)`` with one head per quantile; ``targets`` and the
    masks have the leading shape.  Raises :class:`EmptyBatchError` when no
    entry carries weight.
    """
    preds = tn.as_tensor(preds)
    targets = np.asarray(targets, dtype=np.float64)
    if whiten_mask is None:
        whiten_mask = np.zeros(targets.shape, dtype=bool)
    weights = entry_weights(eval_mask, whiten_mask, w_whiten)
    total = weights.sum()
    if total <= 0:
        raise EmptyBatchError("no observed entries to score in this batch")
    q = np.asarray(quantiles, dtype=np.float64)
    if preds.shape[-1] != len(q):
        raise ConfigError(f"predictions carry {preds.shape[-1]} heads for {len(q)} quantiles")
    diff = targets[..., None] - preds
    per_head = diff * q + tn.relu(-diff)
    return tn.sum_(per_head * (weights[..., None] / total))


def mae_loss(preds, targets, eval_mask, whiten_mask=None, w_whiten=5.0):
    """Weighted mean absolute error for single-head predictions ``(..., 1)``."""
    preds = tn.as_tensor(preds)
    targets = np.asarray(targets, dtype=np.float64)
    if whiten_mask is None:
        whiten_mask = np.zeros(targets.shape, dtype=bool)
    weights = entry_weights(eval_mask, whiten_mask, w_whiten)
    total = weights.sum()
    if total <= 0:
        raise EmptyBatchError("no observed entries to score in this batch")
    err = tn.abs_(preds - targets[..., None])
    return tn.sum_(err * (weights[..., None] / total))


def cosine_lr(epoch, max_epochs, lr_max, lr_min=0.0):
    if not 0 <= epoch <= max_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {max_epochs}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * epoch / max_epochs))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update.

    ``params`` maps names to tensors whose ``data`` is replaced (not mutated).
    Missing gradients count as zero.  A non-finite gradient aborts the step
    before anything changes.
    """
    offenders = [name for name, g in grads.items() if g is not None and not np.all(np.isfinite(g))]
    if offenders:
        raise NonFiniteGradientError(f"non-finite gradient in {', '.join(offenders)}", offenders)
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        m = state.m.get(name, 0.0) * beta1 + (1.0 - beta1) * g
        v = state.v.get(name, 0.0) * beta2 + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def clip_grad_norm(grads, max_norm):
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``; returns the norm."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values() if g is not None))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for k, g in grads.items():
            if g is not None:
                grads[k] = g * scale
    return norm


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without a strictly better metric."""

    def __init__(self, patience):
        if patience < 1:
            raise ConfigError("patience must be >= 1")
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.bad_epochs = 0

    def update(self, metric, epoch):
        """Record an epoch; returns ``True`` when training should stop."""
        if metric < self.best:
            self.best, self.best_epoch, self.bad_epochs = metric, epoch, 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    @property
    def improved(self):
        return self.bad_epochs == 0


@dataclass
class TrainConfig:
    lr: float = 0.001
    max_epochs: int = 500
    patience: int = 30
    batch_size: int = 32
    t_w: int = 24
    p_whiten_channels: float = 0.3
    p_whiten_points: float = 0.05
    w_whiten: float = 5.0
    quantiles: tuple = (0.159, 0.5, 0.841)
    seed: int = 0
    lr_min: float = 0.0
    clip_norm: float = 5.0

    def __post_init__(self):
        self.quantiles = tuple(float(q) for q in self.quantiles)
        for name in ("p_whiten_channels", "p_whiten_points"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.w_whiten < 1:
            raise ConfigError("w_whiten must be >= 1")
        for name in ("max_epochs", "patience", "batch_size", "t_w"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")

    def to_dict(self):
        d = asdict(self)
        d["quantiles"] = list(self.quantiles)
        return d


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_mre: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def append(self, epoch, loss, val, lr):
        self.epochs.append(epoch)
        self.train_loss.append(loss)
        self.val_mre.append(val)
        self.lr.append(lr)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_mre", "lr"])
            for row in zip(self.epochs, self.train_loss, self.val_mre, self.lr):
                w.writerow([row[0], *(repr(float(v)) for v in row[1:])])

    def __eq__(self, other):
        return isinstance(other, TrainHistory) and asdict(self) == asdict(other)


def snapshot(params):
    return {k: p.data.copy() for k, p in params.items()}


def restore(params, saved):
    for k, v in saved.items():
        params[k].data = v.copy()


def model_loss(model, x, input_mask, targets, eval_mask, whiten_mask, w_whiten, params=None):
    """Forward pass plus the loss that matches the model's output heads."""
    preds = model.forward(x, input_mask, params=params)
    if getattr(model, "loss_kind", "quantile") == "mae":
        return mae_loss(preds, targets, eval_mask, whiten_mask, w_whiten)
    return reconstruction_loss(preds, targets, eval_mask, whiten_mask, w_whiten, model.quantiles)


def predict_series(model, values, input_mask, t_w, params=None, batch_size=64):
    """Full-length ``(N, T, D, Q)`` predictions from non-overlapping windows."""
    values = np.asarray(values, dtype=np.float64)
    v, m, _ = cut_windows(values, np.asarray(input_mask), t_w)
    chunks = []
    with tn.no_grad():
        for start in range(0, len(v), batch_size):
            chunks.append(model.forward(v[start:start + batch_size], m[start:start + batch_size],
                                        params=params).data)
    return stitch_windows(np.concatenate(chunks, axis=0), values.shape[1])


def validation_mre(model, ds, split, t_w, stats=None, params=None):
    """MRE on validation channels in original units; validation channels are never shown."""
    visible = split.entry_mask(TRAIN, ds.mask)
    target = split.entry_mask(VAL, ds.mask)
    if not target.any():
        return math.nan
    q = predict_series(model, ds.values, visible, t_w, params)
    point = q[..., _median_index(model, q.shape[-1])]
    truth = ds.values
    if stats is not None:
        point, truth = stats.inverse(point), stats.inverse(truth)
    try:
        return mre(point, truth, target)
    except UndefinedMetricError:
        return math.nan


def _median_index(model, n_heads):
    if n_heads == 1:
        return 0
    return int(np.argmin(np.abs(np.asarray(model.quantiles) - 0.5)))


def train(model, ds, split, config: TrainConfig, stats=None, callback=None):
    """Fit ``model.params`` on train channels with whitening; returns ``(best_params, history)``.

    ``ds`` must already be standardized; ``stats`` (the standardization) is
    only used to report the validation MRE in original units.  The model's
    parameters are left at the best validation epoch.
    """
    rng = np.random.default_rng(config.seed)
    avail = ds.mask.astype(bool)
    train_avail = split.entry_mask(TRAIN, avail)
    v, m, _ = cut_windows(ds.values, train_avail.astype(np.uint8), config.t_w)
    params = model.params
    state = AdamState()
    stopper = EarlyStopping(config.patience)
    history = TrainHistory()
    best = snapshot(params)
    has_val = split.entry_mask(VAL, avail).any()
    for epoch in range(config.max_epochs):
        lr = cosine_lr(epoch, config.max_epochs, config.lr, config.lr_min)
        order = rng.permutation(len(v))
        losses, weights = [], []
        for start in range(0, len(order), config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            xb, mb = v[idx], m[idx]
            wm = sample_whitening_mask(mb, split, config.p_whiten_channels,
                                       config.p_whiten_points, rng=rng)
            try:
                loss = model_loss(model, xb, wm.combined, xb, mb, wm.hidden, config.w_whiten)
            except EmptyBatchError:
                continue
            if not np.isfinite(loss.item()):
                restore(params, best)
                raise DivergenceError(f"non-finite loss at epoch {epoch}", params=best)
            for p in params.values():
                p.zero_grad()
            loss.backward()
            grads = {k: p.grad for k, p in params.items()}
            clip_grad_norm(grads, config.clip_norm)
            adam_step(params, grads, state, lr)
            losses.append(loss.item())
            weights.append(len(idx))
        epoch_loss = float(np.average(losses, weights=weights)) if losses else math.nan
        metric = validation_mre(model, ds, split, config.t_w, stats) if has_val else epoch_loss
        history.append(epoch, epoch_loss, metric, lr)
        stop = stopper.update(metric if np.isfinite(metric) else math.inf, epoch)
        if stopper.improved:
            best = snapshot(params)
        if callback is not None:
            callback(epoch, history)
        if stop:
            history.stopped_early = True
            break
    history.best_epoch = stopper.best_epoch
    restore(params, best)
    return copy.deepcopy(best), history
