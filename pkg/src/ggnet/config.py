"""Run configuration: one declarative YAML/JSON document with strict keys."""

from __future__ import annotations

import copy
import json
import re
from pathlib import Path

import yaml

from .exceptions import ConfigError


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-3`` (no dot) as a float."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"),
    list("-+0123456789"))


def _yaml(text):
    return yaml.load(text, Loader=_Loader)


MODEL_KINDS = ("ggnet", "rnn", "rnn_bid", "rnn_emb", "rnn_g", "knn", "mean")
_RNN_VARIANTS = {"rnn": "plain", "rnn_bid": "bidirectional", "rnn_emb": "embedded",
                 "rnn_g": "graph"}

DEFAULTS = {
    "dataset": "data/synthetic",
    "output_dir": "runs/default",
    "model": "ggnet",
    "seed": 0,
    "quantiles": [0.159, 0.5, 0.841],
    "split": {"fractions": [0.7, 0.1, 0.2], "seed": 0},
    "ggnet": {
        "hidden": 128,
        "h_e_G": 16,
        "h_e_g": 8,
        "block_pattern": "2(3T-G-g)",
        "kernel_k": 3,
        "dilations": [1, 2, 4],
        "activation": "elu",
        "residual": True,
        "channel_embeddings": True,
    },
    "rnn": {"hidden": 64, "h_e": 16},
    "knn": {"k": None, "candidates": [1, 2, 3, 5, 10]},
    "train": {
        "lr": 0.001,
        "max_epochs": 500,
        "patience": 30,
        "batch_size": 32,
        "t_w": 24,
        "p_whiten_channels": 0.3,
        "p_whiten_points": 0.05,
        "w_whiten": 5.0,
    },
    "synthetic": {
        "N": 20,
        "T": 512,
        "D": 4,
        "latent_dim": 2,
        "n_clusters": 3,
        "noise_std": 0.05,
        "location_dynamic_std": 0.0,
        "cluster_channel_weight": 0.0,
    },
    "fetch": {
        "start": "2020-01-01",
        "end": "2020-12-31",
        "resolution": "daily",
        "parameters": None,
        "locations": None,
        "fixtures": None,
        "base_url": None,
        "rate_limit": 1.0,
        "retries": 3,
    },
}

_DESCRIPTIONS = {
    "dataset": "dataset directory (read by train/evaluate/impute, written by generate/fetch)",
    "output_dir": "directory for every artifact of the run",
    "model": "one of " + ", ".join(MODEL_KINDS),
    "seed": "model initialisation and training seed",
    "split.fractions": "train/val/test fractions of the available channels",
    "split.seed": "seed of the channel split",
    "knn.k": "neighbours; null selects k on validation MRE",
    "fetch.parameters": "parameter codes; null uses the full catalogue",
    "fetch.locations": "CSV with location_id,lat,lon; null uses the bundled capitals",
    "fetch.fixtures": "directory of recorded JSON responses (offline mode)",
    "fetch.base_url": "endpoint override; also read from GGNET_POWER_BASE_URL",
}


def flatten(cfg, prefix=""):
    out = {}
    for key, value in cfg.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(flatten(value, name + "."))
        else:
            out[name] = value
    return out


def describe_keys():
    """One line per config key with its default, for ``--help``."""
    lines = []
    for key, value in flatten(DEFAULTS).items():
        line = f"  {key} = {json.dumps(value)}"
        if key in _DESCRIPTIONS:
            line += f"  ({_DESCRIPTIONS[key]})"
        lines.append(line)
    return "\n".join(lines)


def _merge(base, update, path=""):
    for key, value in update.items():
        name = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {name!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {name!r} must be a mapping")
            _merge(base[key], value, name + ".")
        else:
            base[key] = value


def parse_override(text):
    """``"train.lr=0.01"`` -> ``("train.lr", 0.01)``; the value is parsed as YAML."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"--set expects key=value, got {text!r}")
    try:
        value = _yaml(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value for {key!r}: {exc}") from None
    return key.strip(), value


def apply_override(cfg, key, value):
    node = cfg
    *parents, leaf = key.split(".")
    for part in parents:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[part]
    if leaf not in node or isinstance(node[leaf], dict):
        raise ConfigError(f"unknown config key {key!r}")
    node[leaf] = value


def load_config(path=None, overrides=()):
    """Defaults, updated by the file at ``path``, then by ``key=value`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
        try:
            doc = _yaml(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML/JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _merge(cfg, doc)
    for item in overrides:
        apply_override(cfg, *parse_override(item))
    validate(cfg)
    return cfg


def validate(cfg):
    if cfg["model"] not in MODEL_KINDS:
        raise ConfigError(f"model must be one of {MODEL_KINDS}, got {cfg['model']!r}")
    if not isinstance(cfg["seed"], int) or not isinstance(cfg["split"]["seed"], int):
        raise ConfigError("seeds must be integers")
    # the typed configs carry the detailed range checks
    build_estimator(cfg)


def build_estimator(cfg):
    """The unfitted estimator described by ``cfg``; ``seed`` initialises the model."""
    from . import estimators
    from .training import TrainConfig

    kind = cfg["model"]
    common = {"split_fractions": tuple(cfg["split"]["fractions"]), "random_state": cfg["seed"]}
    try:
        if kind == "knn":
            return estimators.GeoKNNImputer(cfg["knn"]["k"], tuple(cfg["knn"]["candidates"]),
                                            **common)
        if kind == "mean":
            return estimators.MeanImputer(**common)
        train = dict(cfg["train"], quantiles=tuple(cfg["quantiles"]))
        TrainConfig(**train)
        if kind == "ggnet":
            est = estimators.GgNetImputer(**cfg["ggnet"], **train, **common)
        else:
            est = estimators.RecurrentImputer(_RNN_VARIANTS[kind], **cfg["rnn"], **train, **common)
        est.model_config()
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return est
