"""Command-line entry point: ``ggnet <command> [--config FILE] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, config as rc, ingestion
from .dataset import LABEL_NAMES, TEST, TRAIN, VAL, split_channels
from .diagnostics import GRAD_TOLERANCE, gradient_suite
from .estimators import GgNetImputer, RecurrentImputer, load_imputer
from .exceptions import ConfigError, DataError, GgNetError, NumericError
from .graphs import export_graphs
from .metrics import evaluate, load_predictions, save_predictions
from .synthetic import SyntheticSpec, generate

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CHECKPOINT = "checkpoint.zip"
_LABELS = {"train": TRAIN, "val": VAL, "test": TEST}

log = logging.getLogger("ggnet")


class _Run:
    """Collects artifacts and writes the per-command manifest."""

    def __init__(self, command, cfg, args):
        self.command = command
        self.cfg = cfg
        self.overrides = list(args.set or [])
        self.config_path = args.config
        self.out = Path(cfg["output_dir"])
        self.artifacts = []
        self.extra = {}
        self.started = datetime.now(timezone.utc)
        self._t0 = time.perf_counter()

    def add(self, *paths):
        self.artifacts.extend(str(p) for p in paths)

    def finish(self):
        self.out.mkdir(parents=True, exist_ok=True)
        manifest = {
            "command": self.command,
            "version": __version__,
            "config": self.cfg,
            "config_file": self.config_path,
            "overrides": self.overrides,
            "seed": self.cfg["seed"],
            "split_seed": self.cfg["split"]["seed"],
            "started": self.started.isoformat(),
            "wall_time_s": time.perf_counter() - self._t0,
            "artifacts": self.artifacts,
            **self.extra,
        }
        path = self.out / f"manifest_{self.command.replace('-', '_')}.json"
        path.write_text(json.dumps(manifest, indent=2, default=str) + "\n")
        return path


# --------------------------------------------------------------------- helpers

def _load_split(ds, cfg):
    return split_channels(ds, cfg["split"]["fractions"], cfg["split"]["seed"])


def _write_split(path, split, ds):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["location_id", "channel", "label"])
        for n, d in np.ndindex(split.assignment.shape):
            w.writerow([ds.location_ids[n], ds.channel_names[d],
                        LABEL_NAMES[int(split.assignment[n, d])]])


def _checkpoint_path(args, cfg):
    return Path(args.checkpoint) if args.checkpoint else Path(cfg["output_dir"]) / CHECKPOINT


def _read_locations(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        return [{"location_id": r["location_id"], "lat": float(r["lat"]), "lon": float(r["lon"])}
                for r in rows]
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: location table needs location_id, lat, lon ({exc})") from None


# --------------------------------------------------------------------- commands

def cmd_generate(args, cfg, run):
    spec = SyntheticSpec(**cfg["synthetic"], seed=cfg["seed"])
    ds, _ = generate(spec)
    path = ingestion.save_dataset(ds, cfg["dataset"])
    run.add(path / "data.csv", path / "meta.json")
    print(f"wrote synthetic dataset {ds.shape} to {path}")


def cmd_fetch(args, cfg, run):
    f = cfg["fetch"]
    if f["locations"]:
        locations = _read_locations(f["locations"])
    else:
        locations = ingestion.world_capitals()
    params = f["parameters"] or [r["code"] for r in ingestion.parameter_catalogue(f["resolution"])]
    reqs = [ingestion.PowerRequest(r["lat"], r["lon"], f["start"], f["end"], tuple(params),
                                   f["resolution"], location_id=r["location_id"])
            for r in locations]
    ds, report = ingestion.fetch_power(reqs, rate_limit=f["rate_limit"], retries=f["retries"],
                                       fixtures=f["fixtures"], url=f["base_url"])
    path = ingestion.save_dataset(ds, cfg["dataset"])
    run.out.mkdir(parents=True, exist_ok=True)
    report_path = run.out / "fetch_report.json"
    report_path.write_text(json.dumps({"succeeded": report.succeeded,
                                       "failures": report.failures}, indent=2) + "\n")
    run.add(path / "data.csv", path / "meta.json", report_path)
    print(f"fetched {len(report.succeeded)} locations, {len(report.failures)} failed")
    if not report.succeeded and reqs:
        raise DataError("every location failed to download")


def cmd_train(args, cfg, run):
    ds = ingestion.load_dataset(cfg["dataset"])
    split = _load_split(ds, cfg)
    est = rc.build_estimator(cfg)
    est.fit(ds, split=split)
    run.out.mkdir(parents=True, exist_ok=True)
    ckpt = est.save(run.out / CHECKPOINT)
    split_path = run.out / "split.csv"
    _write_split(split_path, split, ds)
    run.add(ckpt, split_path)
    if hasattr(est, "history_"):
        hist = run.out / "history.csv"
        est.history_.to_csv(hist)
        run.add(hist)
        run.extra["best_epoch"] = est.history_.best_epoch
        run.extra["epochs_run"] = len(est.history_.epochs)
    run.extra["split_counts"] = split.counts()
    print(f"trained {cfg['model']} on {ds.shape}; checkpoint {ckpt}")


def _score(pred, ds, split, label, run, prefix):
    report = evaluate(pred, ds.values, split.entry_mask(label, ds.mask),
                      ds.channel_names, ds.location_ids)
    run.out.mkdir(parents=True, exist_ok=True)
    report.to_json(run.out / f"{prefix}.json")
    for axis in ("channel", "location"):
        report.to_csv(run.out / f"{prefix}_{axis}.csv", axis)
    run.add(*(run.out / f"{prefix}{suffix}"
              for suffix in (".json", "_channel.csv", "_location.csv")))
    run.extra["global"] = report.summary()
    return report


def cmd_evaluate(args, cfg, run):
    ds = ingestion.load_dataset(cfg["dataset"])
    label = _LABELS[args.label]
    if args.predictions:
        split = _load_split(ds, cfg)
        pred = load_predictions(args.predictions, ds.location_ids, ds.timestamps,
                                ds.channel_names)
        prefix = args.name or "metrics_external"
    else:
        est = load_imputer(_checkpoint_path(args, cfg), ds)
        split = est.split_
        pred = est.predict(ds)
        prefix = args.name or "metrics"
    report = _score(pred, ds, split, label, run, prefix)
    summary = report.summary()
    print(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                   for k, v in summary.items()))


def cmd_impute(args, cfg, run):
    ds = ingestion.load_dataset(cfg["dataset"])
    est = load_imputer(_checkpoint_path(args, cfg), ds)
    if args.target == "missing":
        pred = est.predict(ds, visible="observed")
        pred = pred.restricted(ds.mask == 0)
    else:
        pred = est.predict(ds)
        pred = pred.restricted(est.split_.entry_mask(_LABELS[args.target], ds.mask))
    run.out.mkdir(parents=True, exist_ok=True)
    path = Path(args.output) if args.output else run.out / f"predictions_{args.target}.csv"
    save_predictions(pred, path, ds.location_ids, ds.timestamps, ds.channel_names)
    run.add(path)
    print(f"wrote {int(pred.valid.sum())} predictions to {path}")


def cmd_gradcheck(args, cfg, run):
    report = gradient_suite(seed=cfg["seed"], epsilon=args.epsilon)
    report.tolerance = args.tolerance
    run.out.mkdir(parents=True, exist_ok=True)
    path = run.out / "gradcheck.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["module", "max_relative_error", "passed"])
        for name, err, ok in report.to_rows():
            w.writerow([name, repr(float(err)), int(ok)])
            print(f"{'PASS' if ok else 'FAIL'} {name} {err:.3e}")
    run.add(path)
    run.extra["gradcheck_seconds"] = report.seconds
    run.extra["gradcheck_worst"] = report.worst
    print(f"worst {report.worst:.3e} in {report.seconds:.1f}s")
    if not report.passed:
        raise NumericError(f"gradient check above {args.tolerance:g}: "
                           + ", ".join(report.failures))


def cmd_export_graphs(args, cfg, run):
    ds = ingestion.load_dataset(cfg["dataset"])
    est = load_imputer(_checkpoint_path(args, cfg), ds)
    if isinstance(est, GgNetImputer):
        A_G, A_g = est.adjacencies()
        E_G = est.embeddings_
    elif isinstance(est, RecurrentImputer):
        adj = est.model_.adjacency()
        A_G, A_g = (None if adj is None else adj.data), None
        E_G = est.model_.embeddings()
    else:
        raise ConfigError(f"{type(est).__name__} has no learned graphs")
    out = Path(args.output) if args.output else run.out / "graphs"
    paths = export_graphs(out, A_G, A_g, E_G, ds.location_ids, ds.channel_names)
    run.add(*paths)
    print(f"wrote {', '.join(p.name for p in paths)} to {out}")


COMMANDS = {
    "generate": (cmd_generate, "write a synthetic dataset directory"),
    "fetch": (cmd_fetch, "download (or replay) POWER point series into a dataset directory"),
    "train": (cmd_train, "fit the configured model; writes checkpoint, history and split"),
    "evaluate": (cmd_evaluate, "score a checkpoint or an external prediction CSV"),
    "impute": (cmd_impute, "write three-quantile predictions as CSV"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of every differentiable module"),
    "export-graphs": (cmd_export_graphs, "write learned A_G, A_g and E_G as CSV"),
}


def build_parser():
    epilog = "config keys (dotted path = default):\n" + rc.describe_keys()
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="ggnet", epilog=epilog, formatter_class=fmt,
                                     description="Nested-graph virtual sensing toolkit.")
    parser.add_argument("--version", action="version", version=f"ggnet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=epilog,
                           formatter_class=fmt)
        p.add_argument("--config", "-c", help="YAML or JSON run configuration")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("evaluate", "impute", "export-graphs"):
            p.add_argument("--checkpoint", help=f"defaults to <output_dir>/{CHECKPOINT}")
        if name == "evaluate":
            p.add_argument("--predictions", help="external prediction CSV to score instead")
            p.add_argument("--label", choices=list(_LABELS), default="test")
            p.add_argument("--name", help="basename of the metric files")
        if name == "impute":
            p.add_argument("--target", choices=["missing", "test", "val", "train"],
                           default="missing",
                           help="missing: fill unobserved entries from everything observed; "
                                "test/val/train: predict those channels from train channels")
            p.add_argument("--output", help="prediction CSV path")
        if name == "export-graphs":
            p.add_argument("--output", help="directory for the CSV files")
        if name == "gradcheck":
            p.add_argument("--tolerance", type=float, default=GRAD_TOLERANCE)
            p.add_argument("--epsilon", type=float, default=1e-6)
    return parser


def _exit_code(exc):
    if isinstance(exc, OSError):
        return EXIT_DATA
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    return EXIT_DATA


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler, _ = COMMANDS[args.command]
    run = None
    try:
        cfg = rc.load_config(args.config, args.set or ())
        run = _Run(args.command, cfg, args)
        handler(args, cfg, run)
    except (GgNetError, OSError) as exc:
        print(f"ERROR {type(exc).__name__}: {exc}", file=sys.stderr)
        if run is not None:
            run.extra["error"] = f"{type(exc).__name__}: {exc}"
            _try_finish(run)
        return _exit_code(exc)
    run.finish()
    return EXIT_OK


def _try_finish(run):
    try:
        run.finish()
    except OSError:
        pass

if __name__ == "__main__":
    sys.exit(main())
