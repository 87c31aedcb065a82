"""``garnn`` command line: simulate, train, predict, evaluate, explain, verify-theorems.

Every run writes ``manifest.json`` into its output directory with the
resolved configuration, the seed, the argv and SHA-256 hashes of inputs and
artifacts. ``garnn --replay DIR/manifest.json`` re-runs the recorded argv and
checks that every artifact comes out bit-identical.

Failures print one line to stderr, ``garnn: error <CODE>: <message>``, and
exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .autodiff import NonFiniteError, ShapeError
from .data import (DataError, MtsRecord, Normalizer, PreparedData, SplitSpec, encode_timestamp,
                   generate_synthetic, load_csv, make_windows, metadata_path, prepare,
                   read_event_masks, split_record, stack_windows, write_csv, write_event_masks,
                   write_metadata)
from .interpret import (dataset_importance, feature_map, importance_matrix, write_importance_csv,
                        write_ranking_csv)
from .metrics import MetricReport, evaluate as evaluate_metrics, format_table, pool, METRIC_NAMES
from .model import GarnnModel, ModelConfig
from .plotting import (feature_map_figure, loss_curve_figure, prediction_figure, ranking_figure,
                       write_heatmap_svg)
from .training import (TrainConfig, TrainingDiverged, coerce_fields, fit, parse_config_text,
                       write_curve, write_train_config)
from .verify import VerificationReport, verify_model, verify_random

log = logging.getLogger("garnn")

MANIFEST = "manifest.json"
EXIT_VERIFY = 1
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_DIVERGED = 4
EXIT_INTERNAL = 70


class CliError(Exception):
    def __init__(self, code: str, message: str, status: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code
        self.status = status

    def line(self) -> str:
        return f"garnn: error {self.code}: {' '.join(str(self).split())}"


# --- configuration ------------------------------------------------------------------

@dataclass(frozen=True)
class ModelOptions:
    embed_dim: int = 8
    attn_dim: int = 8
    hidden_dim: int = 128
    mlp_hidden: int = 64
    n_layers: int = 1
    variant: str = "gatv2"
    alpha: float = 0.2

    def config(self, n_vars: int) -> ModelConfig:
        return ModelConfig(n_vars=n_vars, **asdict(self))


@dataclass(frozen=True)
class DataOptions:
    T: int = 0  # 0 picks the default for the sampling interval
    H: int = 0
    train_fraction: float = 0.6
    validation_fraction: float = 0.2
    test_fraction: float = 0.2
    days: int = 14
    interval: float = 5.0
    participants: int = 1

    def split(self) -> SplitSpec:
        return SplitSpec(self.train_fraction, self.validation_fraction, self.test_fraction)

    def horizon(self, interval: float) -> tuple[int, int]:
        if self.T and self.H:
            return self.T, self.H
        T, H = (48, 6) if interval <= 5.0 else (16, 2)
        return self.T or T, self.H or H


@dataclass(frozen=True)
class MetricOptions:
    w_hypo: float = 2.5
    w_hyper: float = 2.5


SECTIONS = {"model": ModelOptions, "train": TrainConfig, "data": DataOptions, "metrics": MetricOptions}


@dataclass(frozen=True)
class RunConfig:
    model: ModelOptions = ModelOptions()
    train: TrainConfig = TrainConfig()
    data: DataOptions = DataOptions()
    metrics: MetricOptions = MetricOptions()

    def snapshot(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}


def _section_of(key: str) -> tuple[str, str]:
    if "." in key:
        section, name = key.split(".", 1)
        if section not in SECTIONS:
            raise CliError("E_CONFIG", f"unknown config section {section!r} in {key!r}", EXIT_USAGE)
        return section, name
    hits = [s for s, cls in SECTIONS.items() if any(f.name == key for f in fields(cls))]
    if len(hits) != 1:
        raise CliError("E_CONFIG", f"unknown config key {key!r}", EXIT_USAGE)
    return hits[0], key


def resolve_config(config_path: str | None, overrides: Sequence[str], **flags) -> RunConfig:
    """Defaults, then the config file, then ``--set`` overrides, then explicit flags."""
    values: dict[str, dict[str, str]] = {s: {} for s in SECTIONS}
    items: list[tuple[str, str]] = []
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise CliError("E_INPUT", f"config file not found: {path}")
        try:
            items += list(parse_config_text(path.read_text()).items())
        except ValueError as exc:
            raise CliError("E_CONFIG", f"{path}: {exc}", EXIT_USAGE) from None
    for item in overrides:
        if "=" not in item:
            raise CliError("E_CONFIG", f"--set expects key=value, got {item!r}", EXIT_USAGE)
        k, v = (s.strip() for s in item.split("=", 1))
        items.append((k, v))
    for key, value in items:
        section, name = _section_of(key)
        values[section][name] = value
    for key, value in flags.items():
        if value is not None:
            section, name = _section_of(key)
            values[section][name] = str(value)
    out = {}
    for section, cls in SECTIONS.items():
        try:
            out[section] = coerce_fields(cls, values[section])
        except (ValueError, TypeError) as exc:
            raise CliError("E_CONFIG", f"{section}: {exc}", EXIT_USAGE) from None
    return RunConfig(**out)


# --- helpers ------------------------------------------------------------------------------

def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError("E_INPUT", f"{what} not found: {p}")
    return p


def data_files(paths: Sequence[str]) -> list[Path]:
    """CSV inputs; a directory contributes every data CSV inside it."""
    out = []
    for raw in paths:
        p = _existing(raw, "data path")
        if p.is_dir():
            out += sorted(q for q in p.glob("*.csv") if not q.name.endswith(".events.csv"))
        else:
            out.append(p)
    if not out:
        raise CliError("E_INPUT", "no data CSV files given")
    return out


def load_records(paths: Sequence[Path]) -> list[MtsRecord]:
    records = []
    for p in paths:
        try:
            rec = load_csv(p)
        except DataError as exc:
            raise CliError("E_DATA", f"{p}: {exc}") from None
        events = p.with_name(p.stem + ".events.csv")
        if events.is_file():
            rec.event_masks.update(read_event_masks(events, len(rec)))
        records.append(rec)
    return records


def load_checkpoint(path: str) -> GarnnModel:
    p = _existing(path, "checkpoint")
    try:
        model = GarnnModel.load(p)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise CliError("E_CHECKPOINT", f"{p}: {exc}") from None
    if "normalizer" not in model.meta:
        raise CliError("E_CHECKPOINT", f"{p}: checkpoint carries no normalizer")
    return model


@dataclass
class Split:
    """Windows of one split for one participant, with their wall-clock stamps."""

    participant: str
    X: np.ndarray
    y: np.ndarray
    timestamps: list[str]
    persistence: np.ndarray
    windows: list
    record: MtsRecord


def windows_for(records: Sequence[MtsRecord], norm: Normalizer, names: Sequence[str], T: int, H: int,
                split: SplitSpec, which: str) -> list[Split]:
    out = []
    index = {"train": 0, "validation": 1, "test": 2}
    for rec in records:
        rec = encode_timestamp(rec)
        if rec.names != list(names):
            raise CliError("E_SHAPE", f"{rec.participant}: variables {rec.names} do not match the model's {list(names)}")
        part = rec if which == "all" else split_record(rec, split)[index[which]]
        wins = make_windows(part, norm, T, H)
        if not wins:
            continue
        X, y = stack_windows(wins)
        stamps = [str(rec.timestamps[w.start + T + H - 1]) for w in wins]
        out.append(Split(rec.participant, X, y, stamps, X[:, 0, -1], wins, rec))
    if not out:
        raise CliError("E_DATA", f"no {which} windows of length T+H={T + H} in the given data")
    return out


def _model_context(model: GarnnModel):
    m = model.meta
    return (Normalizer.from_dict(m["normalizer"]), m["names"], int(m["T"]), int(m["H"]),
            SplitSpec(**m["split"]), float(m["interval"]))


# --- subcommands -------------------------------------------------------------------------------

def cmd_simulate(args, cfg: RunConfig, out: Path) -> list[Path]:
    d = cfg.data
    written = []
    for k in range(d.participants):
        pid = f"synthetic-{k}"
        rec = generate_synthetic(cfg.train.seed + k, d.days, d.interval, participant=pid)
        path = out / f"{pid}.csv"
        write_csv(rec, path)
        meta = write_metadata(rec, path, d.split())
        events = out / f"{pid}.events.csv"
        write_event_masks(rec, events)
        written += [path, meta, events]
    return written


def cmd_train(args, cfg: RunConfig, out: Path) -> list[Path]:
    records = load_records(data_files(args.data))
    interval = records[0].interval
    T, H = cfg.data.horizon(interval)
    try:
        data: PreparedData = prepare(records, T, H, cfg.data.split())
    except DataError as exc:
        raise CliError("E_DATA", str(exc)) from None
    if not data.train or not data.validation:
        raise CliError("E_DATA", f"too few rows for T={T}, H={H}: no training or validation windows")
    mcfg = cfg.model.config(len(data.names))
    try:
        result = fit(data.train, data.validation, mcfg, cfg.train, data.normalizer)
    except TrainingDiverged as exc:
        raise CliError("E_DIVERGED", f"epoch {exc.epoch}: {exc}", EXIT_DIVERGED) from None
    model = result.model
    model.meta.update({
        "names": data.names, "T": T, "H": H, "interval": interval,
        "split": asdict(cfg.data.split()), "normalizer": data.normalizer.to_dict(),
        "seed": cfg.train.seed, "best_epoch": result.best_epoch,
    })
    ck = out / "checkpoint.json"
    model.save(ck)
    curve = out / "loss_curve.csv"
    write_curve(result, curve)
    fig = out / "loss_curve.svg"
    loss_curve_figure(result.curve, fig, result.best_epoch)
    tc = out / "train_config.txt"
    write_train_config(cfg.train, tc)
    print(f"best epoch {result.best_epoch}, validation RMSE {result.best_val_rmse:.4f} mg/dL")
    return [ck, curve, fig, tc]


def _predict(model: GarnnModel, s: Split, norm: Normalizer) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    try:
        raw = model.predict(s.X)
    except (ShapeError, NonFiniteError) as exc:
        raise CliError("E_SHAPE", str(exc)) from None
    return norm.inverse_target(s.y), norm.inverse_target(raw), norm.inverse_target(s.persistence)


def _write_predictions(path: Path, stamps, y, y_hat) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "y", "y_hat"])
        for ts, a, b in zip(stamps, y, y_hat):
            w.writerow([ts, repr(float(a)), repr(float(b))])


def cmd_predict(args, cfg: RunConfig, out: Path) -> list[Path]:
    model = load_checkpoint(args.checkpoint)
    norm, names, T, H, split, _ = _model_context(model)
    splits = windows_for(load_records(data_files(args.data)), norm, names, T, H, split, args.split)
    written = []
    for s in splits:
        y, y_hat, _ = _predict(model, s, norm)
        path = out / ("predictions.csv" if len(splits) == 1 else f"predictions.{s.participant}.csv")
        _write_predictions(path, s.timestamps, y, y_hat)
        written.append(path)
    return written


def cmd_evaluate(args, cfg: RunConfig, out: Path) -> list[Path]:
    records = load_records(data_files(args.data))
    results: dict[str, dict[str, dict[str, MetricReport]]] = {"garnn": {}, "persistence": {}}
    first = None
    for ck in args.checkpoint:
        model = load_checkpoint(ck)
        norm, names, T, H, split, interval = _model_context(model)
        seed = str(model.meta.get("seed", ck))
        if seed in results["garnn"]:
            seed = f"{seed}:{ck}"
        for s in windows_for(records, norm, names, T, H, split, args.split):
            y, y_hat, pers = _predict(model, s, norm)
            m = cfg.metrics
            results["garnn"].setdefault(seed, {})[s.participant] = evaluate_metrics(
                y, y_hat, interval, H, m.w_hypo, m.w_hyper)
            results["persistence"].setdefault(seed, {})[s.participant] = evaluate_metrics(
                y, pers, interval, H, m.w_hypo, m.w_hyper)
            if first is None:
                first = (y, y_hat, pers, interval)
    path = out / "metrics.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "seed", "participant", *METRIC_NAMES, "n"])
        for method, per_seed in results.items():
            for seed, per in per_seed.items():
                for part, rep in per.items():
                    w.writerow([method, seed, part, *(repr(float(getattr(rep, k))) for k in METRIC_NAMES), rep.n])
    pooled = {method: pool(r) for method, r in results.items()}
    ours, base = pooled["garnn"]["rmse"].mean, pooled["persistence"]["rmse"].mean
    improvement = 1.0 - ours / base if base > 0 else float("nan")
    table = out / "metrics.txt"
    table.write_text(format_table(pooled) + f"\nRMSE improvement over persistence: {100 * improvement:.2f}%\n")
    fig = out / "predictions.svg"
    y, y_hat, pers, interval = first
    prediction_figure(y, y_hat, fig, interval, pers)
    sys.stdout.write(table.read_text())
    if args.min_improvement is not None and not improvement >= args.min_improvement:
        args._after_manifest = CliError(
            "E_VERIFY", f"RMSE improvement {improvement:.4f} below required {args.min_improvement}", EXIT_VERIFY)
    return [path, table, fig]


def cmd_explain(args, cfg: RunConfig, out: Path) -> list[Path]:
    records = load_records(data_files(args.data))
    if args.untrained:
        first = encode_timestamp(records[0])
        names = first.names
        interval = first.interval
        T, H = cfg.data.horizon(interval)
        split = cfg.data.split()
        train_parts = [split_record(encode_timestamp(r), split)[0].values for r in records]
        norm = Normalizer.fit(train_parts, names)
        mcfg = cfg.model.config(len(names))
        model = (GarnnModel.zeros(mcfg) if args.untrained == "zero"
                 else GarnnModel.initialize(mcfg, cfg.train.seed))
    else:
        model = load_checkpoint(args.checkpoint)
        norm, names, T, H, split, interval = _model_context(model)
    splits = windows_for(records, norm, names, T, H, split, args.split)
    X = np.concatenate([s.X for s in splits])
    V = importance_matrix(model, X)
    k = args.example
    if not 0 <= k < len(X):
        raise CliError("E_INPUT", f"--example {k} out of range for {len(X)} windows")
    ranking = dataset_importance(V, names)
    mean = V.mean(axis=0)
    tag = f"{model.config.variant.upper()}, L={model.config.n_layers}"
    written = []
    p = out / "importance.csv"
    write_importance_csv(V[k], names, p)
    written.append(p)
    p = out / "importance_mean.csv"
    write_importance_csv(mean, names, p)
    written.append(p)
    p = out / "heatmap.svg"
    write_heatmap_svg(feature_map(V[k]), names, p, title=f"variable importance, window {k} ({tag})")
    written.append(p)
    p = out / "heatmap_mean.svg"
    write_heatmap_svg(feature_map(mean), names, p, title=f"mean variable importance over {len(X)} windows ({tag})")
    written.append(p)
    p = out / "ranking.csv"
    write_ranking_csv(ranking, p)
    written.append(p)
    p = out / "ranking.svg"
    ranking_figure(ranking, p, title=f"{args.split} windows ({tag})")
    written.append(p)
    p = out / "example.svg"
    raw = norm.inverse_transform(X[k].T).T
    feature_map_figure(feature_map(V[k]), names, p, series=raw[:1], series_names=[names[0]],
                       title=f"window {k} ({tag})")
    written.append(p)
    for r, name in enumerate(ranking.ordered_names(), start=1):
        print(f"{r}. {name} {ranking.values[names.index(name)]:+.6f}")
    return written


def cmd_verify(args, cfg: RunConfig, out: Path) -> list[Path]:
    variants = ("gat", "gatv2") if args.variant is None else (cfg.model.variant,)
    alphas = (0.0, 0.2, 0.5, 1.0) if args.alpha is None else (cfg.model.alpha,)
    report = verify_random(args.draws, variants, alphas, cfg.model.n_layers, cfg.train.seed)
    cases = list(report.cases)
    labels = ["random"] * len(cases)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        if not args.data:
            raise CliError("E_INPUT", "--checkpoint needs --data", EXIT_USAGE)
        norm, names, T, H, split, _ = _model_context(model)
        splits = windows_for(load_records(data_files(args.data)), norm, names, T, H, split, args.split)
        case = verify_model(model, np.concatenate([s.X for s in splits]))
        report.cases.append(case)
        cases.append(case)
        labels.append("checkpoint")
    gap = out / "gap_report.csv"
    with gap.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "variant", "alpha", "draws", "cells", "max_abs_gap", "min_gap",
                    "max_violation", "bound_failures", "negative_gaps", "passed"])
        for src, c in zip(labels, cases):
            w.writerow([src, c.variant, c.alpha, c.draws, c.cells, repr(c.max_abs_gap), repr(c.min_gap),
                        repr(c.max_violation), c.bound_failures, c.negative_gaps, c.gap_passed])
    static = out / "static_ranking.csv"
    with static.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "variant", "alpha", "timesteps", "violations", "passed"])
        for src, c in zip(labels, cases):
            w.writerow([src, c.variant, c.alpha, c.ranking_checked, c.ranking_failures, c.ranking_passed])
    summary = out / "summary.txt"
    lines = [f"[{src}] {line}" for src, c in zip(labels, cases)
             for line in _case_lines(c)]
    lines.append(f"max gap: {max(c.max_abs_gap for c in cases):.3e}")
    lines.append(f"overall: {'PASS' if report.passed else 'FAIL'}")
    summary.write_text("\n".join(lines) + "\n")
    sys.stdout.write(summary.read_text())
    written = [gap, static, summary]
    if not report.passed:
        args._after_manifest = CliError("E_VERIFY", "theorem verification failed; see summary.txt", EXIT_VERIFY)
    return written


def _case_lines(c) -> list[str]:
    return VerificationReport([c]).summary_lines()[:-1]


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "verify-theorems": cmd_verify,
}


# --- argument parsing and dispatch -----------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("E_USAGE", message, EXIT_USAGE)


def _common(p: argparse.ArgumentParser, out_default: str) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="random seed (train.seed)")
    p.add_argument("--out", default=out_default, help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. train.l2=1e-4 (repeatable)")
    p.add_argument("--alpha", type=float, help="LeakyReLU negative slope")
    p.add_argument("--layers", type=int, choices=(1, 2), help="number of graph attention layers")
    p.add_argument("--variant", choices=("gat", "gatv2"), help="attention scoring function")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="garnn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"garnn {__version__}")
    parser.add_argument("--replay", metavar="MANIFEST",
                        help="re-run a recorded command and compare artifact hashes")
    parser.add_argument("--replay-out", metavar="DIR", help="output directory for --replay")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("simulate", help="write a synthetic dataset with event masks")
    _common(p, "runs/simulate")
    p.add_argument("--days", type=int, help="days per participant (data.days)")
    p.add_argument("--interval", type=float, help="minutes between samples (data.interval)")
    p.add_argument("--participants", type=int, help="number of synthetic participants")

    p = sub.add_parser("train", help="fit a model and save a checkpoint")
    _common(p, "runs/train")
    p.add_argument("--data", nargs="+", required=True, help="CSV files or directories")

    p = sub.add_parser("predict", help="write forecasts for one split")
    _common(p, "runs/predict")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--split", choices=("train", "validation", "test", "all"), default="test")

    p = sub.add_parser("evaluate", help="metrics against the persistence baseline")
    _common(p, "runs/evaluate")
    p.add_argument("--checkpoint", nargs="+", required=True, help="one checkpoint per seed")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--split", choices=("train", "validation", "test", "all"), default="test")
    p.add_argument("--min-improvement", type=float,
                   help="fail unless RMSE improves on persistence by at least this fraction")

    p = sub.add_parser("explain", help="variable importance, heatmaps and ranking")
    _common(p, "runs/explain")
    p.add_argument("--checkpoint")
    p.add_argument("--untrained", choices=("zero", "random"),
                   help="explain a freshly built model instead of a checkpoint")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--split", choices=("train", "validation", "test", "all"), default="train")
    p.add_argument("--example", type=int, default=0, help="window index for the per-example map")

    p = sub.add_parser("verify-theorems", help="randomized ranking and gap-bound checks")
    _common(p, "runs/verify")
    p.add_argument("--draws", type=int, default=1000)
    p.add_argument("--checkpoint", help="also check a trained model's traces")
    p.add_argument("--data", nargs="+")
    p.add_argument("--split", choices=("train", "validation", "test", "all"), default="test")
    return parser


def _flags(args) -> dict:
    flags = {"train.seed": args.seed, "model.alpha": args.alpha, "model.n_layers": args.layers,
             "model.variant": args.variant}
    for name in ("days", "interval", "participants"):
        if hasattr(args, name):
            flags[f"data.{name}"] = getattr(args, name)
    return flags


def write_manifest(out: Path, argv: Sequence[str], args, cfg: RunConfig, inputs: Sequence[Path],
                   artifacts: Sequence[Path]) -> Path:
    doc = {
        "format": "garnn-manifest",
        "version": 1,
        "garnn": __version__,
        "command": args.command,
        "argv": list(argv),
        "cwd": str(Path.cwd()),
        "seed": cfg.train.seed,
        "config": cfg.snapshot(),
        "inputs": {str(p): sha256(p) for p in inputs},
        "artifacts": {p.relative_to(out).as_posix(): sha256(p) for p in artifacts},
    }
    path = out / MANIFEST
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _inputs(args) -> list[Path]:
    paths = []
    if args.config:
        paths.append(Path(args.config))
    for attr in ("checkpoint",):
        v = getattr(args, attr, None)
        for c in ([v] if isinstance(v, str) else v or []):
            paths.append(Path(c))
    if getattr(args, "data", None):
        for p in data_files(args.data):
            paths.append(p)
            if metadata_path(p).is_file():
                paths.append(metadata_path(p))
    return paths


def execute(argv: Sequence[str]) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.replay:
        return replay(args.replay, args.replay_out)
    if not args.command:
        raise CliError("E_USAGE", "a subcommand is required", EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    if args.command == "explain" and not (args.checkpoint or args.untrained):
        raise CliError("E_USAGE", "explain needs --checkpoint or --untrained", EXIT_USAGE)
    cfg = resolve_config(args.config, args.set, **_flags(args))
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError("E_OUTPUT", f"cannot create {out}: {exc}") from None
    inputs = _inputs(args)
    artifacts = COMMANDS[args.command](args, cfg, out)
    write_manifest(out, argv, args, cfg, inputs, artifacts)
    pending = getattr(args, "_after_manifest", None)
    if pending is not None:
        raise pending
    return 0


def replay(manifest_path: str, out_dir: str | None = None) -> int:
    """Re-run the argv stored in a manifest and compare artifact hashes."""
    path = _existing(manifest_path, "manifest")
    try:
        doc = json.loads(path.read_text())
        argv = list(doc["argv"])
        expected = doc["artifacts"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise CliError("E_MANIFEST", f"{path}: {exc}") from None
    for name, digest in doc.get("inputs", {}).items():
        p = Path(doc.get("cwd", ".")) / name
        if not p.is_file() or sha256(p) != digest:
            raise CliError("E_REPLAY", f"input {name} is missing or changed since the recorded run", EXIT_VERIFY)
    target = Path(out_dir) if out_dir else Path(tempfile.mkdtemp(prefix="garnn-replay-"))
    target = target.resolve()
    argv = _with_out(argv, str(target))
    here = Path.cwd()
    os.chdir(doc.get("cwd", here))
    try:
        execute(argv)
    except CliError as exc:
        if exc.code != "E_VERIFY":
            raise
    finally:
        os.chdir(here)
    redo = json.loads((target / MANIFEST).read_text())["artifacts"]
    differ = sorted(k for k in set(expected) | set(redo) if expected.get(k) != redo.get(k))
    if differ:
        raise CliError("E_REPLAY", f"artifacts differ from the manifest: {', '.join(differ)}", EXIT_VERIFY)
    print(f"replay OK: {len(expected)} artifacts identical ({target})")
    return 0


def _with_out(argv: list[str], out: str) -> list[str]:
    res, skip = [], False
    for i, a in enumerate(argv):
        if skip:
            skip = False
            continue
        if a == "--out":
            skip = True
            continue
        if a.startswith("--out="):
            continue
        res.append(a)
    return res + ["--out", out]


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        return execute(argv)
    except CliError as exc:
        print(exc.line(), file=sys.stderr)
        return exc.status
    except DataError as exc:
        print(CliError("E_DATA", str(exc)).line(), file=sys.stderr)
        return EXIT_INPUT
    except (ShapeError, NonFiniteError) as exc:
        print(CliError("E_SHAPE" if isinstance(exc, ShapeError) else "E_NONFINITE", str(exc)).line(),
              file=sys.stderr)
        return EXIT_INPUT
    except KeyboardInterrupt:
        print("garnn: error E_INTERRUPTED: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # last resort: keep the one-line contract
        print(CliError("E_INTERNAL", f"{type(exc).__name__}: {exc}").line(), file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
