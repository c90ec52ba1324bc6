"""Experiment front-end: strict JSON configs, seeded runs, metric files and comparisons."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .calibration import CalibrationPlan, write_features_csv
from .data import (
    LabeledDataset,
    apply_longtail,
    dirichlet_partition,
    load_idx,
    make_blobs,
    write_partition_manifest,
)
from .mfsc import write_coverage_csv
from .nn_core import DivergenceError, save_checkpoint
from .orchestrator import (
    METHODS,
    SELECTIONS,
    FederationConfig,
    RoundMetrics,
    Stage1Result,
    evaluate,
    run_stage1,
    run_stage2,
)

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class ConfigError(ValueError):
    """Base class for configuration problems (CLI exit code 1)."""


class ConfigFileError(ConfigError):
    pass


class ConfigSyntaxError(ConfigError):
    pass


class UnknownKeyError(ConfigError):
    pass


class ConfigTypeError(ConfigError):
    pass


class ConfigRangeError(ConfigError):
    pass


class RunError(RuntimeError):
    """A (method, seed) run failed; carries the run context (CLI exit code 2)."""


@dataclass(frozen=True)
class BlobsSpec:
    num_classes: int = 10
    d_in: int = 10
    n_max: int = 5000
    test_per_class: int = 500
    class_center_spread: float = 2.0
    within_class_std: float = 1.0


@dataclass(frozen=True)
class IdxSpec:
    train_images: Path
    train_labels: Path
    test_images: Path
    test_labels: Path
    n_max: int | None = None


@dataclass(frozen=True)
class ExperimentSpec:
    dataset: BlobsSpec | IdxSpec
    federation: FederationConfig
    methods: tuple[str, ...]
    seeds: tuple[int, ...]
    output_dir: Path
    imbalance_factor: float = 50.0
    alpha: float = 0.5
    block_size: int = 50
    thresholds: tuple[float, ...] = (0.5, 0.6, 0.7)
    dump_coverage: bool = False
    dump_features: bool = False
    save_partition: bool = False
    save_checkpoint: bool = False


# ---------------------------------------------------------------- parsing

_FEDERATION_KEYS = {
    "num_clients": int, "clients_per_round": int, "rounds": int, "local_epochs": int,
    "local_lr": float, "batch_size": int, "selection": (str, type(None)), "hidden_dims": list,
    "d_feat": int, "mad_threshold": float, "explore_fraction": float, "mask_radius_factor": float,
}
_CALIBRATION_KEYS = {
    "n_b": int, "n_k": int, "w_b": float, "w_k": float, "retrain_epochs": int, "retrain_lr": float,
}
_BLOBS_KEYS = {
    "kind": str, "num_classes": int, "d_in": int, "n_max": int, "test_per_class": int,
    "class_center_spread": float, "within_class_std": float,
}
_IDX_KEYS = {
    "kind": str, "train_images": str, "train_labels": str, "test_images": str, "test_labels": str,
    "n_max": (int, type(None)),
}
_TOP_KEYS = {
    "dataset": dict, "federation": dict, "calibration": dict, "methods": list, "seeds": list,
    "output_dir": str, "imbalance_factor": float, "alpha": float, "block_size": int,
    "thresholds": list, "dump_coverage": bool, "dump_features": bool, "save_partition": bool,
    "save_checkpoint": bool,
}


def _check_keys(section: dict, allowed: dict, where: str) -> None:
    for key in section:
        if key not in allowed:
            raise UnknownKeyError(f"{where}: unknown key {key!r}")
    for key, want in allowed.items():
        if key not in section:
            continue
        value = section[key]
        types = want if isinstance(want, tuple) else (want,)
        if float in types and isinstance(value, int) and not isinstance(value, bool):
            continue
        if isinstance(value, bool) and bool not in types:
            raise ConfigTypeError(f"{where}.{key}: expected {_type_names(types)}, got a boolean")
        if not isinstance(value, types):
            raise ConfigTypeError(f"{where}.{key}: expected {_type_names(types)}, got {type(value).__name__}")


def _type_names(types) -> str:
    return " or ".join("null" if t is type(None) else t.__name__ for t in types)


def _range(ok: bool, message: str) -> None:
    if not ok:
        raise ConfigRangeError(message)


def _parse_dataset(raw: dict, base: Path) -> BlobsSpec | IdxSpec:
    kind = raw.get("kind", "blobs")
    if kind == "blobs":
        _check_keys(raw, _BLOBS_KEYS, "dataset")
        fields = {k: v for k, v in raw.items() if k != "kind"}
        spec = BlobsSpec(**{k: float(v) if _BLOBS_KEYS[k] is float else v for k, v in fields.items()})
        _range(spec.num_classes >= 2, "dataset.num_classes must be >= 2")
        _range(spec.d_in >= 1, "dataset.d_in must be >= 1")
        _range(spec.n_max >= 1, "dataset.n_max must be >= 1")
        _range(spec.test_per_class >= 1, "dataset.test_per_class must be >= 1")
        _range(spec.class_center_spread > 0, "dataset.class_center_spread must be positive")
        _range(spec.within_class_std >= 0, "dataset.within_class_std must be non-negative")
        return spec
    if kind == "idx":
        _check_keys(raw, _IDX_KEYS, "dataset")
        paths = {}
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if key not in raw:
                raise ConfigError(f"dataset.{key} is required for kind 'idx'")
            path = Path(raw[key])
            path = path if path.is_absolute() else base / path
            if not path.is_file():
                raise ConfigFileError(f"dataset.{key}: file not found: {path}")
            paths[key] = path
        n_max = raw.get("n_max")
        _range(n_max is None or n_max >= 1, "dataset.n_max must be >= 1")
        return IdxSpec(**paths, n_max=n_max)
    raise ConfigRangeError(f"dataset.kind must be 'blobs' or 'idx', got {kind!r}")


def _parse_federation(raw: dict, calib: dict) -> FederationConfig:
    _check_keys(raw, _FEDERATION_KEYS, "federation")
    _check_keys(calib, _CALIBRATION_KEYS, "calibration")
    kw: dict[str, Any] = {}
    for key, value in raw.items():
        if key == "hidden_dims":
            if not all(isinstance(h, int) and not isinstance(h, bool) for h in value):
                raise ConfigTypeError("federation.hidden_dims: expected a list of integers")
            _range(all(h >= 1 for h in value), "federation.hidden_dims entries must be >= 1")
            value = tuple(value)
        elif _FEDERATION_KEYS[key] is float:
            value = float(value)
        kw[key] = value
    if "selection" in kw:
        _range(kw["selection"] is None or kw["selection"] in SELECTIONS,
               f"federation.selection must be one of {SELECTIONS} or null")
    plan_kw = {k: float(v) if _CALIBRATION_KEYS[k] is float else v for k, v in calib.items()}
    try:
        plan = CalibrationPlan(**plan_kw)
    except ValueError as exc:
        raise ConfigRangeError(f"calibration: {exc}") from exc
    try:
        return FederationConfig(plan=plan, **kw)
    except ValueError as exc:
        raise ConfigRangeError(f"federation: {exc}") from exc


def parse_config_text(text: str, base: Path | None = None) -> ExperimentSpec:
    """Parse a JSON config string; relative paths resolve against ``base``."""
    base = base or Path.cwd()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigSyntaxError(f"malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigSyntaxError("top level must be a JSON object")
    _check_keys(raw, _TOP_KEYS, "config")
    dataset = _parse_dataset(raw.get("dataset", {}), base)
    federation = _parse_federation(raw.get("federation", {}), raw.get("calibration", {}))

    methods = raw.get("methods", list(METHODS))
    _range(len(methods) > 0, "methods must be non-empty")
    for m in methods:
        _range(m in METHODS, f"unknown method {m!r}; expected one of {METHODS}")
    seeds = raw.get("seeds", [0])
    _range(len(seeds) > 0, "seeds must be non-empty")
    for s in seeds:
        if not isinstance(s, int) or isinstance(s, bool):
            raise ConfigTypeError("seeds: expected a list of integers")
        _range(s >= 0, "seeds must be non-negative")
    thresholds = raw.get("thresholds", [0.5, 0.6, 0.7])
    for t in thresholds:
        if not isinstance(t, (int, float)) or isinstance(t, bool):
            raise ConfigTypeError("thresholds: expected a list of numbers")
        _range(0 <= t <= 1, "thresholds must lie in [0, 1]")

    imbalance = float(raw.get("imbalance_factor", 50.0))
    _range(imbalance >= 1, "imbalance_factor must be >= 1")
    alpha = float(raw.get("alpha", 0.5))
    _range(alpha > 0, "alpha must be positive")
    block = raw.get("block_size", 50)
    _range(block >= 1, "block_size must be >= 1")
    out = Path(raw.get("output_dir", "runs"))
    return ExperimentSpec(
        dataset=dataset,
        federation=federation,
        methods=tuple(dict.fromkeys(methods)),
        seeds=tuple(dict.fromkeys(seeds)),
        output_dir=out if out.is_absolute() else base / out,
        imbalance_factor=imbalance,
        alpha=alpha,
        block_size=block,
        thresholds=tuple(float(t) for t in thresholds),
        dump_coverage=raw.get("dump_coverage", False),
        dump_features=raw.get("dump_features", False),
        save_partition=raw.get("save_partition", False),
        save_checkpoint=raw.get("save_checkpoint", False),
    )


def parse_config(path: str | Path) -> ExperimentSpec:
    """Strictly parse a JSON experiment config.

    Unknown keys, wrong types and out-of-range values are rejected with
    distinct exception types. Omitted federation settings fall back to
    m=20, R=200, E=10, local_lr=0.1; omitted calibration settings to
    n_b=500, n_k=150, w_b=0.5, w_k=0.1, 100 retraining epochs at lr 0.01.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError as exc:
        raise ConfigFileError(f"config file not found: {path}") from exc
    except OSError as exc:
        raise ConfigFileError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, path.parent)


# ---------------------------------------------------------------- running

def build_data(spec: ExperimentSpec, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Long-tailed training set and balanced test set for one seed."""
    ds = spec.dataset
    if isinstance(ds, BlobsSpec):
        full = make_blobs(ds.num_classes, ds.d_in, [ds.n_max] * ds.num_classes,
                          ds.class_center_spread, ds.within_class_std, seed, split=0)
        test = make_blobs(ds.num_classes, ds.d_in, [ds.test_per_class] * ds.num_classes,
                          ds.class_center_spread, ds.within_class_std, seed, split=1)
        train, _ = apply_longtail(full, spec.imbalance_factor, seed)
        return train, test
    full = load_idx(ds.train_images, ds.train_labels)
    test = load_idx(ds.test_images, ds.test_labels)
    num_classes = max(full.num_classes, test.num_classes)
    full = LabeledDataset(full.inputs, full.labels, num_classes)
    test = LabeledDataset(test.inputs, test.labels, num_classes)
    train, _ = apply_longtail(full, spec.imbalance_factor, seed, ds.n_max)
    return train, test


def run_name(method: str, selection: str, seed: int) -> str:
    return f"{method}__{selection}__seed{seed}"


def config_hash(spec: ExperimentSpec, method: str, seed: int) -> str:
    """SHA-256 over everything that determines one run's results."""
    fed = replace(spec.federation, method=method, seed=seed)
    payload = {
        "dataset": {k: str(v) if isinstance(v, Path) else v for k, v in asdict(spec.dataset).items()},
        "dataset_kind": type(spec.dataset).__name__,
        "imbalance_factor": spec.imbalance_factor,
        "alpha": spec.alpha,
        "block_size": spec.block_size,
        "federation": asdict(fed),
        "selection_rule": fed.selection_rule,
    }
    blob = json.dumps(payload, sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()


def _fmt(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def _json_float(x: float) -> float | None:
    return None if math.isnan(x) else float(x)


def metrics_csv_text(metrics: Sequence[RoundMetrics], num_classes: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "overall_acc", "loss", "selected_ids"] + [f"acc_class_{c}" for c in range(num_classes)])
    for m in metrics:
        w.writerow([m.round, _fmt(m.overall_acc), _fmt(m.loss), ";".join(str(k) for k in m.selected)]
                   + [_fmt(a) for a in m.per_class_acc])
    return buf.getvalue()


def rounds_to_threshold(curve: Sequence[float], threshold: float) -> int | None:
    """First (1-based) round whose accuracy reaches ``threshold``; None if never."""
    for r, acc in enumerate(curve, start=1):
        if acc >= threshold:
            return r
    return None


class _Outputs:
    """Files of one run; removed again if the run fails."""

    def __init__(self):
        self.paths: list[Path] = []

    def path(self, p: Path) -> Path:
        self.paths.append(p)
        return p

    def write_text(self, p: Path, text: str) -> None:
        self.path(p).write_text(text)

    def cleanup(self) -> None:
        for p in reversed(self.paths):
            if p.is_dir():
                for child in p.iterdir():
                    child.unlink()
                p.rmdir()
            elif p.exists():
                p.unlink()


def _run_one(spec, method, seed, train, test, shards, stage1: Stage1Result, out: _Outputs) -> Path:
    config = replace(spec.federation, method=method, seed=seed)
    name = run_name(method, config.selection_rule, seed)
    result = run_stage2(stage1.model, stage1.cache, config, train, shards)
    acc, per_class = evaluate(result.model, test)
    curve = [m.overall_acc for m in stage1.metrics]

    out.write_text(spec.output_dir / f"{name}.csv", metrics_csv_text(stage1.metrics, train.num_classes))
    if spec.dump_coverage and config.selection_rule == "mfsc":
        cov_dir = out.path(spec.output_dir / f"{name}__coverage")
        cov_dir.mkdir(exist_ok=True)
        for m, cov in zip(stage1.metrics, stage1.coverages):
            if cov is not None:
                write_coverage_csv(cov, cov_dir / f"round_{m.round:04d}.csv")
    if spec.dump_features and result.federated is not None:
        write_features_csv(result.federated, out.path(spec.output_dir / f"{name}__features.csv"))
    if spec.save_checkpoint:
        save_checkpoint(result.model, out.path(spec.output_dir / f"{name}__model.ckpt"))

    summary = {
        "method": method,
        "selection": config.selection_rule,
        "seed": seed,
        "config_hash": config_hash(spec, method, seed),
        "num_classes": train.num_classes,
        "final_overall_acc": float(acc),
        "final_per_class_acc": [_json_float(a) for a in per_class],
        "stage1_final_overall_acc": float(curve[-1]),
        "rounds_to_threshold": {repr(t): rounds_to_threshold(curve, t) for t in spec.thresholds},
        "uncovered_classes": [] if result.federated is None else list(result.federated.skipped),
    }
    path = spec.output_dir / f"{name}.json"
    out.write_text(path, json.dumps(summary, indent=2) + "\n")
    return path


def run_experiment(spec: ExperimentSpec) -> list[Path]:
    """Run every (method, seed) pair and write its metrics CSV and summary JSON.

    Stage 1 depends only on the selection rule, so methods sharing a rule
    and seed reuse one stage-1 run. Outputs are a pure function of ``spec``.
    Returns the summary paths.
    """
    spec.output_dir.mkdir(parents=True, exist_ok=True)
    summaries = []
    for seed in spec.seeds:
        train, test = build_data(spec, seed)
        shards = dirichlet_partition(train, spec.federation.num_clients, spec.alpha, spec.block_size, seed)
        if spec.save_partition:
            (spec.output_dir / "partitions").mkdir(exist_ok=True)
            write_partition_manifest(shards, spec.output_dir / "partitions" / f"seed{seed}.json")
        stage1_cache: dict[str, Stage1Result] = {}
        for method in spec.methods:
            config = replace(spec.federation, method=method, seed=seed)
            rule = config.selection_rule
            out = _Outputs()
            try:
                if rule not in stage1_cache:
                    log.info("seed %d: stage 1 with %s selection", seed, rule)
                    stage1_cache[rule] = run_stage1(config, train, test, shards)
                summaries.append(_run_one(spec, method, seed, train, test, shards, stage1_cache[rule], out))
            except (DivergenceError, ArithmeticError, ValueError, RuntimeError, OSError) as exc:
                out.cleanup()
                raise RunError(f"method {method}, selection {rule}, seed {seed}: {exc}") from exc
    return summaries


# ---------------------------------------------------------------- comparison

@dataclass
class ComparisonRow:
    method: str
    selection: str
    n: int
    acc_mean: float
    acc_std: float  # sample standard deviation (ddof=1); 0 for a single run
    rounds_to_threshold: dict[str, float | None] = field(default_factory=dict)


_SUMMARY_KEYS = ("method", "selection", "num_classes", "final_overall_acc", "rounds_to_threshold")


def compare_runs(summary_paths: Sequence[str | Path]) -> tuple[list[ComparisonRow], str, str]:
    """Mean and sample stddev of final accuracy per (method, selection).

    Returns the rows, a text table and CSV text. Rows follow the canonical
    method order, then selection order.
    """
    if len(summary_paths) < 2:
        raise ValueError("need at least two summaries to compare")
    summaries = []
    for p in summary_paths:
        data = json.loads(Path(p).read_text())
        missing = [k for k in _SUMMARY_KEYS if not isinstance(data, dict) or k not in data]
        if missing:
            raise ValueError(f"{p} is not a run summary (missing {', '.join(missing)})")
        summaries.append(data)
    classes = {s["num_classes"] for s in summaries}
    if len(classes) != 1:
        raise ValueError(f"summaries disagree on the number of classes: {sorted(classes)}")
    groups: dict[tuple[str, str], list[dict]] = {}
    for s in summaries:
        groups.setdefault((s["method"], s["selection"]), []).append(s)
    thresholds = sorted({t for s in summaries for t in s["rounds_to_threshold"]}, key=float)

    def order(key):
        m, sel = key
        return (METHODS.index(m) if m in METHODS else len(METHODS), m,
                SELECTIONS.index(sel) if sel in SELECTIONS else len(SELECTIONS), sel)

    rows = []
    for key in sorted(groups, key=order):
        runs = groups[key]
        acc = np.array([r["final_overall_acc"] for r in runs])
        std = float(acc.std(ddof=1)) if len(acc) > 1 else 0.0
        rtt = {}
        for t in thresholds:
            vals = [r["rounds_to_threshold"].get(t) for r in runs]
            rtt[t] = None if any(v is None for v in vals) else float(np.mean(vals))
        rows.append(ComparisonRow(key[0], key[1], len(runs), float(acc.mean()), std, rtt))

    header = ["method", "selection", "n", "acc_mean", "acc_std"] + [f"rounds_to_{t}" for t in thresholds]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    lines = [f"{'method':<10} {'selection':<9} {'n':>3}  {'accuracy':<17}"
             + "".join(f" {'r@' + t:>8}" for t in thresholds)]
    for r in rows:
        w.writerow([r.method, r.selection, r.n, repr(r.acc_mean), repr(r.acc_std)]
                   + ["" if r.rounds_to_threshold[t] is None else repr(r.rounds_to_threshold[t]) for t in thresholds])
        lines.append(f"{r.method:<10} {r.selection:<9} {r.n:>3}  {r.acc_mean:.4f} ± {r.acc_std:.4f}   "
                     + "".join(f" {'-' if r.rounds_to_threshold[t] is None else format(r.rounds_to_threshold[t], '.1f'):>8}"
                               for t in thresholds))
    return rows, "\n".join(lines) + "\n", buf.getvalue()


# ---------------------------------------------------------------- CLI

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dflfs", description="Two-stage federated long-tail experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the experiments described by a config file")
    run.add_argument("--config", required=True, help="JSON experiment config")
    run.add_argument("--seed", type=int, help="run only this seed")
    run.add_argument("--method", choices=METHODS, help="run only this method")
    run.add_argument("--selection", choices=SELECTIONS, help="override the method's client selection")
    run.add_argument("--out", help="output directory")
    run.add_argument("--dump-coverage", action="store_true", help="write per-round coverage CSVs (MFSC runs)")
    run.add_argument("--dump-features", action="store_true", help="write the regenerated federated features")
    cmp_ = sub.add_parser("compare", help="tabulate summary JSON files")
    cmp_.add_argument("summaries", nargs="+")
    cmp_.add_argument("--csv", help="also write the table as CSV here")
    return p


def _apply_overrides(spec: ExperimentSpec, args) -> ExperimentSpec:
    updates: dict[str, Any] = {}
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigRangeError("--seed must be non-negative")
        updates["seeds"] = (args.seed,)
    if args.method is not None:
        updates["methods"] = (args.method,)
    if args.selection is not None:
        updates["federation"] = replace(spec.federation, selection=args.selection)
    if args.out is not None:
        updates["output_dir"] = Path(args.out)
    if args.dump_coverage:
        updates["dump_coverage"] = True
    if args.dump_features:
        updates["dump_features"] = True
    return replace(spec, **updates)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "compare":
        try:
            _, text, csv_text = compare_runs(args.summaries)
        except (OSError, ValueError, KeyError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        sys.stdout.write(text)
        if args.csv:
            Path(args.csv).write_text(csv_text)
        return EXIT_OK
    try:
        spec = _apply_overrides(parse_config(args.config), args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        paths = run_experiment(spec)
    except RunError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for p in paths:
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
