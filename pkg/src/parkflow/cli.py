"""``parkflow`` command line: synth, train, predict, optimize, evaluate, report.

All run settings live in one JSON file; flags carry only paths and the method choice.
Exit codes: 0 success, 2 usage or config error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

from threadpoolctl import threadpool_limits

from .data import (
    CsvSchema,
    FeatureConfig,
    SampleSet,
    SynthConfig,
    expected_row_count,
    load_features,
    metered_weekdays,
    split,
    synth_generate,
    write_ground_truth,
    write_records_csv,
)
from .diffcore import NumericError
from .model import ModelConfig, ModelParams, load_checkpoint, predict, save_checkpoint
from .odeint import DivergenceError, SolverConfig
from .pricing import TAUS, evaluate_failure_ratio, run_cases, write_failure_csv, write_results_csv
from .report import read_results_csv, write_report
from .train import (
    TrainConfig,
    TrainingAborted,
    fit,
    historical_mean_predict,
    mse_r2,
    persistence_predict,
)

log = logging.getLogger("parkflow")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class ConfigError(ValueError):
    pass


def _tuples(v):
    return tuple(_tuples(x) for x in v) if isinstance(v, list) else v


def _build(cls, section: dict, where: str, skip: tuple[str, ...] = ()):
    """Instantiate a dataclass from a JSON object, rejecting unknown keys."""
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: expected an object")
    allowed = {f.name for f in fields(cls)} - set(skip)
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {k: v if k == "c_true" else _tuples(v) for k, v in section.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class PricingSection:
    y_star: float = 0.7
    bounds: Optional[tuple[float, float]] = None
    taus: tuple[float, ...] = TAUS
    gradient_lr: float = 0.05
    max_cases: Optional[int] = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.y_star <= 1.0:
            raise ValueError("y_star must lie in [0, 1]")
        if self.bounds is not None and (len(self.bounds) != 2 or not self.bounds[0] < self.bounds[1]):
            raise ValueError("bounds must be [p_min, p_max] with p_min < p_max")
        if list(self.taus) != sorted(self.taus):
            raise ValueError("taus must be ascending")


@dataclass
class DataSection:
    path: Optional[str] = None
    K: int = 1
    schema: dict = field(default_factory=dict)
    features: dict = field(default_factory=dict)
    cache_dir: Optional[str] = None
    split_ratio: float = 0.7
    val_fraction: float = 0.15
    synth: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not 0.0 < self.split_ratio < 1.0 or not 0.0 < self.val_fraction < 1.0:
            raise ValueError("split_ratio and val_fraction must lie in (0, 1)")


@dataclass
class RunConfig:
    seed: int
    model: dict
    train: TrainConfig
    pricing: PricingSection
    data: DataSection
    schema: CsvSchema
    features: FeatureConfig
    synth: SynthConfig
    base_dir: Path

    def model_config(self, N: int) -> ModelConfig:
        m = dict(self.model)
        if "N" in m and m["N"] != N:
            raise ConfigError(f"model.N={m['N']} but the data has {N} blocks")
        m["N"] = N
        m["K"] = self.data.K
        return _build(ModelConfig, m, "model")

    def resolve(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else self.base_dir / q


SECTIONS = {"seed", "model", "train", "pricing", "data"}


def parse_config(doc: Any, base_dir: Path = Path(".")) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - SECTIONS)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")
    model = doc.get("model", {})
    if not isinstance(model, dict):
        raise ConfigError("model: expected an object")
    bad = sorted(set(model) - ({f.name for f in fields(ModelConfig)} - {"K"}))
    if bad:
        raise ConfigError(f"model: unknown keys {bad} (K belongs to data)")

    train_doc = dict(doc.get("train", {}))
    solver = _build(SolverConfig, train_doc.pop("solver", {}), "train.solver")
    train_doc.setdefault("seed", seed)
    train = _build(TrainConfig, train_doc, "train")
    train.solver = solver
    if train.grad_mode not in ("adjoint", "backprop"):
        raise ConfigError("train.grad_mode must be adjoint or backprop")

    pricing = _build(PricingSection, doc.get("pricing", {}), "pricing")
    data = _build(DataSection, doc.get("data", {}), "data")
    schema = _build(CsvSchema, data.schema, "data.schema")
    features = _build(FeatureConfig, data.features, "data.features")
    synth_doc = dict(data.synth)
    synth_doc.setdefault("seed", seed)
    synth = _build(SynthConfig, synth_doc, "data.synth")
    return RunConfig(seed, model, train, pricing, data, schema, features, synth, base_dir)


def load_config(path: str) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return parse_config(doc, Path(path).resolve().parent)


# ---------------------------------------------------------------- data plumbing


@dataclass
class Splits:
    train: SampleSet
    val: SampleSet
    fit: SampleSet
    test: SampleSet


def load_splits(cfg: RunConfig) -> Splits:
    if cfg.data.path is None:
        raise ConfigError("data.path is required for this command")
    cache = cfg.resolve(cfg.data.cache_dir) if cfg.data.cache_dir else None
    samples = load_features(cfg.resolve(cfg.data.path), cfg.data.K, cfg.features, cfg.schema, cache)
    train, test = split(samples, cfg.data.split_ratio)
    fit_set, val = split(train, 1.0 - cfg.data.val_fraction)
    return Splits(train, val, fit_set, test)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint(args, out: Path) -> Path:
    return Path(args.checkpoint) if args.checkpoint else out / "model.ckpt"


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig, args) -> int:
    records, gt = synth_generate(cfg.synth)
    out = _out_dir(args)
    n = write_records_csv(out / "records.csv", records)
    write_ground_truth(out, gt, cfg.synth)
    s = cfg.synth
    hours = s.metered_end - s.metered_start
    print(
        f"wrote {n} rows = {s.N} blocks x {hours} metered hours x {len(metered_weekdays(s))} weekdays "
        f"(expected {expected_row_count(s)})"
    )
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    sp = load_splits(cfg)
    params = ModelParams.init(cfg.model_config(sp.train.N), cfg.seed)
    out = _out_dir(args)
    ckpt = _checkpoint(args, out)
    try:
        best, report = fit(sp.fit, sp.val, params, cfg.train)
    except TrainingAborted as exc:
        last = len(exc.report.val_mse) - 1
        log.error("training aborted after epoch %d: %s", last, exc)
        exc.report.write_csv(out / "train_report.csv")
        return EXIT_NUMERIC
    save_checkpoint(ckpt, best, {"seed": cfg.seed, "best_epoch": report.best_epoch})
    report.write_csv(out / "train_report.csv")
    print(f"best epoch {report.best_epoch}: val_mse={report.val_mse[report.best_epoch]:.6g}; checkpoint {ckpt}")
    return EXIT_OK


def _load_model(cfg: RunConfig, args, out: Path) -> ModelParams:
    path = _checkpoint(args, out)
    try:
        params, _ = load_checkpoint(path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load checkpoint {path}: {exc}") from exc
    return params


def cmd_predict(cfg: RunConfig, args) -> int:
    sp = load_splits(cfg)
    out = _out_dir(args)
    params = _load_model(cfg, args, out)
    yhat = predict(sp.test, params, cfg.train.solver)
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case_id", "timestamp", "block_id", "price", "y_hat", "target"])
        for i in range(len(sp.test)):
            ts = str(sp.test.timestamps[i])
            for j, b in enumerate(sp.test.block_ids):
                w.writerow([i, ts, b, repr(float(sp.test.price[i, j])), repr(float(yhat[i, j])), repr(float(sp.test.target[i, j]))])
    print(f"wrote {len(sp.test)} x {sp.test.N} predictions to {out / 'predictions.csv'}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args) -> int:
    sp = load_splits(cfg)
    out = _out_dir(args)
    params = _load_model(cfg, args, out)
    rows = [
        ("model", *mse_r2(predict(sp.test, params, cfg.train.solver), sp.test.target)),
        ("persistence", *mse_r2(persistence_predict(sp.test), sp.test.target)),
        ("historical_mean", *mse_r2(historical_mean_predict(sp.train, sp.test), sp.test.target)),
    ]
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["predictor", "mse", "r2"])
        for name, mse, r2 in rows:
            w.writerow([name, repr(mse), repr(r2)])
    for name, mse, r2 in rows:
        print(f"{name:16s} mse={mse:.6f} r2={r2:.4f}")
    return EXIT_OK


def cmd_optimize(cfg: RunConfig, args) -> int:
    methods = ["oneshot", "greedy", "gradient"] if args.method == "all" else [args.method]
    sp = load_splits(cfg)
    out = _out_dir(args)
    params = _load_model(cfg, args, out)
    pc = cfg.pricing
    bounds = tuple(pc.bounds) if pc.bounds else None
    all_cases, reports = [], []
    # timing runs are single-threaded so per-case wall times are comparable
    with threadpool_limits(limits=1):
        for m in methods:
            cases = run_cases(
                sp.test,
                params,
                m,
                y_star=pc.y_star,
                bounds=bounds,
                solver=cfg.train.solver,
                gradient_lr=pc.gradient_lr,
                max_cases=pc.max_cases,
            )
            all_cases.extend(cases)
            reports.append(evaluate_failure_ratio([c.result for c in cases], pc.taus))
    write_results_csv(out / "results.csv", all_cases)
    write_failure_csv(out / "failure.csv", reports)
    for r in reports:
        ratios = " ".join(f"tau={t:.2f}:{x:.4f}" for t, x in zip(r.taus, r.ratios))
        print(f"{r.method:9s} cases={r.n_cases} {ratios} mean_wall={r.mean_wall_time:.6f}s")
    return EXIT_OK


def cmd_report(cfg: Optional[RunConfig], args) -> int:
    out = _out_dir(args)
    src = Path(args.results) if args.results else out / "results.csv"
    try:
        rows = read_results_csv(src)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read results {src}: {exc}") from exc
    if not rows:
        raise ConfigError(f"{src} has no result rows")
    for p in write_report(rows, out):
        print(p)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "predict": cmd_predict,
    "optimize": cmd_optimize,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="parkflow", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="JSON run config (required except for report)")
    ap.add_argument("--checkpoint", help="model checkpoint (default: <out>/model.ckpt)")
    ap.add_argument("--method", default="all", help="oneshot, greedy, gradient or all")
    ap.add_argument("--out", default="runs", help="output directory")
    ap.add_argument("--results", help="results CSV for report (default: <out>/results.csv)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _threads() -> Optional[int]:
    raw = os.environ.get("PARKFLOW_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"PARKFLOW_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise ConfigError("PARKFLOW_THREADS must be >= 1")
    return n


def main(argv: Optional[list[str]] = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.method not in ("oneshot", "greedy", "gradient", "all"):
            raise ConfigError(f"unknown method {args.method!r}")
        if args.config is None and args.command != "report":
            raise ConfigError("--config is required")
        cfg = load_config(args.config) if args.config else None
        with threadpool_limits(limits=_threads()):
            return COMMANDS[args.command](cfg, args)
    except (ConfigError, OSError) as exc:
        print(f"parkflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, DivergenceError, FloatingPointError) as exc:
        print(f"parkflow: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"parkflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
