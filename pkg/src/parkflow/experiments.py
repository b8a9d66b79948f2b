"""End-to-end synthetic experiments shared by scripts/ and the acceptance tests."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from threadpoolctl import threadpool_limits

from .data import GroundTruth, SampleSet, SynthConfig, build_features, split, synth_generate
from .model import ModelConfig, ModelParams, predict, save_checkpoint
from .pricing import (
    CaseResult,
    FailureReport,
    evaluate_failure_ratio,
    run_cases,
    write_failure_csv,
    write_results_csv,
)
from .train import TrainConfig, TrainReport, fit, historical_mean_predict, mse_r2, persistence_predict

log = logging.getLogger(__name__)

METHOD_ORDER = ("oneshot", "gradient", "greedy")


@dataclass(frozen=True)
class ExperimentProfile:
    """Everything that defines one synthetic run; the seed drives data, init and shuffling."""

    N: int = 8
    days: int = 90
    seed: int = 0
    K: int = 1
    dim_h_short: int = 16
    M: int = 3
    c_init: float = 0.05
    p_min: float = 0.25
    p_max: float = 6.0
    max_iter: int = 60
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-5
    y_star: float = 0.7
    max_cases: Optional[int] = None

    def synth(self) -> SynthConfig:
        return SynthConfig(N=self.N, days=self.days, seed=self.seed, p_min=self.p_min, p_max=self.p_max)

    def model(self) -> ModelConfig:
        return ModelConfig(
            N=self.N, K=self.K, dim_h_short=self.dim_h_short, M=self.M, c_init=self.c_init, p_min=self.p_min, p_max=self.p_max
        )

    def train(self) -> TrainConfig:
        return TrainConfig(
            max_iter=self.max_iter, batch_size=self.batch_size, lr=self.lr, weight_decay=self.weight_decay, seed=self.seed
        )


DESK = ExperimentProfile()
# timing profile: wide city, short training (the ordering of optimizer runtimes does not need a sharp model)
WIDE = ExperimentProfile(N=32, seed=1, dim_h_short=8, max_iter=5)


@dataclass
class TrainedRun:
    profile: ExperimentProfile
    truth: GroundTruth
    train: SampleSet
    val: SampleSet
    test: SampleSet
    train_full: SampleSet
    params: ModelParams
    report: TrainReport
    metrics: dict[str, tuple[float, float]] = field(default_factory=dict)


def train_profile(profile: ExperimentProfile) -> TrainedRun:
    records, truth = synth_generate(profile.synth())
    samples = build_features(records, profile.K)
    train_full, test = split(samples, 0.7)
    train, val = split(train_full, 0.85)
    init = ModelParams.init(profile.model(), profile.seed)
    params, report = fit(train, val, init, profile.train())
    metrics = {
        "model": mse_r2(predict(test, params), test.target),
        "persistence": mse_r2(persistence_predict(test), test.target),
        "historical_mean": mse_r2(historical_mean_predict(train_full, test), test.target),
    }
    return TrainedRun(profile, truth, train, val, test, train_full, params, report, metrics)


def optimize_all(run: TrainedRun, methods=METHOD_ORDER) -> dict[str, list[CaseResult]]:
    out = {}
    with threadpool_limits(limits=1):
        for m in methods:
            out[m] = run_cases(run.test, run.params, m, y_star=run.profile.y_star, max_cases=run.profile.max_cases)
    return out


def write_metrics_csv(path: Union[str, Path], metrics: dict[str, tuple[float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["predictor", "mse", "r2"])
        for name, (mse, r2) in metrics.items():
            w.writerow([name, repr(mse), repr(r2)])


def write_run(out_dir: Union[str, Path], run: TrainedRun, cases: dict[str, list[CaseResult]]) -> dict[str, FailureReport]:
    """Write every CSV of a run plus the checkpoint; returns the failure reports."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.ckpt", run.params, {"seed": run.profile.seed})
    run.report.write_csv(out / "train_report.csv")
    write_metrics_csv(out / "metrics.csv", run.metrics)
    write_results_csv(out / "results.csv", [c for m in cases for c in cases[m]])
    reports = {m: evaluate_failure_ratio([c.result for c in cases[m]]) for m in cases}
    write_failure_csv(out / "failure.csv", reports.values())
    return reports


def median_wall_time(cases: list[CaseResult]) -> float:
    return float(np.median([c.result.wall_time for c in cases]))
