"""Mini-batch Adam training with validation-based best-epoch selection."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .data import SampleSet
from .diffcore import AdamState, NumericError, adam_step
from .model import ModelParams, forward_backward, predict
from .odeint import TRAIN_SOLVER, SolverConfig

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    max_iter: int = 100
    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 1e-5
    seed: int = 0
    solver: SolverConfig = TRAIN_SOLVER
    grad_mode: str = "adjoint"

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.max_iter < 0:
            raise ValueError("max_iter must be >= 0")


@dataclass
class TrainReport:
    """Row 0 describes the initial parameters; row e the parameters after epoch e."""

    train_loss: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    val_r2: list[float] = field(default_factory=list)
    best_epoch: int = 0
    wall_time: float = 0.0

    def write_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_mse", "val_r2"])
            for e, (tl, vm, vr) in enumerate(zip(self.train_loss, self.val_mse, self.val_r2)):
                w.writerow([e, repr(float(tl)), repr(float(vm)), repr(float(vr))])


class TrainingAborted(NumericError):
    def __init__(self, msg: str, params: ModelParams, report: TrainReport):
        super().__init__(msg)
        self.params = params
        self.report = report


def loss(pred: np.ndarray, target: np.ndarray, theta: np.ndarray, weight_decay: float) -> float:
    """Mean over samples of the squared L2 error, plus ``weight_decay * ||theta||^2``."""
    pred, target = np.atleast_2d(pred), np.atleast_2d(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    sse = float(np.sum((target - pred) ** 2))
    return sse / pred.shape[0] + weight_decay * float(theta @ theta)


def mse_r2(pred: np.ndarray, target: np.ndarray) -> tuple[float, float]:
    """MSE over every (sample, block) entry; R^2 against the global target mean (NaN if constant)."""
    pred, target = np.asarray(pred, float), np.asarray(target, float)
    if target.size == 0:
        raise ValueError("empty dataset")
    resid = target - pred
    mse = float(np.mean(resid**2))
    ss_tot = float(np.sum((target - target.mean()) ** 2))
    r2 = float("nan") if np.ptp(target) == 0.0 else 1.0 - float(np.sum(resid**2)) / ss_tot
    return mse, r2


def evaluate(params: ModelParams, dataset: SampleSet, solver: SolverConfig = TRAIN_SOLVER) -> tuple[float, float]:
    return mse_r2(predict(dataset, params, solver), dataset.target)


def persistence_predict(samples: SampleSet) -> np.ndarray:
    """Next hour equals the most recent observation s_K."""
    return samples.short[:, -1, :]


def historical_mean_predict(train: SampleSet, samples: SampleSet) -> np.ndarray:
    """Per-block mean of the training targets."""
    return np.broadcast_to(train.target.mean(axis=0), samples.target.shape).copy()


def fit(
    train_set: SampleSet,
    val_set: SampleSet,
    params: ModelParams,
    cfg: TrainConfig,
) -> tuple[ModelParams, TrainReport]:
    if len(train_set) < 1 or len(val_set) < 1:
        raise ValueError("train and validation sets must be non-empty")
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    params = params.copy()
    report = TrainReport()

    def record(train_loss: float) -> None:
        vm, vr = evaluate(params, val_set, cfg.solver)
        report.train_loss.append(train_loss)
        report.val_mse.append(vm)
        report.val_r2.append(vr)

    init_pred = predict(train_set, params, cfg.solver)
    record(loss(init_pred, train_set.target, params.flat, cfg.weight_decay))
    best, best_mse = params.copy(), report.val_mse[0]
    state = AdamState.fresh(params.flat.size)
    n = len(train_set)

    for epoch in range(1, cfg.max_iter + 1):
        perm = rng.permutation(n)
        total, count = 0.0, 0
        for lo in range(0, n, cfg.batch_size):
            idx = np.sort(perm[lo : lo + cfg.batch_size])
            batch = train_set[idx]
            try:
                sse, g = forward_backward(batch, params, cfg.solver, grad_mode=cfg.grad_mode)
                B = len(idx)
                with np.errstate(over="ignore", invalid="ignore"):
                    g = g / B + 2.0 * cfg.weight_decay * params.flat
                total += sse / B + cfg.weight_decay * float(params.flat @ params.flat)
                count += 1
                params.flat[:], state = adam_step(params.flat, g, state, cfg.lr)
            except NumericError as exc:
                report.best_epoch = int(np.nanargmin(report.val_mse))
                report.wall_time = time.perf_counter() - t0
                raise TrainingAborted(f"epoch {epoch}: {exc}", best, report) from exc
            params.project()
        train_loss = total / count
        if not np.isfinite(train_loss):
            report.best_epoch = int(np.nanargmin(report.val_mse))
            raise TrainingAborted(f"epoch {epoch}: non-finite loss", best, report)
        record(train_loss)
        if report.val_mse[-1] < best_mse:
            best, best_mse = params.copy(), report.val_mse[-1]
            report.best_epoch = epoch
        log.info("epoch %d train_loss=%.6g val_mse=%.6g val_r2=%.4f", epoch, train_loss, report.val_mse[-1], report.val_r2[-1])

    report.wall_time = time.perf_counter() - t0
    return best, report
