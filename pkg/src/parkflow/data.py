"""Occupancy records: CSV ingestion, feature engineering, temporal splits, synthetic city."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from datetime import date, datetime, timedelta
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

L_FEATURES = 12


class CsvFormatError(ValueError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.line = line


@dataclass(frozen=True)
class OccupancyRecord:
    block_id: str
    timestamp: datetime
    occupancy: float
    price: float


@dataclass(frozen=True)
class CsvSchema:
    """Column names plus the metered window; rows outside the window are dropped."""

    block_id: str = "block_id"
    timestamp: str = "timestamp"
    occupancy: str = "occupancy"
    price: str = "price"
    metered_start: int = 9
    metered_end: int = 17
    metered_weekdays: tuple[int, ...] = (0, 1, 2, 3, 4)

    def is_metered(self, ts: datetime) -> bool:
        return ts.weekday() in self.metered_weekdays and self.metered_start <= ts.hour < self.metered_end


SF_SCHEMA = CsvSchema()
SEATTLE_SCHEMA = CsvSchema(metered_start=8, metered_end=17)


@dataclass
class LoadResult:
    records: list[OccupancyRecord]
    dropped_unmetered: int = 0
    rejected: int = 0


def load_csv(
    path: Union[str, Path],
    schema: CsvSchema = SF_SCHEMA,
    period_prices: Optional[dict[tuple[str, datetime], float]] = None,
) -> LoadResult:
    """Parse and validate an hourly per-block occupancy CSV.

    ``period_prices`` (see :func:`expand_price_periods`) fills rows whose price
    cell is empty.
    """
    out = LoadResult([])
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return out
        needed = [schema.block_id, schema.timestamp, schema.occupancy, schema.price]
        missing = [c for c in needed if c not in reader.fieldnames]
        if missing:
            raise CsvFormatError(path, 1, f"missing columns {missing}")
        for row in reader:
            line = reader.line_num
            try:
                ts = datetime.fromisoformat(row[schema.timestamp].strip())
                occ = float(row[schema.occupancy])
                raw_price = (row[schema.price] or "").strip()
                block = row[schema.block_id].strip()
            except (ValueError, TypeError, AttributeError) as exc:
                raise CsvFormatError(path, line, str(exc)) from None
            if not block:
                raise CsvFormatError(path, line, "empty block_id")
            if raw_price:
                try:
                    price = float(raw_price)
                except ValueError as exc:
                    raise CsvFormatError(path, line, str(exc)) from None
            elif period_prices is not None and (block, ts) in period_prices:
                price = period_prices[(block, ts)]
            else:
                raise CsvFormatError(path, line, "missing price")
            if not schema.is_metered(ts):
                out.dropped_unmetered += 1
                continue
            if not (0.0 <= occ <= 1.0) or price < 0 or not math.isfinite(price):
                out.rejected += 1
                continue
            out.records.append(OccupancyRecord(block, ts, occ, price))
    return out


def expand_price_periods(
    periods: Iterable[tuple[str, date, int, int, float]],
) -> dict[tuple[str, datetime], float]:
    """Expand time-of-day price periods ``(block, day, start_hour, end_hour, price)`` to hourly prices."""
    hourly: dict[tuple[str, datetime], float] = {}
    for block, day, start, end, price in periods:
        for h in range(start, end):
            hourly[(block, datetime(day.year, day.month, day.day, h))] = float(price)
    return hourly


# ---------------------------------------------------------------- samples


@dataclass
class FeatureSample:
    short: np.ndarray  # (K, N), last row most recent
    long: np.ndarray  # (L, N)
    price: np.ndarray  # (N,)
    target: np.ndarray  # (N,)


@dataclass
class SampleSet:
    """Chronologically ordered samples stacked along axis 0."""

    short: np.ndarray  # (S, K, N)
    long: np.ndarray  # (S, L, N)
    price: np.ndarray  # (S, N)
    target: np.ndarray  # (S, N)
    timestamps: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype="datetime64[m]"))
    block_ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.short.shape[0]

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return FeatureSample(self.short[idx], self.long[idx], self.price[idx], self.target[idx])
        ts = self.timestamps[idx] if len(self.timestamps) else self.timestamps
        return SampleSet(self.short[idx], self.long[idx], self.price[idx], self.target[idx], ts, list(self.block_ids))

    @property
    def N(self) -> int:
        return self.short.shape[2]

    @property
    def K(self) -> int:
        return self.short.shape[1]

    @classmethod
    def stack(cls, samples: Sequence[FeatureSample]) -> "SampleSet":
        return cls(
            np.stack([np.asarray(s.short, float) for s in samples]),
            np.stack([np.asarray(s.long, float) for s in samples]),
            np.stack([np.asarray(s.price, float) for s in samples]),
            np.stack([np.asarray(s.target, float) for s in samples]),
        )


@dataclass(frozen=True)
class FeatureConfig:
    """Long-term feature layout: one mean per (window, daypart).

    Dayparts are half-open ranges of hour labels. The first window uses the same
    weekday only; longer windows average every metered day in ``[d - w, d)``.
    """

    dayparts: tuple[tuple[int, int], ...] = ((9, 12), (12, 15), (15, 17))
    windows_days: tuple[int, ...] = (7, 14, 28, 56)
    same_weekday_first: bool = True
    min_history_days: int = 56

    def __post_init__(self) -> None:
        if len(self.dayparts) * len(self.windows_days) != L_FEATURES:
            raise ValueError("dayparts x windows must give 12 long-term features")


SEATTLE_FEATURES = FeatureConfig(dayparts=((8, 11), (11, 14), (14, 17)))


def _grid(records: Sequence[OccupancyRecord]):
    blocks = sorted({r.block_id for r in records})
    days = sorted({r.timestamp.date() for r in records})
    hours = sorted({r.timestamp.hour for r in records})
    bi = {b: i for i, b in enumerate(blocks)}
    di = {d: i for i, d in enumerate(days)}
    hi = {h: i for i, h in enumerate(hours)}
    occ = np.full((len(days), len(hours), len(blocks)), np.nan)
    price = np.full_like(occ, np.nan)
    for r in records:
        k = (di[r.timestamp.date()], hi[r.timestamp.hour], bi[r.block_id])
        occ[k] = r.occupancy
        price[k] = r.price
    return blocks, days, hours, occ, price


def build_features(records: Sequence[OccupancyRecord], K: int, cfg: FeatureConfig = FeatureConfig()) -> SampleSet:
    """One sample per metered hour with K same-day lags and 12 long-term means.

    Every feature of a sample at time t is computed from records strictly before t.
    Blocks missing any observed (day, hour) cell are dropped.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    L = L_FEATURES
    if not records:
        return SampleSet(np.zeros((0, K, 0)), np.zeros((0, L, 0)), np.zeros((0, 0)), np.zeros((0, 0)))
    blocks, days, hours, occ, price = _grid(records)
    observed = np.any(~np.isnan(occ), axis=2)
    complete = np.all(~np.isnan(occ) | ~observed[:, :, None], axis=(0, 1))
    blocks = [b for b, ok in zip(blocks, complete) if ok]
    occ, price = occ[:, :, complete], price[:, :, complete]
    N = len(blocks)
    n_days = len(days)

    # per-day daypart means, shape (days, dayparts, N)
    part_means = np.full((n_days, len(cfg.dayparts), N), np.nan)
    for p, (lo, hi) in enumerate(cfg.dayparts):
        cols = [i for i, h in enumerate(hours) if lo <= h < hi]
        if cols:
            with np.errstate(all="ignore"):
                part_means[:, p, :] = np.nanmean(occ[:, cols, :], axis=1) if N else 0.0
    day_ok = np.all(observed, axis=1)
    ordinals = np.array([d.toordinal() for d in days])
    first = ordinals[0] if n_days else 0
    valid_day = day_ok & ~np.any(np.isnan(part_means), axis=(1, 2))
    csum = np.concatenate([np.zeros((1, len(cfg.dayparts), N)), np.cumsum(np.where(valid_day[:, None, None], part_means, 0.0), axis=0)])
    ccount = np.concatenate([[0], np.cumsum(valid_day)])

    short_l, long_l, price_l, target_l, ts_l = [], [], [], [], []
    for d in range(n_days):
        od = ordinals[d]
        if od - first < cfg.min_history_days:
            continue
        feats = []
        for wi, w in enumerate(cfg.windows_days):
            if wi == 0 and cfg.same_weekday_first:
                j = np.searchsorted(ordinals, od - w)
                if j >= n_days or ordinals[j] != od - w or not valid_day[j]:
                    feats = None
                    break
                feats.append(part_means[j])
            else:
                lo = np.searchsorted(ordinals, od - w)
                cnt = ccount[d] - ccount[lo]
                if cnt == 0:
                    feats = None
                    break
                feats.append((csum[d] - csum[lo]) / cnt)
        if feats is None:
            continue
        long_feat = np.concatenate(feats, axis=0)  # (L, N)
        for h_idx, h in enumerate(hours):
            if h_idx < K or hours[h_idx - K] != h - K:
                continue
            lags = occ[d, h_idx - K : h_idx, :]
            if np.isnan(lags).any() or np.isnan(occ[d, h_idx]).any():
                continue
            short_l.append(lags)
            long_l.append(long_feat)
            price_l.append(price[d, h_idx])
            target_l.append(occ[d, h_idx])
            ts_l.append(np.datetime64(datetime(days[d].year, days[d].month, days[d].day, h), "m"))
    if not short_l:
        return SampleSet(np.zeros((0, K, N)), np.zeros((0, L, N)), np.zeros((0, N)), np.zeros((0, N)), np.zeros(0, "datetime64[m]"), blocks)
    return SampleSet(
        np.stack(short_l), np.stack(long_l), np.stack(price_l), np.stack(target_l), np.array(ts_l, dtype="datetime64[m]"), blocks
    )


def split(samples: SampleSet, ratio: float = 0.7) -> tuple[SampleSet, SampleSet]:
    """Temporal split: first ``ratio`` of samples train, the rest test."""
    n = len(samples)
    if n < 2:
        raise ValueError("need at least 2 samples to split")
    n_train = int(math.floor(ratio * n + 1e-9))
    if n_train < 1 or n_train >= n:
        raise ValueError(f"ratio {ratio} leaves an empty side for {n} samples")
    return samples[:n_train], samples[n_train:]


# ---------------------------------------------------------------- cache


def _sha256_file(path: Union[str, Path]) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def cache_key(data_path: Union[str, Path], K: int, cfg: FeatureConfig, schema: CsvSchema) -> str:
    blob = json.dumps({"data": _sha256_file(data_path), "K": K, "cfg": asdict(cfg), "schema": asdict(schema)}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:24]


def save_samples(path: Union[str, Path], s: SampleSet) -> None:
    with open(path, "wb") as fh:
        np.savez(
            fh,
            short=s.short,
            long=s.long,
            price=s.price,
            target=s.target,
            timestamps=s.timestamps.astype("datetime64[m]").astype(np.int64),
            block_ids=np.array(s.block_ids, dtype=str),
        )


def load_samples(path: Union[str, Path]) -> SampleSet:
    with np.load(path) as z:
        return SampleSet(
            z["short"], z["long"], z["price"], z["target"], z["timestamps"].astype("datetime64[m]"), [str(b) for b in z["block_ids"]]
        )


def load_features(
    data_path: Union[str, Path],
    K: int,
    cfg: FeatureConfig = FeatureConfig(),
    schema: CsvSchema = SF_SCHEMA,
    cache_dir: Optional[Union[str, Path]] = None,
) -> SampleSet:
    """CSV -> samples, going through the on-disk cache when ``cache_dir`` is set."""
    if cache_dir is not None:
        cache = Path(cache_dir) / f"samples-{cache_key(data_path, K, cfg, schema)}.npz"
        if cache.exists():
            return load_samples(cache)
    samples = build_features(load_csv(data_path, schema).records, K, cfg)
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        save_samples(cache, samples)
    return samples


# ---------------------------------------------------------------- synthetic city


@dataclass
class SynthConfig:
    N: int = 8
    days: int = 90
    seed: int = 0
    start: str = "2023-01-02"
    metered_start: int = 9
    metered_end: int = 17
    p_min: float = 0.25
    p_max: float = 6.0
    c_true: Optional[list[float]] = None
    c_range: tuple[float, float] = (0.04, 0.10)
    noise_sigma: float = 0.04
    noise_phi: float = 0.3
    price_step: float = 1.0
    base_range: tuple[float, float] = (0.65, 0.85)
    peak_amp_range: tuple[float, float] = (0.05, 0.1)

    def __post_init__(self) -> None:
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not self.p_min < self.p_max:
            raise ValueError("p_min must be below p_max")
        if self.c_true is not None and (len(self.c_true) != self.N or min(self.c_true) < 0):
            raise ValueError("c_true needs N non-negative entries")


@dataclass
class GroundTruth:
    block_ids: list[str]
    c_true: np.ndarray  # (N,)
    profiles: np.ndarray  # (N, 7, 24) demand at zero price, in [0, 1]


def metered_weekdays(cfg: SynthConfig) -> list[date]:
    d0 = date.fromisoformat(cfg.start)
    return [d0 + timedelta(days=i) for i in range(cfg.days) if (d0 + timedelta(days=i)).weekday() < 5]


def expected_row_count(cfg: SynthConfig) -> int:
    return cfg.N * (cfg.metered_end - cfg.metered_start) * len(metered_weekdays(cfg))


def synth_generate(cfg: SynthConfig) -> tuple[list[OccupancyRecord], GroundTruth]:
    """Hourly weekday records: ``clip(profile - c_true * price + AR(1) noise, 0, 1)``."""
    rng = np.random.default_rng(cfg.seed)
    N = cfg.N
    c_true = np.asarray(cfg.c_true, float) if cfg.c_true is not None else rng.uniform(*cfg.c_range, size=N)
    base = rng.uniform(*cfg.base_range, size=N)
    amp = rng.uniform(*cfg.peak_amp_range, size=N)
    peak = rng.uniform(11.0, 15.0, size=N)
    dow = rng.uniform(-0.03, 0.03, size=(N, 7))
    hrs = np.arange(24)
    bump = np.exp(-((hrs[None, :] - peak[:, None]) ** 2) / (2 * 2.5**2))
    profiles = np.clip(base[:, None, None] + amp[:, None, None] * bump[:, None, :] + dow[:, :, None], 0.0, 1.0)

    grid = np.arange(cfg.p_min, cfg.p_max + 1e-9, 0.25)
    p_idx = rng.integers(0, len(grid), size=N)
    step_idx = max(cfg.price_step / 0.25, 1.0)
    noise = np.zeros(N)
    innov = cfg.noise_sigma * math.sqrt(max(1.0 - cfg.noise_phi**2, 0.0))
    ids = [f"B{i:03d}" for i in range(N)]
    records: list[OccupancyRecord] = []
    for day in metered_weekdays(cfg):
        for h in range(cfg.metered_start, cfg.metered_end):
            p_idx = p_idx + np.rint(rng.normal(0.0, step_idx, size=N)).astype(int)
            # reflect into the grid
            p_idx = np.abs(p_idx)
            over = p_idx > len(grid) - 1
            p_idx[over] = 2 * (len(grid) - 1) - p_idx[over]
            p_idx = np.clip(p_idx, 0, len(grid) - 1)
            price = grid[p_idx]
            noise = cfg.noise_phi * noise + innov * rng.normal(size=N)
            occ = np.clip(profiles[:, day.weekday(), h] - c_true * price + noise, 0.0, 1.0)
            ts = datetime(day.year, day.month, day.day, h)
            for i in range(N):
                records.append(OccupancyRecord(ids[i], ts, round(float(occ[i]), 6), float(price[i])))
    return records, GroundTruth(ids, c_true, profiles)


def write_records_csv(path: Union[str, Path], records: Iterable[OccupancyRecord]) -> int:
    n = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["block_id", "timestamp", "occupancy", "price"])
        for r in records:
            w.writerow([r.block_id, r.timestamp.isoformat(), f"{r.occupancy:.6f}", f"{r.price:.2f}"])
            n += 1
    return n


def write_ground_truth(out_dir: Union[str, Path], gt: GroundTruth, cfg: SynthConfig) -> None:
    out = Path(out_dir)
    with open(out / "ground_truth.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["block_id", "c_true"])
        for b, c in zip(gt.block_ids, gt.c_true):
            w.writerow([b, f"{c:.8f}"])
    with open(out / "profiles.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["block_id", "weekday", "hour", "profile"])
        for i, b in enumerate(gt.block_ids):
            for d in range(5):
                for h in range(cfg.metered_start, cfg.metered_end):
                    w.writerow([b, d, h, f"{gt.profiles[i, d, h]:.8f}"])
