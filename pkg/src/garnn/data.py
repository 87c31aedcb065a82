"""Multivariate time-series ingestion, windowing and synthetic CGM-style data.

CSV layout: a header ``timestamp,<target>,<var...>`` followed by one row per
sample. The timestamp column is either an integer index or ISO-8601 wall
clock; an empty cell marks a missing value. Sparse event channels (meals,
insulin doses) carry a value on event rows and are empty elsewhere.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

STD_FLOOR = 1e-8
TIMESTAMP_CHANNEL = "timestamp"


class DataError(ValueError):
    """Malformed input data; the message cites the offending row."""


@dataclass
class MtsRecord:
    """One participant's series. ``values`` is ``[M, N]`` with NaN for missing."""

    participant: str
    interval: float
    names: list[str]
    timestamps: np.ndarray
    values: np.ndarray
    event_masks: dict[str, np.ndarray] = field(default_factory=dict)
    derived: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.names):
            raise DataError(f"values shape {self.values.shape} does not match {len(self.names)} names")
        if len(self.timestamps) != len(self.values):
            raise DataError("timestamps and values differ in length")
        if not self.names:
            raise DataError("record has no target variable")
        ts = self.timestamps
        if len(ts) > 1 and not np.all(ts[1:] > ts[:-1]):
            bad = int(np.argmin(ts[1:] > ts[:-1])) + 2
            raise DataError(f"row {bad}: timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def target(self) -> str:
        return self.names[0]

    @property
    def n_vars(self) -> int:
        return len(self.names)

    @property
    def wall_clock(self) -> bool:
        return np.issubdtype(self.timestamps.dtype, np.datetime64)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def slice(self, start: int, stop: int) -> "MtsRecord":
        masks = {k: v[start:stop] for k, v in self.event_masks.items()}
        return MtsRecord(self.participant, self.interval, list(self.names),
                         self.timestamps[start:stop], self.values[start:stop], masks,
                         self.derived, dict(self.meta, offset=self.meta.get("offset", 0) + start))


# --- CSV ----------------------------------------------------------------------

def _parse_timestamp(text: str):
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return np.datetime64(text, "m")
    except ValueError:
        return None


def load_csv(path, schema: Sequence[str] | None = None, participant: str | None = None,
             interval: float | None = None) -> MtsRecord:
    """Read a record. ``schema`` lists the allowed variable names (first = target).

    δt comes from ``interval``, else the metadata sidecar, else the median
    wall-clock spacing (integer indices default to 1).
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("row 0: empty file") from None
        header = [h.strip() for h in header]
        if not header or header[0] != "timestamp" or len(header) < 2:
            raise DataError("row 0: header must be 'timestamp,<target>,<var...>'")
        names = header[1:]
        if len(set(names)) != len(names):
            raise DataError("row 0: duplicate column names")
        if schema is not None:
            unknown = [n for n in names if n not in schema]
            if unknown:
                raise DataError(f"row 0: unknown columns {unknown}")
            if names[0] != schema[0]:
                raise DataError(f"row 0: first variable must be the target {schema[0]!r}")
        stamps, rows = [], []
        for r, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"row {r}: expected {len(header)} fields, got {len(row)}")
            ts = _parse_timestamp(row[0])
            if ts is None:
                raise DataError(f"row {r}: unparseable timestamp {row[0]!r}")
            if stamps and type(ts) is not type(stamps[0]):
                raise DataError(f"row {r}: mixed timestamp kinds")
            if stamps and not ts > stamps[-1]:
                raise DataError(f"row {r}: timestamp not after the previous row (duplicate or decreasing)")
            vals = []
            for c, cell in enumerate(row[1:], start=1):
                cell = cell.strip()
                if cell == "":
                    vals.append(np.nan)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"row {r}: non-numeric value {cell!r} in column {header[c]!r}") from None
                if not np.isfinite(v):
                    raise DataError(f"row {r}: non-finite value in column {header[c]!r}")
                vals.append(v)
            stamps.append(ts)
            rows.append(vals)

    if stamps and isinstance(stamps[0], int):
        timestamps = np.array(stamps, dtype=np.int64)
    else:
        timestamps = np.array(stamps, dtype="datetime64[m]")
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(names))

    meta = {}
    sidecar = metadata_path(path)
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
    if interval is None:
        interval = meta.get("interval")
    if interval is None:
        if np.issubdtype(timestamps.dtype, np.datetime64) and len(timestamps) > 1:
            interval = float(np.median(np.diff(timestamps).astype(np.int64)))
        else:
            interval = 1.0
    return MtsRecord(participant or meta.get("participant") or path.stem, float(interval),
                     names, timestamps, values, meta=meta)


def write_csv(record: MtsRecord, path) -> None:
    """Write the non-derived channels; missing values become empty cells."""
    keep = [i for i, n in enumerate(record.names) if n not in record.derived]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp"] + [record.names[i] for i in keep])
        for ts, row in zip(record.timestamps, record.values):
            stamp = str(ts) if record.wall_clock else str(int(ts))
            w.writerow([stamp] + ["" if np.isnan(row[i]) else repr(float(row[i])) for i in keep])


def metadata_path(csv_path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + ".meta.json")


def write_metadata(record: MtsRecord, csv_path, split: "SplitSpec | None" = None, **extra) -> Path:
    doc = {
        "participant": record.participant,
        "interval": record.interval,
        "variables": list(record.names),
        "derived": list(record.derived),
        "generator": record.meta.get("generator"),
        "seed": record.meta.get("seed"),
        "split": asdict(split) if split is not None else None,
    }
    doc.update(extra)
    out = metadata_path(csv_path)
    out.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return out


def write_event_masks(record: MtsRecord, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestep", "variable"])
        for name, mask in record.event_masks.items():
            for t in np.flatnonzero(mask):
                w.writerow([int(t), name])


def read_event_masks(path, length: int) -> dict[str, np.ndarray]:
    masks: dict[str, np.ndarray] = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            m = masks.setdefault(row["variable"], np.zeros(length, dtype=bool))
            m[int(row["timestep"])] = True
    return masks


# --- derived channels -----------------------------------------------------------

def encode_timestamp(record: MtsRecord) -> MtsRecord:
    """Append a ``timestamp`` channel: time of day as a fraction of 1440 minutes.

    Integer-indexed records get the index position scaled to [0, 1] instead.
    """
    if TIMESTAMP_CHANNEL in record.names:
        return record
    M = len(record)
    if record.wall_clock:
        ts = record.timestamps.astype("datetime64[m]")
        minutes = (ts - ts.astype("datetime64[D]")).astype(np.int64)
        channel = minutes / 1440.0
    else:
        channel = np.arange(M) / (M - 1) if M > 1 else np.zeros(M)
    values = np.column_stack([record.values, channel])
    return MtsRecord(record.participant, record.interval, record.names + [TIMESTAMP_CHANNEL],
                     record.timestamps, values, dict(record.event_masks),
                     tuple(record.derived) + (TIMESTAMP_CHANNEL,), dict(record.meta))


# --- normalization, splits, windows -------------------------------------------

@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray
    names: list[str] = field(default_factory=list)

    @classmethod
    def fit(cls, values: np.ndarray | Iterable[np.ndarray], names: Sequence[str] = ()) -> "Normalizer":
        """Per-column mean/std over non-missing entries (population std, floored)."""
        if not isinstance(values, np.ndarray):
            values = np.vstack(list(values))
        values = np.asarray(values, dtype=np.float64)
        present = ~np.isnan(values)
        count = present.sum(axis=0)
        filled = np.where(present, values, 0.0)
        mean = np.divide(filled.sum(axis=0), count, out=np.zeros(values.shape[1]), where=count > 0)
        dev = np.where(present, values - mean, 0.0)
        var = np.divide((dev ** 2).sum(axis=0), count, out=np.ones(values.shape[1]), where=count > 0)
        std = np.maximum(np.sqrt(var), STD_FLOOR)
        return cls(mean, std, list(names))

    @classmethod
    def identity(cls, n: int) -> "Normalizer":
        return cls(np.zeros(n), np.ones(n))

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def inverse_transform(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.std + self.mean

    def inverse_target(self, y, index: int = 0) -> np.ndarray:
        return np.asarray(y, dtype=np.float64) * self.std[index] + self.mean[index]

    def transform_target(self, y, index: int = 0) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.mean[index]) / self.std[index]

    def to_dict(self) -> dict:
        return {"mean": [float(x).hex() for x in self.mean],
                "std": [float(x).hex() for x in self.std], "names": list(self.names)}

    @classmethod
    def from_dict(cls, doc: dict) -> "Normalizer":
        return cls(np.array([float.fromhex(x) for x in doc["mean"]]),
                   np.array([float.fromhex(x) for x in doc["std"]]), list(doc.get("names", [])))


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.6
    validation: float = 0.2
    test: float = 0.2

    def __post_init__(self):
        fr = (self.train, self.validation, self.test)
        if min(fr) <= 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be positive and sum to 1, got {fr}")

    def bounds(self, M: int) -> tuple[int, int]:
        a = int(np.floor(M * self.train))
        b = a + int(np.floor(M * self.validation))
        return a, b


def split_record(record: MtsRecord, split: SplitSpec) -> tuple[MtsRecord, MtsRecord, MtsRecord]:
    """Chronological train / validation / test slices."""
    a, b = split.bounds(len(record))
    return record.slice(0, a), record.slice(a, b), record.slice(b, len(record))


@dataclass
class MtsWindow:
    X: np.ndarray
    y: float
    participant: str
    start: int


def make_windows(record: MtsRecord, normalizer: Normalizer, T: int, H: int) -> list[MtsWindow]:
    """Stride-1 windows: ``X`` covers rows ``[s, s+T)``, the target is row ``s+T+H-1``.

    Values are z-normalized and missing entries imputed with 0 (the training
    mean). Windows whose target is missing are dropped.
    """
    if T < 1 or H < 1:
        raise ValueError("T and H must be positive")
    M = len(record)
    if M < T + H:
        warnings.warn(f"{record.participant}: {M} rows is fewer than T+H={T + H}; no windows")
        return []
    z = normalizer.transform(record.values)
    target = z[:, 0].copy()
    z = np.nan_to_num(z, nan=0.0)
    offset = record.meta.get("offset", 0)
    out = []
    for s in range(M - T - H + 1):
        y = target[s + T + H - 1]
        if np.isnan(y):
            continue
        out.append(MtsWindow(z[s:s + T].T.copy(), float(y), record.participant, offset + s))
    return out


def stack_windows(windows: Sequence[MtsWindow]) -> tuple[np.ndarray, np.ndarray]:
    if not windows:
        return np.zeros((0, 0, 0)), np.zeros(0)
    return np.stack([w.X for w in windows]), np.array([w.y for w in windows])


@dataclass
class PreparedData:
    names: list[str]
    normalizer: Normalizer
    train: list[MtsWindow]
    validation: list[MtsWindow]
    test: list[MtsWindow]
    records: list[MtsRecord]
    T: int
    H: int


def prepare(records: Sequence[MtsRecord], T: int, H: int, split: SplitSpec = SplitSpec()) -> PreparedData:
    """Split each record by time, fit one normalizer on the pooled training
    slices, and window every slice separately so no window crosses a boundary."""
    records = [encode_timestamp(r) for r in records]
    names = records[0].names
    for r in records[1:]:
        if r.names != names:
            raise DataError(f"{r.participant}: variables {r.names} differ from {names}")
    parts = [split_record(r, split) for r in records]
    norm = Normalizer.fit([p[0].values for p in parts], names)
    tr, va, te = [], [], []
    for p in parts:
        tr += make_windows(p[0], norm, T, H)
        va += make_windows(p[1], norm, T, H)
        te += make_windows(p[2], norm, T, H)
    return PreparedData(list(names), norm, tr, va, te, list(records), T, H)


# --- synthetic generator ----------------------------------------------------------

@dataclass
class SyntheticConfig:
    baseline: float = 140.0
    amplitude: float = 30.0
    meals_per_day: float = 4.0
    carbs_low: float = 20.0
    carbs_high: float = 80.0
    day_start_hour: float = 6.0
    day_end_hour: float = 22.0
    meal_gain: float = 2.0          # mg/dL per gram at the kernel peak
    meal_peak: float = 45.0         # minutes
    bolus_probability: float = 0.7
    bolus_offset_max: float = 15.0  # minutes after the meal
    carb_ratio: float = 10.0        # grams per unit
    bolus_gain: float = 15.0        # mg/dL per unit at the kernel peak
    bolus_peak: float = 75.0
    ar_phi: float = 0.9
    ar_sigma: float = 3.0
    hr_mean: float = 70.0
    hr_sd: float = 8.0
    hr_phi: float = 0.98
    clamp_low: float = 40.0
    clamp_high: float = 400.0
    sparse_fill: str = "zero"       # "zero": no event is 0 units; "missing": empty cell


SYNTHETIC_NAMES = ["glucose", "meal", "bolus", "heart_rate", "noise"]


def gamma_kernel(minutes: np.ndarray, peak: float) -> np.ndarray:
    """``(t/peak) * exp(1 - t/peak)`` for t >= 0: unit height at ``peak``, 0 before onset."""
    t = np.maximum(np.asarray(minutes, dtype=np.float64), 0.0) / peak
    return np.where(np.asarray(minutes) >= 0, t * np.exp(1.0 - t), 0.0)


def generate_synthetic(seed: int, days: int = 14, interval: float = 5.0,
                       config: SyntheticConfig | None = None,
                       participant: str = "synthetic") -> MtsRecord:
    """Glucose driven by a daily sinusoid, meal and bolus kernels, and AR(1) noise.

    Meal and bolus channels are sparse: observed on event rows only. The
    ground-truth event rows are kept in ``event_masks``. A ``timestamp``
    time-of-day channel is appended.
    """
    if days < 1:
        raise ValueError("days must be >= 1")
    cfg = config or SyntheticConfig()
    rng = np.random.default_rng(seed)
    steps_per_day = int(round(1440 / interval))
    M = days * steps_per_day
    minutes = np.arange(M) * interval

    meal = np.full(M, np.nan)
    bolus = np.full(M, np.nan)
    lo = int(np.ceil(cfg.day_start_hour * 60 / interval))
    hi = int(np.floor(cfg.day_end_hour * 60 / interval))
    for d in range(days):
        n_meals = rng.poisson(cfg.meals_per_day)
        slots = np.sort(rng.choice(np.arange(lo, hi), size=min(n_meals, hi - lo), replace=False))
        for s in slots:
            i = d * steps_per_day + s
            carbs = rng.uniform(cfg.carbs_low, cfg.carbs_high)
            meal[i] = carbs
            if rng.random() < cfg.bolus_probability:
                j = i + int(rng.integers(0, int(cfg.bolus_offset_max // interval) + 1))
                if j < M:
                    dose = round(carbs / cfg.carb_ratio * rng.uniform(0.8, 1.2), 1)
                    bolus[j] = dose if np.isnan(bolus[j]) else bolus[j] + dose

    glucose = cfg.baseline + cfg.amplitude * np.sin(2 * np.pi * minutes / 1440.0)
    for i in np.flatnonzero(~np.isnan(meal)):
        glucose += cfg.meal_gain * meal[i] * gamma_kernel(minutes - minutes[i], cfg.meal_peak)
    for i in np.flatnonzero(~np.isnan(bolus)):
        glucose -= cfg.bolus_gain * bolus[i] * gamma_kernel(minutes - minutes[i], cfg.bolus_peak)
    noise = np.empty(M)
    hr = np.empty(M)
    ar, hr_state = 0.0, 0.0
    hr_innov = cfg.hr_sd * np.sqrt(1 - cfg.hr_phi ** 2)
    for i in range(M):
        ar = cfg.ar_phi * ar + rng.normal(0.0, cfg.ar_sigma)
        hr_state = cfg.hr_phi * hr_state + rng.normal(0.0, hr_innov)
        noise[i] = ar
        hr[i] = cfg.hr_mean + hr_state
    glucose = np.clip(glucose + noise, cfg.clamp_low, cfg.clamp_high)
    distractor = rng.normal(0.0, 1.0, M)

    masks = {"meal": ~np.isnan(meal), "bolus": ~np.isnan(bolus)}
    if cfg.sparse_fill == "zero":
        meal, bolus = np.nan_to_num(meal), np.nan_to_num(bolus)
    elif cfg.sparse_fill != "missing":
        raise ValueError(f"sparse_fill must be 'zero' or 'missing', got {cfg.sparse_fill!r}")
    values = np.column_stack([glucose, meal, bolus, hr, distractor])
    timestamps = np.datetime64("2024-01-01T00:00", "m") + (minutes.astype(np.int64)).astype("timedelta64[m]")
    record = MtsRecord(participant, float(interval), list(SYNTHETIC_NAMES), timestamps, values,
                       masks,
                       meta={"generator": asdict(cfg), "seed": seed, "days": days})
    return encode_timestamp(record)
