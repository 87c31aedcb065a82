"""Forecast accuracy metrics in original glucose units (mg/dL)."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, NamedTuple

import numpy as np

HYPO_THRESHOLD = 70.0
HYPER_THRESHOLD = 180.0
METRIC_NAMES = ("rmse", "mape", "mae", "g_rmse", "time_lag")


def _pair(y, y_hat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.size == 0 or y.shape != y_hat.shape:
        raise ValueError(f"need equal-length nonempty inputs, got {y.shape} and {y_hat.shape}")
    return y, y_hat


def rmse(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.sqrt(np.mean((y_hat - y) ** 2)))


def mae(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.mean(np.abs(y_hat - y)))


def mape(y, y_hat) -> float:
    """Mean absolute percentage error, in percent. Requires ``y > 0``."""
    y, y_hat = _pair(y, y_hat)
    if np.any(y <= 0):
        raise ValueError("mape needs strictly positive reference values")
    return float(100.0 * np.mean(np.abs(y_hat - y) / y))


def glucose_penalty(y, y_hat, w_hypo: float = 2.5, w_hyper: float = 2.5,
                    low: float = HYPO_THRESHOLD, high: float = HYPER_THRESHOLD) -> np.ndarray:
    """Weight per sample: ``w_hypo`` for overestimating below ``low``,
    ``w_hyper`` for underestimating above ``high``, 1 otherwise."""
    if w_hypo < 1 or w_hyper < 1:
        raise ValueError("penalty weights must be >= 1")
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    p = np.ones_like(y)
    p[(y < low) & (y_hat > y)] = w_hypo
    p[(y > high) & (y_hat < y)] = w_hyper
    return p


def g_rmse(y, y_hat, w_hypo: float = 2.5, w_hyper: float = 2.5,
           low: float = HYPO_THRESHOLD, high: float = HYPER_THRESHOLD) -> float:
    y, y_hat = _pair(y, y_hat)
    p = glucose_penalty(y, y_hat, w_hypo, w_hyper, low, high)
    return float(np.sqrt(np.mean(p * (y_hat - y) ** 2)))


class LagResult(NamedTuple):
    minutes: float
    shift: int
    degenerate: bool
    correlations: tuple[float, ...]


def time_lag(y, y_hat, interval: float, max_shift: int) -> LagResult:
    """Shift (times ``interval``) maximizing corr(y_hat[t], y[t - shift]).

    Shifts run over 0..``max_shift``; ties go to the smaller shift. A constant
    series has no defined correlation, so the lag is reported as 0 with
    ``degenerate`` set.
    """
    y, y_hat = _pair(y, y_hat)
    M = len(y)
    if max_shift < 0 or M <= max_shift + 2:
        raise ValueError(f"series of length {M} too short for max shift {max_shift}")
    if np.ptp(y) == 0 or np.ptp(y_hat) == 0:
        return LagResult(0.0, 0, True, ())
    corrs = []
    for s in range(max_shift + 1):
        a, b = y_hat[s:], y[:M - s]
        if np.ptp(a) == 0 or np.ptp(b) == 0:
            corrs.append(-np.inf)
            continue
        corrs.append(float(np.corrcoef(a, b)[0, 1]))
    best = 0
    for s, c in enumerate(corrs):
        if c > corrs[best]:
            best = s
    return LagResult(best * interval, best, False, tuple(corrs))


@dataclass
class MetricReport:
    rmse: float
    mape: float
    mae: float
    g_rmse: float
    time_lag: float
    n: int = 0
    lag_degenerate: bool = False


def evaluate(y, y_hat, interval: float, horizon: int, w_hypo: float = 2.5,
             w_hyper: float = 2.5) -> MetricReport:
    """All metrics for one time-ordered series of forecasts."""
    y, y_hat = _pair(y, y_hat)
    lag = time_lag(y, y_hat, interval, horizon) if len(y) > horizon + 2 else LagResult(0.0, 0, True, ())
    return MetricReport(rmse(y, y_hat), mape(y, y_hat), mae(y, y_hat),
                        g_rmse(y, y_hat, w_hypo, w_hyper), lag.minutes, len(y), lag.degenerate)


def _sd(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(x.std(ddof=1)) if x.size > 1 else 0.0


@dataclass
class PooledMetric:
    mean: float
    sd_seeds: float
    sd_participants: float

    def format(self, digits: int = 2) -> str:
        return f"{self.mean:.{digits}f}±{self.sd_seeds:.{digits}f}({self.sd_participants:.{digits}f})"


def pool(results: Mapping[object, Mapping[str, MetricReport]]) -> dict[str, PooledMetric]:
    """``results[seed][participant]`` -> mean over seeds ± sd over seeds (sd over participants).

    Each seed's score is its mean over participants; the bracketed figure is
    the sample sd across participants of their seed-averaged scores.
    """
    seeds = list(results)
    participants = sorted({p for r in results.values() for p in r})
    out = {}
    for name in METRIC_NAMES:
        per_seed = [np.mean([getattr(results[s][p], name) for p in results[s]]) for s in seeds]
        per_part = [np.mean([getattr(results[s][p], name) for s in seeds if p in results[s]])
                    for p in participants]
        out[name] = PooledMetric(float(np.mean(per_seed)), _sd(per_seed), _sd(per_part))
    return out


def write_report_csv(results: Mapping[object, Mapping[str, MetricReport]], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "participant", *METRIC_NAMES, "n"])
        for seed, per in results.items():
            for part, rep in per.items():
                row = asdict(rep)
                w.writerow([seed, part, *(repr(float(row[k])) for k in METRIC_NAMES), rep.n])


def format_table(pooled: Mapping[str, Mapping[str, PooledMetric]], digits: int = 2) -> str:
    """Rows are methods, columns the metrics, cells ``mean±sd_1(sd_2)``."""
    header = ["method", "RMSE (mg/dL)", "MAPE (%)", "MAE (mg/dL)", "gRMSE (mg/dL)", "Time lag (min)"]
    rows = [[m] + [p[k].format(digits) for k in METRIC_NAMES] for m, p in pooled.items()]
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header] + rows]
    return "\n".join(lines) + "\n"
