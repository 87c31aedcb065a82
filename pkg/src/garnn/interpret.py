"""Variable importance read directly off the attention keys.

For a sender ``j`` the linearized score from any receiver ``n`` splits into
``a1.q_n + a2.k_j``: a receiver-only constant plus a sender-only term. The
sender term ``a2.k_j`` is the per-timestep importance; averaging it over
layers, timesteps and examples gives a dataset-level ranking. The helpers
here also measure how far the real (LeakyReLU) scores sit from their
linearization, and check that the sender ranking does not depend on the
receiver.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from .model import GarnnModel, GraphAttentionLayer, TimestepAttention


# --- per-timestep quantities ---------------------------------------------------

def mean_raw_score(record: TimestepAttention) -> np.ndarray:
    """Average post-LeakyReLU score each sender receives: ``[..., N]``."""
    return record.scores.mean(axis=-2)


def linearized_pair_scores(record: TimestepAttention) -> np.ndarray:
    """``a1.q_n + a2.k_j`` for every receiver ``n`` (axis -2) and sender ``j`` (axis -1)."""
    recv = record.queries @ record.a1
    send = record.keys @ record.a2
    return recv[..., :, None] + send[..., None, :]


def variable_importance_t(layer: GraphAttentionLayer | np.ndarray, key: np.ndarray) -> np.ndarray:
    """``a2 . k`` for a key vector (or a stack of them on the last axis)."""
    a2 = layer.arrays().a2 if isinstance(layer, GraphAttentionLayer) else np.asarray(layer)
    return np.asarray(key, dtype=np.float64) @ a2


def layer_importance(record: TimestepAttention) -> np.ndarray:
    return record.keys @ record.a2


def importance_from_trace(trace: Sequence[TimestepAttention]) -> np.ndarray:
    """Layer-averaged importance as ``[B, N, T]`` from a batched model trace."""
    v = np.mean([layer_importance(r) for r in trace], axis=0)  # [B, T, N]
    return np.swapaxes(v, -1, -2)


def importance_matrix(model: GarnnModel, X: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Importance ``v[i, j, t]`` for windows ``X`` of shape ``[I, N, T]``."""
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 2
    if single:
        X = X[None]
    out = [importance_from_trace(model.forward(X[i:i + batch_size], trace=True).trace)
           for i in range(0, len(X), batch_size)]
    v = np.concatenate(out) if out else np.zeros((0,) + X.shape[1:])
    return v[0] if single else v


# --- dataset-level ranking -------------------------------------------------------

def rank_order(values: np.ndarray) -> np.ndarray:
    """Indices by descending value; equal values keep index order."""
    values = np.asarray(values, dtype=np.float64)
    return np.lexsort((np.arange(len(values)), -values))


@dataclass
class ImportanceRanking:
    values: np.ndarray
    order: np.ndarray
    names: list[str]

    @property
    def ranks(self) -> np.ndarray:
        """1-based rank place of each variable."""
        r = np.empty(len(self.order), dtype=int)
        r[self.order] = np.arange(1, len(self.order) + 1)
        return r

    def rank_of(self, name: str) -> int:
        return int(self.ranks[self.names.index(name)])

    def ordered_names(self) -> list[str]:
        return [self.names[i] for i in self.order]


def dataset_importance(matrices, names: Sequence[str] | None = None,
                       mask: np.ndarray | None = None) -> ImportanceRanking:
    """Mean of ``v[i, j, t]`` over examples and timesteps for each variable.

    ``mask`` (same shape, boolean) restricts the average to selected cells;
    by default every timestep counts, padded ones included.
    """
    v = np.asarray(matrices, dtype=np.float64)
    if v.ndim == 2:
        v = v[None]
    if v.ndim != 3 or len(v) == 0:
        raise ValueError("need a nonempty stack of [N, T] importance matrices")
    if mask is None:
        values = v.mean(axis=(0, 2))
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), v.shape)
        count = mask.sum(axis=(0, 2))
        values = np.where(mask, v, 0.0).sum(axis=(0, 2)) / np.maximum(count, 1)
    n = v.shape[1]
    names = list(names) if names is not None else [f"var{j}" for j in range(n)]
    return ImportanceRanking(values, rank_order(values), names)


def feature_map(matrix: np.ndarray) -> np.ndarray:
    """Global min-max scaling to [0, 1]; a constant matrix maps to 0.5 everywhere."""
    m = np.asarray(matrix, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi == lo:
        return np.full(m.shape, 0.5)
    return (m - lo) / (hi - lo)


# --- linearization gap -------------------------------------------------------------

@dataclass
class GapReport:
    """Per (leading index, sender) comparison of raw and linearized mean scores."""

    variant: str
    alpha: float
    raw: np.ndarray
    linear: np.ndarray
    gap: np.ndarray
    bound: np.ndarray

    def slack(self) -> np.ndarray:
        # rounding allowance for comparing two separately summed quantities
        return 1e-12 * (1.0 + np.abs(self.raw) + np.abs(self.linear))

    @property
    def within_bound(self) -> bool:
        return bool(np.all(np.abs(self.gap) <= self.bound + self.slack()))

    @property
    def nonnegative(self) -> bool:
        return bool(np.all(self.gap >= 0.0))

    @property
    def max_abs_gap(self) -> float:
        return float(np.max(np.abs(self.gap))) if self.gap.size else 0.0

    @property
    def max_violation(self) -> float:
        return float(np.max(np.abs(self.gap) - self.bound)) if self.gap.size else 0.0


def gap_report(record: TimestepAttention) -> GapReport:
    """Compare mean raw scores with their LeakyReLU-free counterparts.

    The bound is Cauchy-Schwarz on ``a . mean_n((I~ - I) m)``, where the
    diagonal ``I~`` holds 1 for nonnegative pre-activation entries and
    ``alpha`` for negative ones. For GAT the pre-activation is the inner
    product of ``[a1; a2]`` with ``[q_n; k_j]``, and the bound is taken over
    that concatenated vector.
    """
    if record.preact is None:
        raise ValueError("attention record has no pre-activations")
    alpha = record.alpha
    raw = mean_raw_score(record)
    pre = record.preact
    N = record.scores.shape[-1]
    if record.variant == "gatv2":
        if pre.ndim != record.scores.ndim + 1:
            raise ValueError("GATv2 record needs pre-activation vectors")
        linear = (pre @ record.a1).mean(axis=-2)
        ind = np.where(pre >= 0, 1.0, alpha)
        d = ((ind - 1.0) * pre).mean(axis=-3)  # [..., N(sender), A]
        bound = np.linalg.norm(record.a1) * np.linalg.norm(d, axis=-1)
    else:
        if pre.shape != record.scores.shape:
            raise ValueError("GAT record needs scalar pre-activations")
        linear = pre.mean(axis=-2)
        c = np.where(pre >= 0, 1.0, alpha) - 1.0  # [..., n, j]
        u = np.einsum("...nj,...na->...ja", c, record.queries) / N
        w = c.mean(axis=-2)[..., None] * record.keys
        a = np.concatenate([record.a1, record.a2])
        bound = np.linalg.norm(a) * np.sqrt((u ** 2).sum(-1) + (w ** 2).sum(-1))
    return GapReport(record.variant, alpha, raw, linear, raw - linear, bound)


def trace_gaps(trace: Sequence[TimestepAttention]) -> list[GapReport]:
    return [gap_report(r) for r in trace]


# --- static ranking ------------------------------------------------------------------

@dataclass
class StaticRankingReport:
    passed: bool
    n_checked: int
    n_failed: int
    n_importance_mismatch: int


def _orders(x: np.ndarray) -> np.ndarray:
    return np.argsort(-x, axis=-1, kind="stable")


def static_ranking_check(record: TimestepAttention) -> StaticRankingReport:
    """Sender ranking by linearized score must be the same for every receiver
    and match the ranking by ``a2 . k``."""
    orders = _orders(linearized_pair_scores(record))  # [..., n, rank]
    same = np.all(orders == orders[..., :1, :], axis=(-1, -2))
    v_order = _orders(layer_importance(record))
    match = np.all(orders[..., 0, :] == v_order, axis=-1)
    ok = same & match
    return StaticRankingReport(bool(ok.all()), int(ok.size), int((~same).sum()), int((~match).sum()))


def dynamic_ranking_agreement(record: TimestepAttention) -> np.ndarray:
    """Per leading index, whether the raw-score sender ranking is receiver-independent.

    ``False`` entries are expected for GATv2 and are not errors.
    """
    orders = _orders(record.scores)
    return np.all(orders == orders[..., :1, :], axis=(-1, -2))


# --- ablation oracle -----------------------------------------------------------------

def ablation_oracle(model: GarnnModel, X: np.ndarray, j: int, base: np.ndarray | None = None,
                    scale: float = 1.0) -> float:
    """Mean |change| in prediction when channel ``j`` is set to its imputation value 0."""
    X = np.asarray(X, dtype=np.float64)
    if base is None:
        base = model.predict(X)
    Xa = X.copy()
    Xa[:, j, :] = 0.0
    return float(np.mean(np.abs(model.predict(Xa) - base)) * scale)


def ablation_profile(model: GarnnModel, X: np.ndarray, channels: Sequence[int] | None = None,
                     scale: float = 1.0) -> np.ndarray:
    base = model.predict(X)
    channels = range(X.shape[1]) if channels is None else channels
    return np.array([ablation_oracle(model, X, j, base, scale) for j in channels])


def spearman(a, b) -> float:
    return float(spearmanr(a, b).statistic)


# --- exports -------------------------------------------------------------------------

def write_importance_csv(matrix: np.ndarray, names: Sequence[str], path) -> None:
    """Rows are variables, columns timesteps 1..T."""
    m = np.asarray(matrix)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variable"] + [f"t{t + 1}" for t in range(m.shape[1])])
        for name, row in zip(names, m):
            w.writerow([name] + [repr(float(x)) for x in row])


def read_importance_csv(path) -> tuple[list[str], np.ndarray]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    return [r[0] for r in rows[1:]], np.array([[float(x) for x in r[1:]] for r in rows[1:]])


def write_ranking_csv(ranking: ImportanceRanking, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "variable", "importance", "scaled"])
        scaled = feature_map(ranking.values[None])[0]
        for place, j in enumerate(ranking.order, start=1):
            w.writerow([place, ranking.names[j], repr(float(ranking.values[j])), repr(float(scaled[j]))])
