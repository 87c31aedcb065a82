"""Randomized checks of receiver-independent sender ranking and the gap bound.

Each draw builds a small random model and random inputs, runs one traced
forward pass, and feeds every layer record to the checks in
:mod:`garnn.interpret`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .interpret import gap_report, static_ranking_check
from .model import GarnnModel, ModelConfig, TimestepAttention

GAP_TOLERANCE = 1e-12


def random_model(rng: np.random.Generator, variant: str, alpha: float, n_layers: int = 1,
                 n_vars: int | None = None, scale: float = 1.0) -> GarnnModel:
    """Small model with every parameter drawn from N(0, scale^2)."""
    N = n_vars or int(rng.integers(2, 7))
    cfg = ModelConfig(n_vars=N, embed_dim=int(rng.integers(2, 6)), attn_dim=int(rng.integers(2, 6)),
                      hidden_dim=4, mlp_hidden=4, n_layers=n_layers, variant=variant, alpha=alpha)
    params = {k: rng.normal(0.0, scale, s) for k, s in cfg.param_shapes().items()}
    return GarnnModel(cfg, params)


def random_trace(rng: np.random.Generator, variant: str, alpha: float, n_layers: int = 1,
                 T: int | None = None, batch: int = 2) -> list[TimestepAttention]:
    model = random_model(rng, variant, alpha, n_layers)
    T = T or int(rng.integers(1, 6))
    X = rng.normal(0.0, 2.0, (batch, model.config.n_vars, T))
    return model.forward(X, trace=True).trace


@dataclass
class CaseResult:
    """Aggregate over all draws for one (variant, alpha) pair."""

    variant: str
    alpha: float
    draws: int = 0
    cells: int = 0
    max_abs_gap: float = 0.0
    min_gap: float = np.inf
    max_violation: float = -np.inf
    bound_failures: int = 0
    negative_gaps: int = 0
    ranking_checked: int = 0
    ranking_failures: int = 0

    @property
    def gap_passed(self) -> bool:
        if self.alpha == 1.0:
            return self.max_abs_gap < GAP_TOLERANCE
        ok = self.bound_failures == 0
        if self.variant == "gat":
            ok = ok and self.negative_gaps == 0
        return ok

    @property
    def ranking_passed(self) -> bool:
        return self.ranking_failures == 0

    @property
    def passed(self) -> bool:
        return self.gap_passed and self.ranking_passed

    def add(self, records: Iterable[TimestepAttention]) -> None:
        self.draws += 1
        for rec in records:
            g = gap_report(rec)
            self.cells += g.gap.size
            self.max_abs_gap = max(self.max_abs_gap, g.max_abs_gap)
            self.min_gap = min(self.min_gap, float(g.gap.min()))
            self.max_violation = max(self.max_violation, g.max_violation)
            self.bound_failures += int(np.sum(np.abs(g.gap) > g.bound + g.slack()))
            self.negative_gaps += int(np.sum(g.gap < 0))
            s = static_ranking_check(rec)
            self.ranking_checked += s.n_checked
            self.ranking_failures += s.n_failed + s.n_importance_mismatch


@dataclass
class VerificationReport:
    cases: list[CaseResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.cases)

    def case(self, variant: str, alpha: float) -> CaseResult:
        return next(c for c in self.cases if c.variant == variant and c.alpha == alpha)

    def summary_lines(self) -> list[str]:
        lines = []
        for c in self.cases:
            lines.append(
                f"gap {c.variant} alpha={c.alpha:g}: {'PASS' if c.gap_passed else 'FAIL'} "
                f"draws={c.draws} cells={c.cells} max_gap={c.max_abs_gap:.3e} "
                f"min_gap={c.min_gap:.3e} max_violation={c.max_violation:.3e}")
        for c in self.cases:
            lines.append(
                f"static-ranking {c.variant} alpha={c.alpha:g}: {'PASS' if c.ranking_passed else 'FAIL'} "
                f"timesteps={c.ranking_checked} violations={c.ranking_failures}")
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        return lines


def verify_random(draws: int = 1000, variants: Sequence[str] = ("gat", "gatv2"),
                  alphas: Sequence[float] = (0.0, 0.2, 0.5, 1.0), n_layers: int = 1,
                  seed: int = 0) -> VerificationReport:
    report = VerificationReport()
    for variant in variants:
        for alpha in alphas:
            rng = np.random.default_rng([seed, int(round(alpha * 1000)), variant == "gatv2"])
            case = CaseResult(variant, float(alpha))
            for _ in range(draws):
                case.add(random_trace(rng, variant, float(alpha), n_layers))
            report.cases.append(case)
    return report


def verify_model(model: GarnnModel, X: np.ndarray, batch_size: int = 128) -> CaseResult:
    """Run both checks on a given model's traces over windows ``X``."""
    case = CaseResult(model.config.variant, model.config.alpha)
    for i in range(0, len(X), batch_size):
        case.add(model.forward(X[i:i + batch_size], trace=True).trace)
    return case
