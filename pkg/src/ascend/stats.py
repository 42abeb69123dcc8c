"""Conversion-rate estimation and significance testing.

Point estimates with binomial confidence intervals (Wald by default,
Wilson as the non-degenerate alternative), percent improvement over
control, the pooled two-proportion z-test, and the top-k report used by
the service and CLI.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Iterable, Sequence

_NORMAL = NormalDist()


class StatsError(ValueError):
    """Raised for undefined estimates (zero impressions, zero control rate)."""


@dataclass(frozen=True)
class FitnessEstimate:
    impressions: int
    conversions: int
    rate: float
    ci_low: float
    ci_high: float
    ci_level: float = 0.95


@dataclass(frozen=True)
class SignificanceResult:
    z_score: float
    p_value_two_sided: float
    significant_at: tuple[float, ...]


@dataclass(frozen=True)
class ReportRow:
    candidate_id: int
    estimate: FitnessEstimate
    improvement_pct: float
    significant_vs_control: bool


def z_critical(ci_level: float) -> float:
    return _NORMAL.inv_cdf(0.5 + ci_level / 2.0)


def wald_interval(
    conversions: int, impressions: int, ci_level: float = 0.95
) -> tuple[float, float]:
    rate = conversions / impressions
    z = z_critical(ci_level)
    half = z * math.sqrt(rate * (1.0 - rate) / impressions)
    return max(0.0, rate - half), min(1.0, rate + half)


def wilson_interval(
    conversions: int, impressions: int, ci_level: float = 0.95
) -> tuple[float, float]:
    rate = conversions / impressions
    z = z_critical(ci_level)
    z2 = z * z
    denom = 1.0 + z2 / impressions
    center = (rate + z2 / (2.0 * impressions)) / denom
    half = (
        z
        * math.sqrt(
            rate * (1.0 - rate) / impressions
            + z2 / (4.0 * impressions * impressions)
        )
        / denom
    )
    return max(0.0, center - half), min(1.0, center + half)


def estimate(
    conversions: int,
    impressions: int,
    ci_level: float = 0.95,
    method: str = "wald",
) -> FitnessEstimate:
    """Conversion-rate point estimate with a binomial confidence interval."""
    if impressions < 1:
        raise StatsError("cannot estimate a rate from zero impressions")
    if not 0 <= conversions <= impressions:
        raise StatsError("conversions must lie in [0, impressions]")
    if method == "wald":
        low, high = wald_interval(conversions, impressions, ci_level)
    elif method == "wilson":
        low, high = wilson_interval(conversions, impressions, ci_level)
    else:
        raise StatsError(f"unknown interval method {method!r}")
    rate = conversions / impressions
    return FitnessEstimate(
        impressions=impressions,
        conversions=conversions,
        rate=rate,
        ci_low=min(low, rate),
        ci_high=max(high, rate),
        ci_level=ci_level,
    )


def improvement_over_control(rate: float, control_rate: float) -> float:
    """Percent change of `rate` relative to `control_rate`."""
    if control_rate <= 0:
        raise StatsError("improvement is undefined for a zero control rate")
    return 100.0 * (rate - control_rate) / control_rate


def two_proportion_test(
    c1: int, i1: int, c2: int, i2: int
) -> SignificanceResult:
    """Pooled two-proportion z-test with a two-sided normal p-value."""
    if i1 < 1 or i2 < 1:
        raise StatsError("both samples need at least one impression")
    p1 = c1 / i1
    p2 = c2 / i2
    pooled = (c1 + c2) / (i1 + i2)
    variance = pooled * (1.0 - pooled) * (1.0 / i1 + 1.0 / i2)
    if variance <= 0.0:
        z = 0.0
        p_value = 1.0
    else:
        z = (p1 - p2) / math.sqrt(variance)
        p_value = 2.0 * (1.0 - _NORMAL.cdf(abs(z)))
    levels = tuple(
        level for level in (0.95, 0.99) if p_value < 1.0 - level
    )
    return SignificanceResult(
        z_score=z, p_value_two_sided=p_value, significant_at=levels
    )


def _row_sort_key(row: ReportRow) -> tuple[float, int, int]:
    # Descending rate, then better-confirmed (more impressions), then id.
    return (-row.estimate.rate, -row.estimate.impressions, row.candidate_id)


def top_k_report(
    candidates: Iterable[tuple[int, int, int]],
    control: tuple[int, int],
    k: int,
    ci_level: float = 0.95,
    method: str = "wald",
) -> list[ReportRow]:
    """Rank candidates against control.

    `candidates` yields (candidate_id, conversions, impressions) triples;
    `control` is (conversions, impressions). Returns at most k rows in
    descending rate order, each flagged for 95%-level significance of its
    difference from control. No multiple-comparison adjustment is applied.
    """
    control_conversions, control_impressions = control
    if control_impressions < 1:
        raise StatsError("control needs at least one impression")
    control_rate = control_conversions / control_impressions
    rows = []
    for candidate_id, conversions, impressions in candidates:
        est = estimate(conversions, impressions, ci_level, method)
        test = two_proportion_test(
            conversions, impressions, control_conversions, control_impressions
        )
        improvement = (
            improvement_over_control(est.rate, control_rate)
            if control_rate > 0
            else math.inf if est.rate > 0 else 0.0
        )
        rows.append(
            ReportRow(
                candidate_id=candidate_id,
                estimate=est,
                improvement_pct=improvement,
                significant_vs_control=0.95 in test.significant_at,
            )
        )
    rows.sort(key=_row_sort_key)
    return rows[:k] if k < len(rows) else rows


REPORT_CSV_HEADER = (
    "candidate_id,genome,impressions,conversions,rate,"
    "ci_low,ci_high,improvement_pct,significant_95"
)


def report_csv_line(row: ReportRow, genome_label: str) -> str:
    est = row.estimate
    return (
        f"{row.candidate_id},{genome_label},{est.impressions},"
        f"{est.conversions},{est.rate:.6f},{est.ci_low:.6f},"
        f"{est.ci_high:.6f},{row.improvement_pct:.4f},"
        f"{str(row.significant_vs_control).lower()}"
    )
