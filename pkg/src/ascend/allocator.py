"""Traffic routing: sticky user assignment and conversion attribution.

Each incoming user is routed to a design and keeps seeing it within a
TTL window. New users fall into the control holdout with a fixed
probability (decided by hashing the user id, so no shared RNG stream is
consumed); everyone else goes to the active candidate furthest from its
maturity quota. Once every quota is filled, overflow traffic exploits
the current elites proportionally to their estimated rates.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

from .experiment import (
    KIND_ASSIGNMENT,
    KIND_CONVERSION,
    KIND_IMPRESSION,
    STATUS_RUNNING,
    ExperimentError,
    unit_hash,
)

if TYPE_CHECKING:
    from .evolution import Candidate
    from .experiment import ExperimentState


@dataclass(frozen=True)
class AssignResult:
    candidate_id: int
    sticky_until: int
    fresh: bool  # False when an unexpired sticky assignment was reused


@dataclass(frozen=True)
class ConversionResult:
    attributed: bool
    candidate_id: int | None


def _sticky_candidate(
    state: "ExperimentState", user_id: str, now: int
) -> int | None:
    assignment = state.assignments.get(user_id)
    if assignment is None or now >= assignment.expires_at:
        return None
    candidate = state.candidates.get(assignment.candidate_id)
    if candidate is None or candidate.status == "discarded":
        # The sticky design was discarded by a generation change; treat
        # the user as new and drop the stale record.
        del state.assignments[user_id]
        return None
    return assignment.candidate_id


def _overflow_pick(state: "ExperimentState", user_id: str) -> "Candidate":
    """Rate-proportionate pick among active candidates once quotas are full."""
    active = sorted(state.active_candidates(), key=lambda c: c.id)
    total = sum(c.rate for c in active)
    if total <= 0.0:
        return min(active, key=lambda c: (c.gen_impressions, c.id))
    point = unit_hash(
        state.cfg.rng_seed, "overflow", user_id, state.total_interactions
    ) * total
    cumulative = 0.0
    for candidate in active:
        cumulative += candidate.rate
        if point < cumulative:
            return candidate
    return active[-1]


def assign(state: "ExperimentState", user_id: str, now: int) -> AssignResult:
    """Route a user to a design, recording the assignment and impression.

    A returning user inside the TTL gets the same candidate; by default
    that revisit does not count a new impression (one evaluation per
    assignment), unless the experiment is configured to count per visit.
    """
    if state.status != STATUS_RUNNING:
        raise ExperimentError(
            f"experiment is {state.status}; assignment rejected"
        )
    sticky = _sticky_candidate(state, user_id, now)
    if sticky is not None:
        if state.config.count_sticky_revisits:
            state.emit(
                KIND_IMPRESSION,
                {"user_id": user_id, "candidate_id": sticky},
                now,
            )
        return AssignResult(
            candidate_id=sticky,
            sticky_until=state.assignments[user_id].expires_at,
            fresh=False,
        )

    holdout = state.cfg.control_holdout_fraction
    if holdout > 0.0 and unit_hash(
        state.cfg.rng_seed, "holdout", user_id
    ) < holdout:
        candidate = state.control
    elif state.maturity_filled():
        candidate = _overflow_pick(state, user_id)
    else:
        candidate = state.least_filled_active()
        if candidate is None:
            candidate = state.control
    expires_at = now + state.config.sticky_ttl_ms
    state.emit(
        KIND_ASSIGNMENT,
        {
            "user_id": user_id,
            "candidate_id": candidate.id,
            "assigned_at": now,
            "expires_at": expires_at,
        },
        now,
    )
    return AssignResult(
        candidate_id=candidate.id, sticky_until=expires_at, fresh=True
    )


def record_conversion(
    state: "ExperimentState", user_id: str, now: int
) -> ConversionResult:
    """Attribute a conversion to the user's active assignment, once.

    Repeat conversions within one assignment are idempotent no-ops: the
    conversion counter stays a binomial count (one success per trial).
    Conversions without a live assignment are logged as unattributed.
    """
    assignment = state.assignments.get(user_id)
    if assignment is None or now >= assignment.expires_at:
        state.emit(
            KIND_CONVERSION,
            {"user_id": user_id, "candidate_id": None, "attributed": False},
            now,
        )
        return ConversionResult(attributed=False, candidate_id=None)
    if assignment.converted:
        return ConversionResult(
            attributed=True, candidate_id=assignment.candidate_id
        )
    state.emit(
        KIND_CONVERSION,
        {
            "user_id": user_id,
            "candidate_id": assignment.candidate_id,
            "attributed": True,
        },
        now,
    )
    return ConversionResult(
        attributed=True, candidate_id=assignment.candidate_id
    )


def maturity_status(state: "ExperimentState") -> dict[int, int]:
    """Remaining impressions toward maturity for every active candidate."""
    return state.maturity_shortfalls()
