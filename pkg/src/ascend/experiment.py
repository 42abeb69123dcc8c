"""The replayable experiment state machine.

Every mutation is expressed as a log record; `ExperimentState.apply`
is the single transition function used both live and during replay, so
a fold over the event log always reconstructs the live state exactly.
Randomness that feeds breeding comes from one seeded generator whose
state is checkpointed inside the records that consume it; per-user
decisions (control holdout, simulated conversions) are derived by
hashing instead, so they never advance a shared stream.
"""
from __future__ import annotations

import hashlib
import heapq
import random
import time
from dataclasses import dataclass, field
from typing import Any, Callable

from . import evolution as evo
from . import stats
from .evolution import (
    Candidate,
    CandidateFitness,
    EvolutionConfig,
    EvolutionError,
    GenerationReport,
    STATUS_ACTIVE,
    STATUS_CONTROL,
    STATUS_DISCARDED,
)
from .search_space import (
    DEFAULT_ENUMERATION_CAP,
    ElementSpec,
    Genome,
    SearchSpace,
    design_of,
)

SCHEMA_VERSION = 1

KIND_CREATED = "experiment_created"
KIND_ASSIGNMENT = "assignment"
KIND_IMPRESSION = "impression"
KIND_CONVERSION = "conversion"
KIND_GENERATION = "generation_advanced"
KIND_STOPPED = "stopped"

STATUS_DRAFT = "draft"
STATUS_RUNNING = "running"
STATUS_STOPPED = "stopped"

DEFAULT_STICKY_TTL_MS = 24 * 60 * 60 * 1000


class ExperimentError(RuntimeError):
    """Raised on invalid state transitions (stopped experiment, bad seq)."""


def unit_hash(*parts: Any) -> float:
    """Deterministic hash of the parts mapped into [0, 1)."""
    digest = hashlib.blake2b(
        repr(parts).encode("utf-8"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "big") / 2.0**64


def now_ms() -> int:
    return int(time.time() * 1000)


@dataclass
class Assignment:
    """A user's sticky design assignment within one TTL window."""

    user_id: str
    candidate_id: int
    assigned_at: int
    expires_at: int
    converted: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    space: SearchSpace
    evolution: EvolutionConfig
    sticky_ttl_ms: int = DEFAULT_STICKY_TTL_MS
    count_sticky_revisits: bool = False
    crossover: str = evo.CROSSOVER_SINGLE_POINT
    auto_advance: bool = True
    interaction_budget: int | None = None
    improvement_target_pct: float | None = None
    enumeration_cap: int = DEFAULT_ENUMERATION_CAP
    display: dict = field(default_factory=dict)

    def to_document(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "space": {
                "elements": [
                    {"name": e.name, "values": list(e.values)}
                    for e in self.space.elements
                ]
            },
            "evolution": {
                "population_size": self.evolution.population_size,
                "maturity_age": self.evolution.maturity_age,
                "mutation_probability": self.evolution.mutation_probability,
                "max_generations": self.evolution.max_generations,
                "rng_seed": self.evolution.rng_seed,
                "initial_population_cap": self.evolution.initial_population_cap,
                "control_holdout_fraction": self.evolution.control_holdout_fraction,
            },
            "allocator": {
                "sticky_ttl_ms": self.sticky_ttl_ms,
                "count_sticky_revisits": self.count_sticky_revisits,
            },
            "stopping": {
                "interaction_budget": self.interaction_budget,
                "improvement_target_pct": self.improvement_target_pct,
            },
            "crossover": self.crossover,
            "auto_advance": self.auto_advance,
            "enumeration_cap": self.enumeration_cap,
            "display": self.display,
        }

    @staticmethod
    def from_document(doc: dict) -> "ExperimentConfig":
        space = SearchSpace(
            tuple(
                ElementSpec(e["name"], tuple(e["values"]))
                for e in doc["space"]["elements"]
            )
        )
        evo_doc = doc.get("evolution", {})
        evolution_cfg = EvolutionConfig(
            population_size=evo_doc.get("population_size", 8),
            maturity_age=evo_doc.get("maturity_age", 2000),
            mutation_probability=evo_doc.get("mutation_probability", 0.2),
            max_generations=evo_doc.get("max_generations", 4),
            rng_seed=evo_doc.get("rng_seed", 42),
            initial_population_cap=evo_doc.get("initial_population_cap", 200),
            control_holdout_fraction=evo_doc.get(
                "control_holdout_fraction", 0.1
            ),
        )
        allocator_doc = doc.get("allocator", {})
        stopping_doc = doc.get("stopping", {})
        return ExperimentConfig(
            name=doc["name"],
            space=space,
            evolution=evolution_cfg,
            sticky_ttl_ms=allocator_doc.get(
                "sticky_ttl_ms", DEFAULT_STICKY_TTL_MS
            ),
            count_sticky_revisits=allocator_doc.get(
                "count_sticky_revisits", False
            ),
            crossover=doc.get("crossover", evo.CROSSOVER_SINGLE_POINT),
            auto_advance=doc.get("auto_advance", True),
            interaction_budget=stopping_doc.get("interaction_budget"),
            improvement_target_pct=stopping_doc.get("improvement_target_pct"),
            enumeration_cap=doc.get(
                "enumeration_cap", DEFAULT_ENUMERATION_CAP
            ),
            display=doc.get("display", {}),
        )


def _rng_state_to_json(state: tuple) -> list:
    version, internal, gauss = state
    return [version, list(internal), gauss]


def _rng_state_from_json(doc: list) -> tuple:
    version, internal, gauss = doc
    return (version, tuple(internal), gauss)


def _candidate_to_json(c: Candidate) -> dict:
    return {
        "id": c.id,
        "genome": list(c.genome.choices),
        "birth_generation": c.birth_generation,
        "impressions": c.impressions,
        "conversions": c.conversions,
        "status": c.status,
        "gen_impressions": c.gen_impressions,
    }


def _candidate_from_json(doc: dict) -> Candidate:
    return Candidate(
        id=doc["id"],
        genome=Genome(tuple(doc["genome"])),
        birth_generation=doc.get("birth_generation", 0),
        impressions=doc.get("impressions", 0),
        conversions=doc.get("conversions", 0),
        status=doc.get("status", STATUS_ACTIVE),
        gen_impressions=doc.get("gen_impressions", 0),
    )


def _report_to_json(report: GenerationReport) -> dict:
    return {
        "generation": report.generation,
        "fitness": [
            {
                "candidate_id": f.candidate_id,
                "impressions": f.impressions,
                "conversions": f.conversions,
                "rate": f.rate,
                "ci_low": f.ci_low,
                "ci_high": f.ci_high,
            }
            for f in report.fitness
        ],
        "retained_ids": list(report.retained_ids),
        "discarded_ids": list(report.discarded_ids),
        "best_candidate_id": report.best_candidate_id,
    }


def report_from_json(doc: dict) -> GenerationReport:
    return GenerationReport(
        generation=doc["generation"],
        fitness=tuple(
            CandidateFitness(
                candidate_id=f["candidate_id"],
                impressions=f["impressions"],
                conversions=f["conversions"],
                rate=f["rate"],
                ci_low=f["ci_low"],
                ci_high=f["ci_high"],
            )
            for f in doc["fitness"]
        ),
        retained_ids=tuple(doc["retained_ids"]),
        discarded_ids=tuple(doc["discarded_ids"]),
        best_candidate_id=doc["best_candidate_id"],
    )


class ExperimentState:
    """Mutable experiment state, reconstructible by folding its event log.

    Single-writer: callers must serialize all mutating calls (the service
    holds a per-experiment lock; the simulator is single-threaded).
    """

    def __init__(
        self,
        config: ExperimentConfig,
        sink: Callable[[dict], None] | None = None,
    ) -> None:
        self.config = config
        self.space = config.space
        self.cfg = config.evolution
        self.sink = sink
        self.status = STATUS_DRAFT
        self.generation = 0
        self.candidates: dict[int, Candidate] = {}
        self.assignments: dict[str, Assignment] = {}
        self.total_interactions = 0
        self.unattributed_conversions = 0
        self.next_seq = 1
        self.next_candidate_id = 0
        self.stop_reason: str | None = None
        self.generation_history: list[GenerationReport] = []
        self.rng = random.Random()
        self._heap: list[tuple[int, int]] = []
        self._immature = 0  # active candidates still short of maturity

    # ------------------------------------------------------------------
    # record construction

    def emit(self, kind: str, payload: dict, ts: int) -> dict:
        record = {
            "schema_version": SCHEMA_VERSION,
            "seq": self.next_seq,
            "kind": kind,
            "ts": ts,
            "payload": payload,
        }
        self.apply(record)
        if self.sink is not None:
            self.sink(record)
        return record

    # ------------------------------------------------------------------
    # the transition function (shared by live path and replay)

    def apply(self, record: dict) -> None:
        if record["seq"] != self.next_seq:
            raise ExperimentError(
                f"sequence gap: got {record['seq']}, expected {self.next_seq}"
            )
        handler = self._HANDLERS[record["kind"]]
        handler(self, record["payload"], record["ts"])
        self.next_seq += 1

    def _apply_created(self, payload: dict, ts: int) -> None:
        if self.status != STATUS_DRAFT:
            raise ExperimentError("experiment already started")
        for doc in payload["candidates"]:
            candidate = _candidate_from_json(doc)
            self.candidates[candidate.id] = candidate
        self.next_candidate_id = max(self.candidates) + 1
        self.rng.setstate(_rng_state_from_json(payload["rng_state"]))
        self.status = STATUS_RUNNING
        self._rebuild_heap()

    def _apply_assignment(self, payload: dict, ts: int) -> None:
        candidate = self.candidates[payload["candidate_id"]]
        self.assignments[payload["user_id"]] = Assignment(
            user_id=payload["user_id"],
            candidate_id=candidate.id,
            assigned_at=payload["assigned_at"],
            expires_at=payload["expires_at"],
        )
        self._count_impression(candidate)

    def _apply_impression(self, payload: dict, ts: int) -> None:
        self._count_impression(self.candidates[payload["candidate_id"]])

    def _apply_conversion(self, payload: dict, ts: int) -> None:
        if not payload["attributed"]:
            self.unattributed_conversions += 1
            return
        assignment = self.assignments[payload["user_id"]]
        assignment.converted = True
        self.candidates[payload["candidate_id"]].conversions += 1

    def _apply_generation(self, payload: dict, ts: int) -> None:
        report = report_from_json(payload["report"])
        for candidate_id in report.discarded_ids:
            self.candidates[candidate_id].status = STATUS_DISCARDED
        for candidate in self.candidates.values():
            candidate.gen_impressions = 0
        for doc in payload["offspring"]:
            candidate = _candidate_from_json(doc)
            self.candidates[candidate.id] = candidate
            self.next_candidate_id = max(
                self.next_candidate_id, candidate.id + 1
            )
        self.rng.setstate(_rng_state_from_json(payload["rng_state"]))
        self.generation += 1
        self.generation_history.append(report)
        self._rebuild_heap()

    def _apply_stopped(self, payload: dict, ts: int) -> None:
        self.status = STATUS_STOPPED
        self.stop_reason = payload["reason"]

    _HANDLERS = {
        KIND_CREATED: _apply_created,
        KIND_ASSIGNMENT: _apply_assignment,
        KIND_IMPRESSION: _apply_impression,
        KIND_CONVERSION: _apply_conversion,
        KIND_GENERATION: _apply_generation,
        KIND_STOPPED: _apply_stopped,
    }

    def _count_impression(self, candidate: Candidate) -> None:
        candidate.impressions += 1
        self.total_interactions += 1
        if candidate.status == STATUS_ACTIVE:
            candidate.gen_impressions += 1
            if candidate.gen_impressions == self.cfg.maturity_age:
                self._immature -= 1
            heapq.heappush(
                self._heap, (candidate.gen_impressions, candidate.id)
            )

    def _rebuild_heap(self) -> None:
        active = [
            c for c in self.candidates.values() if c.status == STATUS_ACTIVE
        ]
        self._heap = [(c.gen_impressions, c.id) for c in active]
        heapq.heapify(self._heap)
        self._immature = sum(
            1 for c in active if c.gen_impressions < self.cfg.maturity_age
        )

    # ------------------------------------------------------------------
    # queries

    @property
    def control(self) -> Candidate:
        return self.candidates[0]

    def active_candidates(self) -> list[Candidate]:
        return [c for c in self.candidates.values() if c.is_active]

    def least_filled_active(self) -> Candidate | None:
        """Active candidate with the fewest impressions this generation."""
        while self._heap:
            count, candidate_id = self._heap[0]
            candidate = self.candidates.get(candidate_id)
            if (
                candidate is None
                or not candidate.is_active
                or candidate.gen_impressions != count
            ):
                heapq.heappop(self._heap)
                continue
            return candidate
        return None

    def maturity_shortfalls(self) -> dict[int, int]:
        m = self.cfg.maturity_age
        return {
            c.id: max(0, m - c.gen_impressions)
            for c in self.candidates.values()
            if c.is_active
        }

    def maturity_filled(self) -> bool:
        return self._immature == 0

    def best_so_far(self) -> Candidate | None:
        """Best matured non-control candidate by cumulative estimated rate."""
        matured = [
            c
            for c in self.candidates.values()
            if c.status != STATUS_CONTROL
            and c.impressions >= self.cfg.maturity_age
        ]
        if not matured:
            return None
        return min(matured, key=evo.retention_sort_key)

    def design_payload(self, candidate_id: int) -> dict[str, str]:
        return design_of(self.space, self.candidates[candidate_id].genome)

    # ------------------------------------------------------------------
    # lifecycle transitions (live path)

    def start(self, ts: int | None = None) -> dict:
        if self.status != STATUS_DRAFT:
            raise ExperimentError("experiment already started")
        ts = now_ms() if ts is None else ts
        rng = random.Random(self.cfg.rng_seed)
        population = evo.initialize_population(self.space, self.cfg, rng)
        payload = {
            "candidates": [_candidate_to_json(c) for c in population],
            "rng_state": _rng_state_to_json(rng.getstate()),
        }
        return self.emit(KIND_CREATED, payload, ts)

    def advance(self, ts: int | None = None) -> tuple[GenerationReport, str | None]:
        """Close the current generation: rank, retain, discard, breed.

        Breeding is skipped when the new generation index triggers a stop
        rule, so the final generation is evaluated but produces no
        offspring that would never be tested.
        """
        if self.status != STATUS_RUNNING:
            raise ExperimentError("experiment is not running")
        shortfalls = {
            cid: left for cid, left in self.maturity_shortfalls().items() if left
        }
        if shortfalls:
            raise EvolutionError(
                f"maturity not reached; remaining impressions: {shortfalls}"
            )
        ts = now_ms() if ts is None else ts
        evaluated = [
            c for c in self.candidates.values() if c.is_active
        ]
        retained, discarded = evo.rank_for_retention(
            evaluated, self.cfg.population_size
        )
        fitness = tuple(
            CandidateFitness(
                candidate_id=c.id,
                impressions=c.impressions,
                conversions=c.conversions,
                rate=c.rate,
                ci_low=stats.estimate(c.conversions, c.impressions).ci_low,
                ci_high=stats.estimate(c.conversions, c.impressions).ci_high,
            )
            for c in sorted(evaluated, key=lambda c: c.id)
        )
        new_generation = self.generation + 1
        reason = self._stop_reason_for(new_generation)
        if reason is None:
            parents = retained if retained else [self.control]
            offspring = evo.breed(
                parents,
                self.space,
                self.cfg,
                self.rng,
                next_id=self.next_candidate_id,
                birth_generation=new_generation,
                taken_genomes={
                    c.genome.choices for c in retained
                }
                | {self.control.genome.choices},
                crossover_kind=self.config.crossover,
            )
        else:
            offspring = []
        best = self.best_so_far()
        report = GenerationReport(
            generation=self.generation,
            fitness=fitness,
            retained_ids=tuple(c.id for c in retained),
            discarded_ids=tuple(c.id for c in discarded),
            best_candidate_id=best.id if best else None,
        )
        payload = {
            "report": _report_to_json(report),
            "offspring": [_candidate_to_json(c) for c in offspring],
            "rng_state": _rng_state_to_json(self.rng.getstate()),
        }
        self.emit(KIND_GENERATION, payload, ts)
        if reason is not None:
            self.stop(reason=reason, ts=ts)
        return report, reason

    def stop(self, reason: str = "manual", ts: int | None = None) -> dict:
        if self.status == STATUS_STOPPED:
            raise ExperimentError("experiment already stopped")
        ts = now_ms() if ts is None else ts
        return self.emit(KIND_STOPPED, {"reason": reason}, ts)

    def _stop_reason_for(self, new_generation: int) -> str | None:
        best = self.best_so_far()
        best_ci_low = best_improvement = control_ci_high = None
        if (
            self.config.improvement_target_pct is not None
            and best is not None
            and self.control.impressions >= 1
            and self.control.rate > 0
        ):
            best_est = stats.estimate(best.conversions, best.impressions)
            control_est = stats.estimate(
                self.control.conversions, self.control.impressions
            )
            best_ci_low = best_est.ci_low
            control_ci_high = control_est.ci_high
            best_improvement = stats.improvement_over_control(
                best_est.rate, control_est.rate
            )
        return evo.check_stopping(
            new_generation,
            self.total_interactions,
            self.cfg,
            interaction_budget=self.config.interaction_budget,
            best_ci_low=best_ci_low,
            control_ci_high=control_ci_high,
            best_improvement_pct=best_improvement,
            improvement_target_pct=self.config.improvement_target_pct,
        )

    # ------------------------------------------------------------------
    # snapshots

    def to_snapshot(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "next_seq": self.next_seq,
            "status": self.status,
            "generation": self.generation,
            "total_interactions": self.total_interactions,
            "unattributed_conversions": self.unattributed_conversions,
            "next_candidate_id": self.next_candidate_id,
            "stop_reason": self.stop_reason,
            "rng_state": _rng_state_to_json(self.rng.getstate())
            if self.status != STATUS_DRAFT
            else None,
            "candidates": [
                _candidate_to_json(c)
                for c in sorted(self.candidates.values(), key=lambda c: c.id)
            ],
            "assignments": [
                {
                    "user_id": a.user_id,
                    "candidate_id": a.candidate_id,
                    "assigned_at": a.assigned_at,
                    "expires_at": a.expires_at,
                    "converted": a.converted,
                }
                for a in self.assignments.values()
            ],
            "generation_history": [
                _report_to_json(r) for r in self.generation_history
            ],
        }

    @classmethod
    def from_snapshot(
        cls,
        config: ExperimentConfig,
        snapshot: dict,
        sink: Callable[[dict], None] | None = None,
    ) -> "ExperimentState":
        state = cls(config, sink=sink)
        state.next_seq = snapshot["next_seq"]
        state.status = snapshot["status"]
        state.generation = snapshot["generation"]
        state.total_interactions = snapshot["total_interactions"]
        state.unattributed_conversions = snapshot.get(
            "unattributed_conversions", 0
        )
        state.next_candidate_id = snapshot["next_candidate_id"]
        state.stop_reason = snapshot["stop_reason"]
        if snapshot["rng_state"] is not None:
            state.rng.setstate(_rng_state_from_json(snapshot["rng_state"]))
        for doc in snapshot["candidates"]:
            candidate = _candidate_from_json(doc)
            state.candidates[candidate.id] = candidate
        for doc in snapshot["assignments"]:
            state.assignments[doc["user_id"]] = Assignment(
                user_id=doc["user_id"],
                candidate_id=doc["candidate_id"],
                assigned_at=doc["assigned_at"],
                expires_at=doc["expires_at"],
                converted=doc["converted"],
            )
        state.generation_history = [
            report_from_json(r) for r in snapshot["generation_history"]
        ]
        state._rebuild_heap()
        return state
