"""HTTP JSON API around the experiment state machine.

Experiments are created from a config document, started, and then serve
designs and ingest conversions. Per-experiment mutations are serialized
behind a lock; everything durable goes through the append-only log, so a
restarted service replays to exactly where it left off.
"""
from __future__ import annotations

import threading
import uuid
from pathlib import Path
from typing import Any

from fastapi import FastAPI, Header, HTTPException
from pydantic import BaseModel

from . import allocator, stats
from .evolution import EvolutionError, STATUS_CONTROL
from .experiment import (
    ExperimentConfig,
    ExperimentError,
    ExperimentState,
    STATUS_DRAFT,
    STATUS_RUNNING,
    now_ms,
)
from .persistence import (
    SNAPSHOT_INTERVAL,
    EventLog,
    ExperimentStore,
    write_snapshot,
)
from .search_space import SpaceError, space_size


class AssignBody(BaseModel):
    user_id: str


class ConvertBody(BaseModel):
    user_id: str


class LiveExperiment:
    """One experiment's state, log, lock, and idempotency cache."""

    def __init__(self, experiment_id: str, state: ExperimentState,
                 log: EventLog, snapshot_dir: Path):
        self.experiment_id = experiment_id
        self.state = state
        self.log = log
        self.snapshot_dir = snapshot_dir
        self.lock = threading.Lock()
        self.idempotency: dict[str, Any] = {}
        state.sink = self._sink
        self._since_snapshot = 0

    def _sink(self, record: dict) -> None:
        self.log.append(record)
        self._since_snapshot += 1
        if self._since_snapshot >= SNAPSHOT_INTERVAL:
            write_snapshot(self.snapshot_dir, self.state)
            self._since_snapshot = 0


def build_report(state: ExperimentState, top_k: int = 20) -> dict:
    """The report document shared by GET /report and the offline CLI."""
    control = state.control
    control_doc = None
    if control.impressions > 0:
        est = stats.estimate(control.conversions, control.impressions)
        control_doc = {
            "candidate_id": control.id,
            "impressions": est.impressions,
            "conversions": est.conversions,
            "rate": est.rate,
            "ci_low": est.ci_low,
            "ci_high": est.ci_high,
        }
    evaluated = [
        c
        for c in state.candidates.values()
        if c.status != STATUS_CONTROL and c.impressions > 0
    ]
    rows: list[dict] = []
    if control.impressions > 0 and evaluated:
        for row in stats.top_k_report(
            [(c.id, c.conversions, c.impressions) for c in evaluated],
            (control.conversions, control.impressions),
            top_k,
        ):
            candidate = state.candidates[row.candidate_id]
            rows.append(
                {
                    "candidate_id": row.candidate_id,
                    "genome": list(candidate.genome.choices),
                    "design": state.design_payload(row.candidate_id),
                    "status": candidate.status,
                    "impressions": row.estimate.impressions,
                    "conversions": row.estimate.conversions,
                    "rate": row.estimate.rate,
                    "ci_low": row.estimate.ci_low,
                    "ci_high": row.estimate.ci_high,
                    "improvement_pct": row.improvement_pct,
                    "significant_95": row.significant_vs_control,
                }
            )
    best = state.best_so_far()
    return {
        "experiment": state.config.name,
        "status": state.status,
        "generation": state.generation,
        "total_interactions": state.total_interactions,
        "stop_reason": state.stop_reason,
        "control": control_doc,
        "top_candidates": rows,
        "best_so_far": best.id if best else None,
        "generations": [
            {
                "generation": r.generation,
                "retained_ids": list(r.retained_ids),
                "discarded_ids": list(r.discarded_ids),
                "best_candidate_id": r.best_candidate_id,
            }
            for r in state.generation_history
        ],
        "note": (
            "significance flags are unadjusted for multiple comparisons"
        ),
    }


def create_app(data_dir: str | Path) -> FastAPI:
    app = FastAPI(title="ascend", version="0.1.0")
    store = ExperimentStore(Path(data_dir))
    experiments: dict[str, LiveExperiment] = {}
    registry_lock = threading.Lock()

    def load(experiment_id: str) -> LiveExperiment:
        with registry_lock:
            live = experiments.get(experiment_id)
            if live is not None:
                return live
            if experiment_id not in store.experiment_ids():
                raise HTTPException(404, f"no experiment {experiment_id!r}")
            state = store.load_state(experiment_id)
            log = EventLog(store.log_path(experiment_id))
            live = LiveExperiment(
                experiment_id, state, log,
                store.snapshot_dir(experiment_id),
            )
            experiments[experiment_id] = live
            return live

    @app.get("/experiments")
    def list_experiments() -> list[dict]:
        out = []
        for experiment_id in store.experiment_ids():
            live = load(experiment_id)
            out.append(
                {
                    "experiment_id": experiment_id,
                    "status": live.state.status,
                    "generation": live.state.generation,
                    "total_interactions": live.state.total_interactions,
                }
            )
        return out

    @app.post("/experiments", status_code=201)
    def create_experiment(doc: dict) -> dict:
        try:
            config = ExperimentConfig.from_document(doc)
        except (KeyError, SpaceError, EvolutionError, ValueError) as exc:
            raise HTTPException(400, f"invalid config: {exc}") from exc
        experiment_id = doc.get("experiment_id") or uuid.uuid4().hex[:12]
        with registry_lock:
            if experiment_id in store.experiment_ids():
                raise HTTPException(
                    409, f"experiment {experiment_id!r} already exists"
                )
            store.save_config(experiment_id, config)
            state = ExperimentState(config)
            log = EventLog(store.log_path(experiment_id))
            experiments[experiment_id] = LiveExperiment(
                experiment_id, state, log,
                store.snapshot_dir(experiment_id),
            )
        return {
            "experiment_id": experiment_id,
            "status": STATUS_DRAFT,
            "space_size": space_size(config.space),
        }

    @app.post("/experiments/{experiment_id}/start")
    def start_experiment(experiment_id: str) -> dict:
        live = load(experiment_id)
        with live.lock:
            try:
                live.state.start()
            except ExperimentError as exc:
                raise HTTPException(409, str(exc)) from exc
            return {
                "experiment_id": experiment_id,
                "status": live.state.status,
                "population": len(live.state.candidates),
            }

    @app.post("/experiments/{experiment_id}/assign")
    def assign_user(
        experiment_id: str,
        body: AssignBody,
        idempotency_key: str | None = Header(default=None),
    ) -> dict:
        live = load(experiment_id)
        with live.lock:
            if idempotency_key and idempotency_key in live.idempotency:
                return live.idempotency[idempotency_key]
            try:
                result = allocator.assign(live.state, body.user_id, now_ms())
            except ExperimentError as exc:
                raise HTTPException(409, str(exc)) from exc
            response = {
                "candidate_id": result.candidate_id,
                "design": live.state.design_payload(result.candidate_id),
                "sticky_until": result.sticky_until,
            }
            if idempotency_key:
                live.idempotency[idempotency_key] = response
            return response

    @app.post("/experiments/{experiment_id}/convert")
    def convert_user(
        experiment_id: str,
        body: ConvertBody,
        idempotency_key: str | None = Header(default=None),
    ) -> dict:
        live = load(experiment_id)
        with live.lock:
            if idempotency_key and idempotency_key in live.idempotency:
                return live.idempotency[idempotency_key]
            if live.state.status == STATUS_DRAFT:
                raise HTTPException(409, "experiment has not started")
            result = allocator.record_conversion(
                live.state, body.user_id, now_ms()
            )
            response = {"attributed": result.attributed}
            if result.candidate_id is not None:
                response["candidate_id"] = result.candidate_id
            if idempotency_key:
                live.idempotency[idempotency_key] = response
            return response

    @app.post("/experiments/{experiment_id}/advance")
    def advance_generation(experiment_id: str) -> dict:
        live = load(experiment_id)
        with live.lock:
            try:
                report, reason = live.state.advance()
            except ExperimentError as exc:
                raise HTTPException(409, str(exc)) from exc
            except EvolutionError as exc:
                shortfalls = {
                    cid: left
                    for cid, left in live.state.maturity_shortfalls().items()
                    if left
                }
                raise HTTPException(
                    409,
                    {
                        "error": str(exc),
                        "remaining_impressions": shortfalls,
                    },
                ) from exc
            return {
                "generation": live.state.generation,
                "retained_ids": list(report.retained_ids),
                "discarded_ids": list(report.discarded_ids),
                "stopped": reason is not None,
                "stop_reason": reason,
            }

    @app.post("/experiments/{experiment_id}/stop")
    def stop_experiment(experiment_id: str) -> dict:
        live = load(experiment_id)
        with live.lock:
            try:
                live.state.stop()
            except ExperimentError as exc:
                raise HTTPException(409, str(exc)) from exc
            return {"status": live.state.status}

    @app.get("/experiments/{experiment_id}/report")
    def experiment_report(experiment_id: str, top: int = 20) -> dict:
        live = load(experiment_id)
        with live.lock:
            return build_report(live.state, top_k=top)

    @app.get("/experiments/{experiment_id}/status")
    def experiment_status(experiment_id: str) -> dict:
        live = load(experiment_id)
        with live.lock:
            state = live.state
            return {
                "experiment_id": experiment_id,
                "status": state.status,
                "generation": state.generation,
                "total_interactions": state.total_interactions,
                "maturity_remaining": state.maturity_shortfalls(),
                "stop_reason": state.stop_reason,
            }

    return app
