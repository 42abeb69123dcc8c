"""Operator command line: scaffold configs, simulate, serve, report.

Exit codes: 0 success, 1 validation error, 2 runtime error. All
randomness flows from --seed (default 42), so repeated runs with the
same inputs are byte-identical.
"""
from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import simulator, stats
from .experiment import ExperimentConfig
from .persistence import ExperimentStore, LogError, replay
from .search_space import SpaceError, design_of, space_size
from .service import build_report

DEFAULT_SEED = 42

TEMPLATE = {
    "schema_version": 1,
    "name": "my-experiment",
    "space": {
        "elements": [
            {"name": "headline", "values": ["current", "short", "question"]},
            {"name": "button_color", "values": ["blue", "green", "white"]},
            {"name": "cta_text", "values": ["Sign Up", "Get Started"]},
        ]
    },
    "evolution": {
        "population_size": 8,
        "maturity_age": 2000,
        "mutation_probability": 0.2,
        "max_generations": 4,
        "rng_seed": DEFAULT_SEED,
        "initial_population_cap": 200,
        "control_holdout_fraction": 0.1,
    },
    "allocator": {"sticky_ttl_ms": 86_400_000, "count_sticky_revisits": False},
    "stopping": {"interaction_budget": None, "improvement_target_pct": None},
    "crossover": "single_point",
    "auto_advance": True,
    "scenario": {
        "model": {
            "base_rate": 0.05,
            "main_effects": [
                {"element": 0, "value": 1, "delta": 0.1},
                {"element": 1, "value": 2, "delta": 0.08},
            ],
            "interactions": [
                {"pairs": [[0, 1], [1, 2]], "delta": 0.2}
            ],
        },
        "budget": 100_000,
        "users_per_day": 10_000,
        "seed": DEFAULT_SEED,
    },
    "_comments": {
        "space": "index 0 of every element's values is the control value",
        "scenario": (
            "simulated-traffic section used by `ascend simulate` and "
            "`ascend oracle`; the live service ignores it. For a bundled "
            "mid-size benchmark run `ascend simulate --case-study`."
        ),
    },
}


def _fail(message: str, code: int) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_document(path: Path) -> dict:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        _fail(f"config file not found: {path}", 1)
    except json.JSONDecodeError as exc:
        _fail(f"config is not valid JSON: {exc}", 1)
    raise AssertionError("unreachable")


@click.group()
def main() -> None:
    """Evolutionary conversion-rate optimization engine."""


@main.command()
@click.argument("path", type=click.Path(path_type=Path))
def init(path: Path) -> None:
    """Write a template config with a toy space and scenario."""
    if path.exists():
        _fail(f"refusing to overwrite {path}", 1)
    path.write_text(
        json.dumps(TEMPLATE, indent=2) + "\n", encoding="utf-8"
    )
    click.echo(f"wrote template config to {path}")


def _resolve_scenario(
    config_path: Path | None, case_study: bool, seed: int
) -> simulator.SimulationScenario:
    if case_study:
        return simulator.build_case_study_scenario(seed=seed)
    if config_path is None:
        _fail("provide a config file or --case-study", 1)
    doc = _load_document(config_path)
    try:
        scenario = simulator.scenario_from_document(doc)
    except (KeyError, ValueError, SpaceError) as exc:
        _fail(f"invalid scenario config: {exc}", 1)
        raise AssertionError("unreachable")
    if seed != DEFAULT_SEED or "seed" not in doc.get("scenario", {}):
        from dataclasses import replace

        scenario = replace(
            scenario,
            seed=seed,
            evolution=replace(scenario.evolution, rng_seed=seed),
        )
    return scenario


@main.command()
@click.argument(
    "config", required=False, type=click.Path(path_type=Path)
)
@click.option("--case-study", is_flag=True,
              help="run the bundled 381,024-design benchmark scenario")
@click.option("--seed", default=DEFAULT_SEED, show_default=True)
@click.option("--out", "out_dir", default="sim-out", show_default=True,
              type=click.Path(path_type=Path))
def simulate(config: Path | None, case_study: bool, seed: int,
             out_dir: Path) -> None:
    """Run a full simulated-traffic scenario and write its artifacts.

    Produces events.jsonl, generations.csv, daily.csv and report.json
    in the output directory.
    """
    scenario = _resolve_scenario(config, case_study, seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    events_path = out_dir / "events.jsonl"
    try:
        with open(events_path, "w", encoding="utf-8", newline="\n") as events:
            def sink(record: dict) -> None:
                events.write(
                    json.dumps(
                        record, separators=(",", ":"), sort_keys=True
                    )
                    + "\n"
                )

            trace = simulator.run_scenario(scenario, sink=sink)
    except Exception as exc:  # noqa: BLE001 - surfaced as exit code 2
        _fail(f"simulation failed: {exc}", 2)
        raise AssertionError("unreachable")

    daily_lines = [
        "day,best_rate,best_ci_low,best_ci_high,population_mean_rate,"
        "control_rate,control_ci_low,control_ci_high"
    ]

    def fmt(value: float | None) -> str:
        return "" if value is None else f"{value:.6f}"

    for point in trace.daily:
        daily_lines.append(
            f"{point.day},{fmt(point.best_rate)},{fmt(point.best_ci_low)},"
            f"{fmt(point.best_ci_high)},{fmt(point.population_mean_rate)},"
            f"{fmt(point.control_rate)},{fmt(point.control_ci_low)},"
            f"{fmt(point.control_ci_high)}"
        )
    (out_dir / "daily.csv").write_text(
        "\n".join(daily_lines) + "\n", encoding="utf-8"
    )

    generation_lines = [
        "generation,evaluated,retained,discarded,best_candidate_id,best_rate"
    ]
    state = trace.state
    for report in trace.generation_reports:
        best_rate = ""
        if report.best_candidate_id is not None:
            best = state.candidates[report.best_candidate_id]
            best_rate = f"{best.rate:.6f}"
        generation_lines.append(
            f"{report.generation},{len(report.fitness)},"
            f"{len(report.retained_ids)},{len(report.discarded_ids)},"
            f"{report.best_candidate_id},{best_rate}"
        )
    (out_dir / "generations.csv").write_text(
        "\n".join(generation_lines) + "\n", encoding="utf-8"
    )

    report_doc = build_report(state)
    report_doc["simulation"] = {
        "seed": scenario.seed,
        "budget": scenario.budget,
        "stop_reason": trace.stop_reason,
        "truncated": trace.truncated,
        "total_interactions": trace.total_interactions,
        "distinct_candidates": trace.distinct_candidates,
        "offspring_tested": trace.offspring_count,
        "oracle_optimum": None,
    }
    if space_size(scenario.space) <= 1 << 22:
        genome, rate = simulator.brute_force_optimum(
            scenario.model, scenario.space
        )
        report_doc["simulation"]["oracle_optimum"] = {
            "genome": list(genome.choices),
            "design": design_of(scenario.space, genome),
            "true_rate": rate,
        }
    (out_dir / "report.json").write_text(
        json.dumps(report_doc, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    click.echo(
        f"simulated {trace.total_interactions} interactions, "
        f"stop reason: {trace.stop_reason}; artifacts in {out_dir}"
    )


@main.command()
@click.argument(
    "config", required=False, type=click.Path(path_type=Path)
)
@click.option("--case-study", is_flag=True)
@click.option("--seed", default=DEFAULT_SEED, show_default=True)
def oracle(config: Path | None, case_study: bool, seed: int) -> None:
    """Print the brute-force optimum design and its true rate."""
    scenario = _resolve_scenario(config, case_study, seed)
    try:
        genome, rate = simulator.brute_force_optimum(
            scenario.model, scenario.space
        )
    except SpaceError as exc:
        _fail(str(exc), 1)
        raise AssertionError("unreachable")
    control_rate = simulator.true_rate(
        scenario.model, scenario.space.control_genome()
    )
    click.echo(f"optimum genome: {list(genome.choices)}")
    for element, value in design_of(scenario.space, genome).items():
        click.echo(f"  {element}: {value}")
    click.echo(f"true rate: {rate:.6f}")
    click.echo(f"control rate: {control_rate:.6f}")
    if control_rate > 0:
        click.echo(
            "improvement over control: "
            f"{stats.improvement_over_control(rate, control_rate):+.1f}%"
        )


@main.command()
@click.option("--port", envvar="ASCEND_PORT", default=8080, show_default=True,
              help="listen port (flag beats ASCEND_PORT)")
@click.option("--data-dir", envvar="ASCEND_DATA_DIR", default="ascend-data",
              show_default=True, type=click.Path(path_type=Path),
              help="persistence root (flag beats ASCEND_DATA_DIR)")
@click.option("--host", default="127.0.0.1", show_default=True)
def serve(port: int, data_dir: Path, host: str) -> None:
    """Run the HTTP experiment service."""
    import uvicorn

    from .service import create_app

    app = create_app(data_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")


@main.command()
@click.argument("data_dir", type=click.Path(path_type=Path))
@click.argument("experiment_id")
@click.option("--top", "top_k", default=20, show_default=True)
@click.option("--csv", "as_csv", is_flag=True,
              help="emit the top-candidate table as CSV instead of JSON")
def report(data_dir: Path, experiment_id: str, top_k: int,
           as_csv: bool) -> None:
    """Regenerate an experiment report offline from its event log."""
    store = ExperimentStore(data_dir)
    if experiment_id not in store.experiment_ids():
        _fail(f"no experiment {experiment_id!r} under {data_dir}", 1)
    config = store.load_config(experiment_id)
    log_path = store.log_path(experiment_id)
    if not log_path.exists():
        _fail(f"experiment {experiment_id!r} has no event log yet", 1)
    try:
        state = replay(log_path, config)
    except LogError as exc:
        _fail(str(exc), 2)
        raise AssertionError("unreachable")
    doc = build_report(state, top_k=top_k)
    if not as_csv:
        click.echo(json.dumps(doc, indent=2, sort_keys=True))
        return
    click.echo(stats.REPORT_CSV_HEADER)
    for row in doc["top_candidates"]:
        genome_label = "|".join(row["design"].values())
        click.echo(
            f"{row['candidate_id']},{genome_label},{row['impressions']},"
            f"{row['conversions']},{row['rate']:.6f},{row['ci_low']:.6f},"
            f"{row['ci_high']:.6f},{row['improvement_pct']:.4f},"
            f"{str(row['significant_95']).lower()}"
        )


if __name__ == "__main__":
    main()
