"""Simulated traffic: the ground-truth conversion world and scenario runs.

The hidden conversion function is logistic in a base logit plus per-value
main effects plus conjunctive interaction terms (a term fires only when
the genome matches every (element, value) pair in its set). Users are
Bernoulli draws against that probability, derived by hashing the scenario
seed with the interaction index so runs are reproducible under any
evaluation order. A brute-force enumeration of the space provides the
exact optimum for desk-scale verification.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

from . import allocator, evolution as evo, stats
from .evolution import Candidate, EvolutionConfig, GenerationReport
from .experiment import (
    ExperimentConfig,
    ExperimentState,
    STATUS_RUNNING,
    unit_hash,
)
from .search_space import (
    ElementSpec,
    Genome,
    SearchSpace,
    enumerate_genomes,
    require_valid,
    space_size,
)

MS_PER_DAY = 24 * 60 * 60 * 1000


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def logistic(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


@dataclass(frozen=True)
class GroundTruthModel:
    """Hidden conversion-probability function over genomes.

    `main_effects` maps (element index, value index) to a logit delta;
    value 0 of every element is the reference (delta 0), so the control
    genome converts at exactly logistic(base_logit). Each interaction is
    a set of (element, value) pairs with a delta applied only when the
    genome matches all of them.
    """

    base_logit: float
    main_effects: dict[tuple[int, int], float] = field(default_factory=dict)
    interactions: tuple[tuple[tuple[tuple[int, int], ...], float], ...] = ()

    def __post_init__(self) -> None:
        for (element, value), _delta in self.main_effects.items():
            if value == 0:
                raise ValueError(
                    "value 0 is the reference level; its delta is fixed at 0"
                )
        for pairs, _delta in self.interactions:
            if len(pairs) < 2:
                raise ValueError(
                    "an interaction needs at least 2 (element, value) pairs"
                )

    def to_document(self) -> dict:
        return {
            "base_rate": logistic(self.base_logit),
            "main_effects": [
                {"element": e, "value": v, "delta": d}
                for (e, v), d in sorted(self.main_effects.items())
            ],
            "interactions": [
                {"pairs": [list(p) for p in pairs], "delta": d}
                for pairs, d in self.interactions
            ],
        }

    @staticmethod
    def from_document(doc: dict) -> "GroundTruthModel":
        if "base_logit" in doc:
            base = doc["base_logit"]
        else:
            base = logit(doc["base_rate"])
        return GroundTruthModel(
            base_logit=base,
            main_effects={
                (e["element"], e["value"]): e["delta"]
                for e in doc.get("main_effects", [])
            },
            interactions=tuple(
                (
                    tuple((p[0], p[1]) for p in item["pairs"]),
                    item["delta"],
                )
                for item in doc.get("interactions", [])
            ),
        )


def true_rate(model: GroundTruthModel, genome: Genome) -> float:
    """Exact conversion probability of a design under the hidden model."""
    x = model.base_logit
    choices = genome.choices
    for (element, value), delta in model.main_effects.items():
        if choices[element] == value:
            x += delta
    for pairs, delta in model.interactions:
        if all(choices[element] == value for element, value in pairs):
            x += delta
    return logistic(x)


def sample_user(
    model: GroundTruthModel, genome: Genome, rng
) -> bool:
    """One Bernoulli user against the design's true rate."""
    return rng.random() < true_rate(model, genome)


def user_draw(seed: int, index: int) -> float:
    """The index-th user's uniform draw, independent of evaluation order."""
    return unit_hash(seed, "user", index)


def brute_force_optimum(
    model: GroundTruthModel, space: SearchSpace, cap: int | None = None
) -> tuple[Genome, float]:
    """Exact argmax of true_rate by exhaustive enumeration.

    Ties resolve to the lexicographically smallest genome. Works on the
    logit scale with per-element effect tables so mid-size spaces (a few
    hundred thousand genomes) finish in seconds.
    """
    counts = space.value_counts
    effect_tables = [
        [model.main_effects.get((element, value), 0.0) for value in range(count)]
        for element, count in enumerate(counts)
    ]
    best_logit = -math.inf
    best_choices: tuple[int, ...] | None = None
    kwargs = {} if cap is None else {"cap": cap}
    interactions = model.interactions
    for genome in enumerate_genomes(space, **kwargs):
        choices = genome.choices
        x = model.base_logit
        for element, choice in enumerate(choices):
            x += effect_tables[element][choice]
        for pairs, delta in interactions:
            if all(choices[element] == value for element, value in pairs):
                x += delta
        if x > best_logit:
            best_logit = x
            best_choices = choices
    assert best_choices is not None
    return Genome(best_choices), logistic(best_logit)


@dataclass(frozen=True)
class SimulationScenario:
    space: SearchSpace
    model: GroundTruthModel
    evolution: EvolutionConfig
    budget: int
    users_per_day: int = 10_000
    seed: int = 42
    crossover: str = evo.CROSSOVER_SINGLE_POINT
    sticky_ttl_ms: int = 0
    name: str = "scenario"

    def __post_init__(self) -> None:
        quota = self.evolution.population_size * self.evolution.maturity_age
        if self.budget < quota:
            raise ValueError(
                "budget must cover at least one generation "
                f"(population_size * maturity_age = {quota})"
            )

    def experiment_config(self) -> ExperimentConfig:
        return ExperimentConfig(
            name=self.name,
            space=self.space,
            evolution=self.evolution,
            crossover=self.crossover,
            sticky_ttl_ms=max(self.sticky_ttl_ms, 1),
            interaction_budget=self.budget,
            auto_advance=True,
        )


@dataclass(frozen=True)
class DailyPoint:
    day: int
    best_rate: float | None
    best_ci_low: float | None
    best_ci_high: float | None
    population_mean_rate: float | None
    control_rate: float | None
    control_ci_low: float | None
    control_ci_high: float | None


@dataclass
class SimulationTrace:
    scenario: SimulationScenario
    state: ExperimentState
    daily: list[DailyPoint]
    generation_reports: list[GenerationReport]
    stop_reason: str | None
    truncated: bool
    total_interactions: int
    distinct_candidates: int
    offspring_count: int


def _daily_point(state: ExperimentState, day: int) -> DailyPoint:
    active = [
        c for c in state.active_candidates() if c.impressions > 0
    ]
    best = min(active, key=evo.retention_sort_key) if active else None
    best_est = (
        stats.estimate(best.conversions, best.impressions) if best else None
    )
    mean_rate = (
        sum(c.rate for c in active) / len(active) if active else None
    )
    control = state.control
    control_est = (
        stats.estimate(control.conversions, control.impressions)
        if control.impressions > 0
        else None
    )
    return DailyPoint(
        day=day,
        best_rate=best_est.rate if best_est else None,
        best_ci_low=best_est.ci_low if best_est else None,
        best_ci_high=best_est.ci_high if best_est else None,
        population_mean_rate=mean_rate,
        control_rate=control_est.rate if control_est else None,
        control_ci_low=control_est.ci_low if control_est else None,
        control_ci_high=control_est.ci_high if control_est else None,
    )


def run_scenario(
    scenario: SimulationScenario,
    sink: Callable[[dict], None] | None = None,
    start_ts: int = 0,
) -> SimulationTrace:
    """Drive virtual traffic through the allocator and evolution loop.

    One fresh virtual user arrives per interaction; each is assigned,
    converts per the hidden model, and generations advance automatically
    as maturity quotas fill. Fully deterministic per scenario seed.
    """
    state = ExperimentState(scenario.experiment_config(), sink=sink)
    ms_per_user = max(1, MS_PER_DAY // scenario.users_per_day)
    state.start(ts=start_ts)

    model = scenario.model
    seed = scenario.seed
    rate_cache: dict[int, float] = {}
    daily: list[DailyPoint] = []
    index = 0
    truncated = False
    while True:
        if state.status != STATUS_RUNNING:
            break
        if index >= scenario.budget:
            truncated = not state.maturity_filled()
            if state.maturity_filled():
                state.advance(ts=start_ts + index * ms_per_user)
            if state.status == STATUS_RUNNING:
                state.stop(reason="budget", ts=start_ts + index * ms_per_user)
            break
        if state.maturity_filled():
            state.advance(ts=start_ts + index * ms_per_user)
            continue
        if index > 0 and index % scenario.users_per_day == 0:
            daily.append(_daily_point(state, index // scenario.users_per_day))
        now = start_ts + index * ms_per_user
        user_id = f"u{index}"
        result = allocator.assign(state, user_id, now)
        rate = rate_cache.get(result.candidate_id)
        if rate is None:
            rate = true_rate(
                model, state.candidates[result.candidate_id].genome
            )
            rate_cache[result.candidate_id] = rate
        if user_draw(seed, index) < rate:
            allocator.record_conversion(state, user_id, now)
        index += 1

    final_day = index // scenario.users_per_day + (
        1 if index % scenario.users_per_day else 0
    )
    daily.append(_daily_point(state, max(final_day, 1)))
    offspring = sum(
        1 for c in state.candidates.values() if c.birth_generation > 0
    )
    return SimulationTrace(
        scenario=scenario,
        state=state,
        daily=daily,
        generation_reports=list(state.generation_history),
        stop_reason=state.stop_reason,
        truncated=truncated,
        total_interactions=state.total_interactions,
        distinct_candidates=len(state.candidates),
        offspring_count=offspring,
    )


def run_noiseless(
    space: SearchSpace,
    model: GroundTruthModel,
    cfg: EvolutionConfig,
    crossover: str = evo.CROSSOVER_SINGLE_POINT,
) -> list[float]:
    """Evolve with exact fitness in place of Bernoulli sampling.

    Each candidate's counters are set so its estimated rate equals its
    true rate to within 1e-9, which makes ranking exact. Returns the best
    retained true rate after each generation.
    """
    import random

    scale = 10**9
    rng = random.Random(cfg.rng_seed)
    population = evo.initialize_population(space, cfg, rng)
    control = population[0]

    def imbue(candidate: Candidate) -> None:
        p = true_rate(model, candidate.genome)
        candidate.impressions = scale
        candidate.conversions = round(p * scale)

    for candidate in population:
        imbue(candidate)
    active = [c for c in population if c.is_active]
    next_id = max(c.id for c in population) + 1
    best_per_generation: list[float] = []
    for generation in range(cfg.max_generations):
        retained, discarded = evo.rank_for_retention(
            active, cfg.population_size
        )
        best_per_generation.append(
            max(true_rate(model, c.genome) for c in retained)
        )
        if generation == cfg.max_generations - 1:
            break
        offspring = evo.breed(
            retained,
            space,
            cfg,
            rng,
            next_id=next_id,
            birth_generation=generation + 1,
            taken_genomes={c.genome.choices for c in retained}
            | {control.genome.choices},
            crossover_kind=crossover,
        )
        next_id += len(offspring)
        for candidate in offspring:
            imbue(candidate)
        active = retained + offspring
    return best_per_generation


# ----------------------------------------------------------------------
# the bundled mid-size benchmark scenario

CASE_STUDY_CONTROL_RATE = 0.0561
CASE_STUDY_OPTIMUM_RATE = 0.0822
CASE_STUDY_BUDGET = 599_008

_CASE_STUDY_ELEMENTS = (
    ("background_color", ("default", "teal", "coral", "bright_yellow",
                          "lavender", "mint", "slate")),
    ("cta_text", ("Request Info", "Learn More", "Get Started",
                  "Find My Program", "Apply Today", "See Programs",
                  "Start Now")),
    ("layout", ("wide", "compact")),
    ("button_color", ("blue", "green", "white", "orange")),
    ("button_text_color", ("grey", "black", "navy", "maroon")),
    ("headline", ("h_default", "h_direct", "h_question", "h_benefit",
                  "h_urgent", "h_social", "h_short", "h_long", "h_stat")),
    ("header_font", ("serif", "sans", "condensed")),
    ("widget_border", ("none", "thin", "shadow")),
    ("content_order", ("form_first", "copy_first", "split")),
)

# The designed optimum: part of its edge comes from two conjunctive
# interactions (background with button color, background with CTA text),
# so per-element greedy search on main effects alone misses it.
CASE_STUDY_OPTIMUM_CHOICES = (3, 2, 1, 2, 1, 4, 1, 2, 0)

_CASE_STUDY_MAINS = {
    # background_color: coral is the best single change, but bright_yellow
    # wins once the interactions fire.
    (0, 1): -0.15, (0, 2): 0.13, (0, 3): 0.10, (0, 4): -0.25,
    (0, 5): -0.06, (0, 6): -0.20,
    # cta_text
    (1, 1): -0.08, (1, 2): 0.10, (1, 3): 0.08, (1, 4): -0.12,
    (1, 5): -0.22, (1, 6): -0.10,
    # layout
    (2, 1): 0.01,
    # button_color: white alone converts slightly worse than the control
    # blue; it only pays off against the bright background.
    (3, 1): 0.10, (3, 2): -0.02, (3, 3): -0.18,
    # button_text_color
    (4, 1): 0.01, (4, 2): -0.12, (4, 3): -0.18,
    # headline
    (5, 1): -0.05, (5, 2): -0.11, (5, 3): -0.03, (5, 4): 0.01,
    (5, 5): -0.16, (5, 6): -0.07, (5, 7): -0.24, (5, 8): -0.13,
    # header_font
    (6, 1): 0.01, (6, 2): -0.10,
    # widget_border
    (7, 1): -0.06, (7, 2): 0.01,
    # content_order: the control ordering is already best.
    (8, 1): -0.15, (8, 2): -0.20,
}

_CASE_STUDY_INTERACTION_1 = (((0, 3), (3, 2)), 0.14)


def build_case_study_model() -> GroundTruthModel:
    base = logit(CASE_STUDY_CONTROL_RATE)
    target = logit(CASE_STUDY_OPTIMUM_RATE)
    optimum_mains = sum(
        _CASE_STUDY_MAINS.get((element, value), 0.0)
        for element, value in enumerate(CASE_STUDY_OPTIMUM_CHOICES)
    )
    # Solve the second interaction so the optimum lands exactly on target.
    second_delta = (
        target - base - optimum_mains - _CASE_STUDY_INTERACTION_1[1]
    )
    interactions = (
        _CASE_STUDY_INTERACTION_1,
        (((0, 3), (1, 2)), second_delta),
    )
    return GroundTruthModel(
        base_logit=base,
        main_effects=dict(_CASE_STUDY_MAINS),
        interactions=interactions,
    )


def build_case_study_space() -> SearchSpace:
    return SearchSpace(
        tuple(
            ElementSpec(name, values) for name, values in _CASE_STUDY_ELEMENTS
        )
    )


def build_case_study_scenario(seed: int = 42) -> SimulationScenario:
    """The bundled mid-size benchmark: 381,024 designs, 4 generations."""
    space = build_case_study_space()
    assert space_size(space) == 381_024
    return SimulationScenario(
        space=space,
        model=build_case_study_model(),
        evolution=EvolutionConfig(
            population_size=37,
            maturity_age=2000,
            mutation_probability=0.2,
            max_generations=4,
            rng_seed=seed,
            initial_population_cap=200,
            control_holdout_fraction=0.1,
        ),
        budget=CASE_STUDY_BUDGET,
        users_per_day=10_000,
        seed=seed,
        name="case-study",
    )


def scenario_from_document(doc: dict, name: str = "scenario") -> SimulationScenario:
    from .experiment import ExperimentConfig

    config = ExperimentConfig.from_document(doc)
    scenario_doc = doc.get("scenario")
    if scenario_doc is None:
        raise ValueError("config document has no 'scenario' section")
    return SimulationScenario(
        space=config.space,
        model=GroundTruthModel.from_document(scenario_doc["model"]),
        evolution=config.evolution,
        budget=scenario_doc["budget"],
        users_per_day=scenario_doc.get("users_per_day", 10_000),
        seed=scenario_doc.get("seed", config.evolution.rng_seed),
        crossover=config.crossover,
        name=doc.get("name", name),
    )
