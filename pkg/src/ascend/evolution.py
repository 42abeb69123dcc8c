"""The generational loop: seeding, selection, breeding, retention.

Initialization seeds the population with the control design plus its
single-change neighbors. Each generation every active candidate must
collect a maturity quota of impressions; the top n by estimated
conversion rate are retained, the rest discarded, and n offspring are
bred from the retained set via fitness-proportionate parent selection,
element-boundary crossover, and single-element mutation.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field

from .search_space import Genome, SearchSpace, require_valid

STATUS_ACTIVE = "active"
STATUS_DISCARDED = "discarded"
STATUS_CONTROL = "control"

DUPLICATE_RETRY_LIMIT = 20

CROSSOVER_SINGLE_POINT = "single_point"
CROSSOVER_UNIFORM = "uniform"


class EvolutionError(ValueError):
    """Raised on invalid configuration or premature generation advance."""


@dataclass
class Candidate:
    """One design under evaluation, with its accumulated evidence."""

    id: int
    genome: Genome
    birth_generation: int = 0
    impressions: int = 0
    conversions: int = 0
    status: str = STATUS_ACTIVE
    gen_impressions: int = 0  # impressions collected this generation

    @property
    def rate(self) -> float:
        return self.conversions / self.impressions if self.impressions else 0.0

    @property
    def is_active(self) -> bool:
        return self.status == STATUS_ACTIVE


@dataclass(frozen=True)
class EvolutionConfig:
    population_size: int = 8
    maturity_age: int = 2000
    mutation_probability: float = 0.2
    max_generations: int = 4
    rng_seed: int = 42
    initial_population_cap: int = 200
    control_holdout_fraction: float = 0.1

    def __post_init__(self) -> None:
        if self.population_size < 2:
            raise EvolutionError("population_size must be >= 2")
        if self.maturity_age < 1:
            raise EvolutionError("maturity_age must be >= 1")
        if not 0.0 <= self.mutation_probability <= 1.0:
            raise EvolutionError("mutation_probability must be in [0, 1]")
        if self.max_generations < 1:
            raise EvolutionError("max_generations must be >= 1")
        if self.initial_population_cap < 1:
            raise EvolutionError("initial_population_cap must be >= 1")
        if not 0.0 <= self.control_holdout_fraction < 1.0:
            raise EvolutionError("control_holdout_fraction must be in [0, 1)")


@dataclass(frozen=True)
class CandidateFitness:
    candidate_id: int
    impressions: int
    conversions: int
    rate: float
    ci_low: float
    ci_high: float


@dataclass(frozen=True)
class GenerationReport:
    generation: int
    fitness: tuple[CandidateFitness, ...]
    retained_ids: tuple[int, ...]
    discarded_ids: tuple[int, ...]
    best_candidate_id: int | None


def single_change_neighbors(space: SearchSpace) -> list[Genome]:
    """All genomes at Hamming distance 1 from control, in element order."""
    neighbors: list[Genome] = []
    control = space.control_genome().choices
    for position, count in enumerate(space.value_counts):
        for value in range(1, count):
            choices = list(control)
            choices[position] = value
            neighbors.append(Genome(tuple(choices)))
    return neighbors


def initialize_population(
    space: SearchSpace, cfg: EvolutionConfig, rng: random.Random
) -> list[Candidate]:
    """Control plus its single-change neighborhood (sampled if over cap).

    The control candidate always has id 0 and status "control"; neighbors
    get sequential ids in element/value order (or sampled order preserved
    by original position when the cap applies).
    """
    neighbors = single_change_neighbors(space)
    limit = cfg.initial_population_cap - 1
    if len(neighbors) > limit:
        picked = sorted(rng.sample(range(len(neighbors)), limit))
        neighbors = [neighbors[i] for i in picked]
    population = [
        Candidate(id=0, genome=space.control_genome(), status=STATUS_CONTROL)
    ]
    for offset, genome in enumerate(neighbors, start=1):
        population.append(Candidate(id=offset, genome=genome))
    return population


def select_parent(
    population: list[Candidate], rng: random.Random
) -> Candidate:
    """Fitness-proportionate draw; uniform fallback when all rates are 0."""
    if not population:
        raise EvolutionError("cannot select a parent from an empty population")
    if len(population) == 1:
        return population[0]
    weights = [c.rate for c in population]
    if sum(weights) <= 0.0:
        return population[rng.randrange(len(population))]
    return rng.choices(population, weights=weights, k=1)[0]


def crossover(a: Genome, b: Genome, rng: random.Random) -> Genome:
    """Single-point crossover at an element boundary."""
    if len(a) != len(b):
        raise EvolutionError("parents must come from the same space")
    if len(a) < 2:
        return a
    cut = rng.randrange(1, len(a))
    return Genome(a.choices[:cut] + b.choices[cut:])


def crossover_uniform(a: Genome, b: Genome, rng: random.Random) -> Genome:
    """Per-element uniform recombination (configurable alternative)."""
    if len(a) != len(b):
        raise EvolutionError("parents must come from the same space")
    return Genome(
        tuple(
            ac if rng.random() < 0.5 else bc
            for ac, bc in zip(a.choices, b.choices)
        )
    )


def mutate(
    g: Genome, space: SearchSpace, cfg: EvolutionConfig, rng: random.Random
) -> Genome:
    """With mutation_probability, change exactly one element to a new value."""
    if rng.random() >= cfg.mutation_probability:
        return g
    position = rng.randrange(len(g))
    count = space.value_counts[position]
    current = g.choices[position]
    shifted = rng.randrange(count - 1)
    replacement = shifted if shifted < current else shifted + 1
    choices = list(g.choices)
    choices[position] = replacement
    return Genome(tuple(choices))


def breed(
    population: list[Candidate],
    space: SearchSpace,
    cfg: EvolutionConfig,
    rng: random.Random,
    next_id: int,
    birth_generation: int,
    taken_genomes: set[tuple[int, ...]] | None = None,
    crossover_kind: str = CROSSOVER_SINGLE_POINT,
) -> list[Candidate]:
    """Produce population_size offspring from the retained parents.

    Offspring duplicating an active genome (or a sibling bred in this
    batch) are re-drawn up to DUPLICATE_RETRY_LIMIT times, then admitted:
    forbidding duplicates outright can deadlock tiny spaces.
    """
    if not population:
        raise EvolutionError("cannot breed from an empty population")
    recombine = (
        crossover_uniform if crossover_kind == CROSSOVER_UNIFORM else crossover
    )
    taken = set(taken_genomes) if taken_genomes else set()
    offspring: list[Candidate] = []
    for _ in range(cfg.population_size):
        child: Genome | None = None
        for _attempt in range(DUPLICATE_RETRY_LIMIT + 1):
            mother = select_parent(population, rng)
            father = select_parent(population, rng)
            candidate = mutate(
                recombine(mother.genome, father.genome, rng), space, cfg, rng
            )
            child = candidate
            if candidate.choices not in taken:
                break
        assert child is not None
        require_valid(space, child)
        taken.add(child.choices)
        offspring.append(
            Candidate(
                id=next_id + len(offspring),
                genome=child,
                birth_generation=birth_generation,
            )
        )
    return offspring


def retention_sort_key(candidate: Candidate) -> tuple[float, int, int]:
    # Best rate first; ties broken by more impressions, then lower id.
    return (-candidate.rate, -candidate.impressions, candidate.id)


def rank_for_retention(
    candidates: list[Candidate], n: int
) -> tuple[list[Candidate], list[Candidate]]:
    """Split active non-control candidates into (retained top n, discarded)."""
    ranked = sorted(candidates, key=retention_sort_key)
    return ranked[:n], ranked[n:]


def check_stopping(
    generation: int,
    total_interactions: int,
    cfg: EvolutionConfig,
    interaction_budget: int | None = None,
    best_ci_low: float | None = None,
    control_ci_high: float | None = None,
    best_improvement_pct: float | None = None,
    improvement_target_pct: float | None = None,
) -> str | None:
    """Return a stop reason, or None to continue."""
    if generation >= cfg.max_generations:
        return "generations"
    if interaction_budget is not None and total_interactions >= interaction_budget:
        return "budget"
    if (
        improvement_target_pct is not None
        and best_ci_low is not None
        and control_ci_high is not None
        and best_improvement_pct is not None
        and best_ci_low > control_ci_high
        and best_improvement_pct >= improvement_target_pct
    ):
        return "target"
    return None
