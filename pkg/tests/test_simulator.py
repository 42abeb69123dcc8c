from __future__ import annotations

import json
import math

import pytest

from ascend import simulator
from ascend.evolution import EvolutionConfig
from ascend.search_space import ElementSpec, Genome, SearchSpace, enumerate_genomes
from ascend.simulator import (
    CASE_STUDY_BUDGET,
    CASE_STUDY_CONTROL_RATE,
    CASE_STUDY_OPTIMUM_CHOICES,
    CASE_STUDY_OPTIMUM_RATE,
    GroundTruthModel,
    SimulationScenario,
    brute_force_optimum,
    build_case_study_model,
    build_case_study_scenario,
    build_case_study_space,
    logistic,
    logit,
    run_noiseless,
    run_scenario,
    true_rate,
    user_draw,
)


def make_space(counts):
    return SearchSpace(
        tuple(
            ElementSpec(f"e{i}", tuple(f"v{i}_{j}" for j in range(c)))
            for i, c in enumerate(counts)
        )
    )


class TestLogistic:
    def test_round_trip(self):
        for p in (0.01, 0.0561, 0.25, 0.5, 0.9):
            assert logistic(logit(p)) == pytest.approx(p, abs=1e-12)

    def test_known_values(self):
        assert logistic(0.0) == 0.5
        assert logit(0.5) == 0.0


class TestModel:
    def test_reference_level_delta_rejected(self):
        with pytest.raises(ValueError, match="reference"):
            GroundTruthModel(base_logit=0.0, main_effects={(0, 0): 0.1})

    def test_single_pair_interaction_rejected(self):
        with pytest.raises(ValueError, match="at least 2"):
            GroundTruthModel(
                base_logit=0.0, interactions=((((0, 1),), 0.2),)
            )

    def test_document_round_trip(self):
        model = GroundTruthModel(
            base_logit=logit(0.05),
            main_effects={(0, 1): 0.1, (1, 2): -0.2},
            interactions=((((0, 1), (1, 2)), 0.3),),
        )
        rebuilt = GroundTruthModel.from_document(model.to_document())
        assert rebuilt.main_effects == model.main_effects
        assert rebuilt.interactions == model.interactions
        assert rebuilt.base_logit == pytest.approx(model.base_logit)


class TestTrueRate:
    MODEL = GroundTruthModel(
        base_logit=logit(0.05),
        main_effects={(0, 1): 0.3, (1, 1): -0.2},
        interactions=((((0, 1), (1, 1)), 0.5),),
    )

    def test_control_is_base_rate(self):
        assert true_rate(self.MODEL, Genome((0, 0))) == pytest.approx(0.05)

    def test_single_main_effect(self):
        expected = logistic(logit(0.05) + 0.3)
        assert true_rate(self.MODEL, Genome((1, 0))) == pytest.approx(expected)

    def test_interaction_fires_only_on_full_match(self):
        # both pairs present: base + 0.3 - 0.2 + 0.5
        full = logistic(logit(0.05) + 0.3 - 0.2 + 0.5)
        assert true_rate(self.MODEL, Genome((1, 1))) == pytest.approx(full)
        # one pair only: no interaction term
        partial = logistic(logit(0.05) - 0.2)
        assert true_rate(self.MODEL, Genome((0, 1))) == pytest.approx(partial)


class TestBruteForce:
    def test_double_entry_against_direct_scan(self):
        space = make_space([3, 4, 2])
        model = GroundTruthModel(
            base_logit=logit(0.04),
            main_effects={(0, 2): 0.2, (1, 1): 0.15, (1, 3): -0.1,
                          (2, 1): 0.05},
            interactions=((((0, 1), (2, 1)), 0.6),),
        )
        # straight-line reimplementation: rate per genome, max, first wins
        best_genome, best_rate = None, -1.0
        for genome in enumerate_genomes(space):
            rate = true_rate(model, genome)
            if rate > best_rate:
                best_genome, best_rate = genome, rate
        genome, rate = brute_force_optimum(model, space)
        assert genome == best_genome
        assert rate == pytest.approx(best_rate, abs=1e-12)

    def test_interaction_can_beat_main_effects(self):
        # (1, 1) is the argmax only because of the conjunctive term.
        space = make_space([2, 2])
        model = GroundTruthModel(
            base_logit=logit(0.05),
            main_effects={(0, 1): -0.05, (1, 1): -0.05},
            interactions=((((0, 1), (1, 1)), 0.5),),
        )
        genome, _ = brute_force_optimum(model, space)
        assert genome.choices == (1, 1)

    def test_tie_resolves_lexicographically_smallest(self):
        space = make_space([3, 2])
        genome, rate = brute_force_optimum(
            GroundTruthModel(base_logit=logit(0.1)), space
        )
        assert genome.choices == (0, 0)
        assert rate == pytest.approx(0.1)


class TestUserDraw:
    def test_deterministic(self):
        assert user_draw(42, 7) == user_draw(42, 7)

    def test_varies_by_seed_and_index(self):
        assert user_draw(42, 7) != user_draw(43, 7)
        assert user_draw(42, 7) != user_draw(42, 8)

    def test_roughly_uniform(self):
        draws = [user_draw(1, i) for i in range(20_000)]
        assert all(0.0 <= d < 1.0 for d in draws)
        mean = sum(draws) / len(draws)
        assert mean == pytest.approx(0.5, abs=0.01)


def toy_scenario(seed=42, budget=12_000, max_generations=3):
    space = make_space([3, 3, 3])
    model = GroundTruthModel(
        base_logit=logit(0.05),
        main_effects={(0, 1): 0.4, (1, 2): 0.3, (2, 1): -0.3},
    )
    return SimulationScenario(
        space=space,
        model=model,
        evolution=EvolutionConfig(
            population_size=4,
            maturity_age=300,
            max_generations=max_generations,
            rng_seed=seed,
        ),
        budget=budget,
        users_per_day=2_000,
        seed=seed,
    )


class TestRunScenario:
    def test_respects_budget_and_stops(self):
        trace = run_scenario(toy_scenario())
        assert trace.total_interactions <= 12_000
        assert trace.stop_reason in {"generations", "budget"}
        assert trace.state.status == "stopped"

    def test_interaction_conservation(self):
        trace = run_scenario(toy_scenario())
        total = sum(
            c.impressions for c in trace.state.candidates.values()
        )
        assert total == trace.total_interactions

    def test_offspring_count_matches_schedule(self):
        # G generations mean G-1 breeding rounds of population_size each
        trace = run_scenario(toy_scenario(budget=50_000, max_generations=3))
        if trace.stop_reason == "generations":
            assert trace.offspring_count == 2 * 4

    def test_same_seed_is_byte_identical(self):
        def run(seed):
            records = []
            run_scenario(
                toy_scenario(seed=seed),
                sink=lambda r: records.append(json.dumps(r, sort_keys=True)),
            )
            return records

        assert run(7) == run(7)
        assert run(7) != run(8)

    def test_daily_series_present(self):
        trace = run_scenario(toy_scenario())
        assert trace.daily
        days = [point.day for point in trace.daily]
        assert days == sorted(days)
        assert trace.daily[-1].control_rate is not None

    def test_finds_toy_optimum_direction(self):
        trace = run_scenario(toy_scenario(budget=50_000, max_generations=4))
        best = trace.state.best_so_far()
        assert best is not None
        model = toy_scenario().model
        best_true = true_rate(model, best.genome)
        control_true = true_rate(model, trace.state.control.genome)
        assert best_true > control_true

    def test_budget_too_small_rejected(self):
        with pytest.raises(ValueError, match="budget"):
            toy_scenario(budget=100)


class TestRunNoiseless:
    def test_best_retained_never_degrades(self):
        space = make_space([4, 4, 4])
        model = GroundTruthModel(
            base_logit=logit(0.05),
            main_effects={(0, 1): 0.3, (1, 3): 0.25, (2, 2): 0.2},
        )
        for seed in range(5):
            series = run_noiseless(
                space, model,
                EvolutionConfig(population_size=6, maturity_age=1,
                                max_generations=6, rng_seed=seed),
            )
            assert len(series) == 6
            assert all(b >= a for a, b in zip(series, series[1:]))


class TestCaseStudy:
    def test_space_size(self):
        from ascend.search_space import space_size

        assert space_size(build_case_study_space()) == 381_024

    def test_control_rate_exact(self):
        model = build_case_study_model()
        space = build_case_study_space()
        assert true_rate(model, space.control_genome()) == pytest.approx(
            CASE_STUDY_CONTROL_RATE, abs=1e-9
        )

    def test_planted_optimum_rate_exact(self):
        model = build_case_study_model()
        rate = true_rate(model, Genome(CASE_STUDY_OPTIMUM_CHOICES))
        assert rate == pytest.approx(CASE_STUDY_OPTIMUM_RATE, abs=1e-9)

    def test_improvement_figure(self):
        from ascend.stats import improvement_over_control

        assert improvement_over_control(
            CASE_STUDY_OPTIMUM_RATE, CASE_STUDY_CONTROL_RATE
        ) == pytest.approx(46.5, abs=0.3)

    def test_brute_force_recovers_planted_optimum(self):
        model = build_case_study_model()
        genome, rate = brute_force_optimum(model, build_case_study_space())
        assert genome.choices == CASE_STUDY_OPTIMUM_CHOICES
        assert rate == pytest.approx(CASE_STUDY_OPTIMUM_RATE, abs=1e-9)

    def test_greedy_main_effects_misses_optimum(self):
        # Optimizing each element independently on main effects lands on
        # coral, not bright_yellow: the optimum needs the interactions.
        model = build_case_study_model()
        space = build_case_study_space()
        greedy = []
        for element, count in enumerate(space.value_counts):
            greedy.append(
                max(
                    range(count),
                    key=lambda v: model.main_effects.get((element, v), 0.0),
                )
            )
        greedy_genome = Genome(tuple(greedy))
        assert greedy_genome.choices != CASE_STUDY_OPTIMUM_CHOICES
        assert true_rate(model, greedy_genome) < CASE_STUDY_OPTIMUM_RATE

    def test_scenario_shape(self):
        scenario = build_case_study_scenario(seed=3)
        assert scenario.budget == CASE_STUDY_BUDGET
        assert scenario.evolution.population_size == 37
        assert scenario.evolution.maturity_age == 2000
        assert scenario.evolution.max_generations == 4
        assert scenario.seed == 3
        assert scenario.evolution.rng_seed == 3


class TestScenarioDocument:
    def test_round_trip_via_document(self):
        doc = {
            "name": "doc-test",
            "space": {
                "elements": [
                    {"name": "a", "values": ["x", "y"]},
                    {"name": "b", "values": ["p", "q", "r"]},
                ]
            },
            "evolution": {"population_size": 4, "maturity_age": 10},
            "scenario": {
                "model": {
                    "base_rate": 0.05,
                    "main_effects": [
                        {"element": 0, "value": 1, "delta": 0.2}
                    ],
                },
                "budget": 1000,
                "seed": 9,
            },
        }
        scenario = simulator.scenario_from_document(doc)
        assert scenario.name == "doc-test"
        assert scenario.budget == 1000
        assert scenario.seed == 9
        assert true_rate(
            scenario.model, Genome((0, 0))
        ) == pytest.approx(0.05)

    def test_missing_scenario_section(self):
        with pytest.raises(ValueError, match="scenario"):
            simulator.scenario_from_document(
                {
                    "name": "x",
                    "space": {
                        "elements": [{"name": "a", "values": ["x", "y"]}]
                    },
                }
            )
