"""Evolutionary conversion-rate optimization over combinatorial designs."""

from .search_space import (
    ElementSpec,
    Genome,
    GenomeError,
    SearchSpace,
    SpaceError,
    decode_one_hot,
    encode_one_hot,
    enumerate_genomes,
    space_size,
    validate_genome,
)
from .evolution import Candidate, EvolutionConfig, GenerationReport
from .experiment import ExperimentConfig, ExperimentState
from .simulator import (
    GroundTruthModel,
    SimulationScenario,
    brute_force_optimum,
    build_case_study_scenario,
    run_scenario,
    true_rate,
)

__version__ = "0.1.0"

__all__ = [
    "Candidate",
    "ElementSpec",
    "EvolutionConfig",
    "ExperimentConfig",
    "ExperimentState",
    "GenerationReport",
    "Genome",
    "GenomeError",
    "GroundTruthModel",
    "SearchSpace",
    "SimulationScenario",
    "SpaceError",
    "brute_force_optimum",
    "build_case_study_scenario",
    "decode_one_hot",
    "encode_one_hot",
    "enumerate_genomes",
    "run_scenario",
    "space_size",
    "true_rate",
    "validate_genome",
]
