"""Multispecies mean-field control as entropy-regularized multimarginal transport."""

from .estimator import MultiSpeciesSinkhorn
from .kernel import KernelSequence, build_kernels, build_stencil
from .scenario import (
    Congestion,
    Fixed,
    FixedOnSubset,
    Free,
    LinearWithCapacity,
    Problem,
    ScenarioError,
    SpeciesSpec,
    TerrainGrid,
    generate_paper_example,
    load_scenario,
    make_problem,
    parse_scenario,
    render_scenario,
)
from .solver import NumericalError, Solution, SolveOptions, objective, solve
from .updates import InfeasibleError

__all__ = [
    "Congestion",
    "Fixed",
    "FixedOnSubset",
    "Free",
    "InfeasibleError",
    "KernelSequence",
    "LinearWithCapacity",
    "MultiSpeciesSinkhorn",
    "NumericalError",
    "Problem",
    "ScenarioError",
    "Solution",
    "SolveOptions",
    "SpeciesSpec",
    "TerrainGrid",
    "build_kernels",
    "build_stencil",
    "generate_paper_example",
    "load_scenario",
    "make_problem",
    "objective",
    "parse_scenario",
    "render_scenario",
    "solve",
]
