import pytest

from multispecies_mfc.kernel import build_kernels
from multispecies_mfc.scenario import generate_paper_example
from multispecies_mfc.solver import SolveOptions, solve


@pytest.fixture(scope="session")
def desk_problem():
    return generate_paper_example(30, 20)


@pytest.fixture(scope="session")
def desk_kernels(desk_problem):
    return build_kernels(desk_problem)


@pytest.fixture(scope="session")
def desk_solution(desk_problem, desk_kernels):
    return solve(desk_problem, SolveOptions(tol=1e-6, max_sweeps=5000), kernels=desk_kernels)
