"""Random small instances shared by the oracle-equivalence tests."""

import numpy as np

from multispecies_mfc.kernel import KernelSequence
from multispecies_mfc.oracle import dense_projection, materialize
from multispecies_mfc.propagation import ScalingState
from multispecies_mfc.scenario import (
    Congestion,
    Fixed,
    FixedOnSubset,
    Free,
    LinearWithCapacity,
    SpeciesSpec,
    TerrainGrid,
    make_problem,
)


def random_kernels(rng, L, N, T, zero_prob=0.3, time_varying=None):
    if time_varying is None:
        time_varying = bool(rng.integers(2))
    steps = []
    for _ in range(T if time_varying else 1):
        K = rng.uniform(0.05, 1.0, size=(L, N, N))
        K[rng.random((L, N, N)) < zero_prob] = 0.0
        for ell in range(L):
            np.fill_diagonal(K[ell], rng.uniform(0.5, 1.0, N))
        steps.append(K)
    return steps, KernelSequence([[k for k in K] for K in steps], T)


def random_state(rng, L, N, T, spread=1.0):
    u = np.exp(rng.normal(0, spread, (T + 1, N)))
    u[0] = 1.0
    return ScalingState(u, np.exp(rng.normal(0, spread, (T + 1, L, N))))


def line_grid(N):
    return TerrainGrid(N, 1, np.array(["n"] * N))


def _species(grid, ell, mu0):
    return SpeciesSpec(ell + 1, {"n"}, 1, 1.0, 0.0, np.full(grid.n_cells, np.inf), float(mu0.sum()), mu0)


def random_feasible_problem(rng, L=None, N=None, T=None, epsilon=None, kinds=None, row_kinds=None):
    """A problem whose equality targets come from a reference tensor, so it is feasible.

    Returns ``(problem, kernel_steps, kernels)``.
    """
    L = L or int(rng.integers(1, 3))
    N = N or int(rng.integers(2, 6))
    T = T or int(rng.integers(1, 4))
    epsilon = epsilon or float(rng.uniform(0.2, 2.0))
    steps, kernels = random_kernels(rng, L, N, T)
    ref_state = random_state(rng, L, N, T, spread=0.5)
    tensor = materialize(steps, ref_state)
    rows = [dense_projection(tensor, (-1, j)) for j in range(T + 1)]
    peak = max(r.sum(axis=0).max() for r in rows)
    rows = [r * (0.6 / peak) for r in rows]
    totals = [r.sum(axis=0) for r in rows]

    kinds = kinds or ("fixed", "subset", "linear", "congestion", "free")
    row_kinds = row_kinds or ("fixed", "subset", "linear", "free")
    grid = line_grid(N)
    species = [_species(grid, ell, rows[0][ell]) for ell in range(L)]
    total_costs, species_costs = {}, {}
    for j in range(1, T + 1):
        kind = kinds[int(rng.integers(len(kinds)))]
        mask = rng.random(N) < 0.6
        if kind == "fixed":
            total_costs[j] = Fixed(totals[j])
        elif kind == "subset":
            total_costs[j] = FixedOnSubset(totals[j], mask)
        elif kind == "congestion":
            total_costs[j] = Congestion(mask)
        elif kind == "linear":
            total_costs[j] = LinearWithCapacity(rng.uniform(-0.5, 0.5, N), totals[j] * rng.uniform(1.0, 2.0, N))
        else:
            total_costs[j] = Free()
        row_costs = []
        for ell in range(L):
            rk = row_kinds[int(rng.integers(len(row_kinds)))]
            if rk == "fixed":
                row_costs.append(Fixed(rows[j][ell]))
            elif rk == "subset":
                row_costs.append(FixedOnSubset(rows[j][ell], rng.random(N) < 0.5))
            elif rk == "linear":
                cap = np.where(rng.random(N) < 0.5, np.inf, rows[j][ell] * rng.uniform(1.0, 1.5, N))
                row_costs.append(LinearWithCapacity(rng.uniform(0, 0.5, N), cap))
            else:
                row_costs.append(Free())
        species_costs[j] = row_costs
    problem = make_problem(grid, species, T, epsilon, total_costs, species_costs)
    return problem, steps, kernels
