"""Generalized Sinkhorn sweeps for the multispecies problem."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .kernel import KernelSequence, build_kernels
from .propagation import (
    ScalingState,
    all_bimarginals,
    backward_pass,
    forward_step,
    messages,
    pair_projection,
)
from .scenario import (
    EQUALITY_COSTS,
    Congestion,
    Fixed,
    FixedOnSubset,
    Free,
    LinearWithCapacity,
    Problem,
)
from .updates import (
    InfeasibleError,
    equality_residual,
    log_update_bimarginal,
    log_update_scaling,
    update_bimarginal,
    update_scaling,
)

logger = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Scalings left the floating-point range (retry with ``log_domain=True``)."""


@dataclass
class SolveOptions:
    tol: float = 1e-6
    max_sweeps: int = 5000
    log_domain: bool = False
    record_every: int = 1
    threads: int = 1
    deterministic: bool = False

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.max_sweeps < 1:
            raise ValueError(f"max_sweeps must be >= 1, got {self.max_sweeps}")
        if self.record_every < 1:
            raise ValueError(f"record_every must be >= 1, got {self.record_every}")


@dataclass(frozen=True)
class SweepRecord:
    sweep: int
    residual: float
    log_change: float


@dataclass
class Solution:
    scalings: ScalingState
    totals: np.ndarray
    species_marginals: np.ndarray
    residual_history: list
    converged: bool
    sweeps_used: int

    @property
    def final_residual(self) -> float:
        return self.residual_history[-1].residual if self.residual_history else math.nan


# -- one sweep ---------------------------------------------------------------


def _log_change(old, new, log: bool) -> float:
    if log:
        both_dead = np.isneginf(old) & np.isneginf(new)
        with np.errstate(invalid="ignore"):
            diff = np.abs(new - old)
    else:
        both_dead = (old == 0) & (new == 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            diff = np.abs(np.log(new) - np.log(old))
    diff = np.where(both_dead, 0.0, diff)
    return float(diff.max()) if diff.size else 0.0


def _marginal(scaling, factor, log: bool):
    if log:
        return np.exp(scaling + factor)
    return scaling * factor


def sweep(problem: Problem, kernels: KernelSequence, state: ScalingState, pool=None) -> SweepRecord:
    """One pass of coordinate updates, in place on ``state``.

    Order: refresh all backward messages, fix the initial species rows,
    then for ``j = 1..T`` advance the forward message, update the species
    scalings at ``j`` and then the total scaling at ``j``.

    Returns a record whose ``residual`` is the largest L1 violation of an
    equality cost seen just before its update (sweep number left at 0).
    """
    T, eps, log = problem.horizon, problem.epsilon, state.log
    mul = np.add if log else np.multiply
    psi = backward_pass(state, kernels, pool)
    residual, change = 0.0, 0.0

    def rows_update(j, W, weight):
        nonlocal residual, change
        costs = problem.species_costs[j]
        for ell, cost in enumerate(costs):
            r = equality_residual(cost, _marginal(state.U[j][ell], W[ell], log))
            if r is not None:
                residual = max(residual, r)
        if log:
            new = log_update_bimarginal(W, costs, eps, weight)
        else:
            new = update_bimarginal(W, costs, eps, weight)
        change = max(change, _log_change(state.U[j], new, log))
        state.U[j] = new

    rows_update(0, psi[0], 1.0)
    psi_hat = None
    for j in range(1, T + 1):
        psi_hat = forward_step(state, kernels, j, psi_hat, pool)
        weight = problem.running_weight(j)
        outer = mul(psi[j], psi_hat)
        rows_update(j, mul(outer, state.u[j]), weight)

        per_species = mul(outer, state.U[j])
        w = logsumexp(per_species, axis=0) if log else per_species.sum(axis=0)
        cost = problem.total_costs[j]
        r = equality_residual(cost, _marginal(state.u[j], w, log))
        if r is not None:
            residual = max(residual, r)
        if log:
            new = log_update_scaling(cost, w, eps, weight)
        else:
            new = update_scaling(cost, w, eps, weight)
        change = max(change, _log_change(state.u[j], new, log))
        state.u[j] = new

    if not log and not (np.all(np.isfinite(state.u)) and np.all(np.isfinite(state.U))):
        raise NumericalError("scalings overflowed; use the log-domain mode")
    if log and (np.isnan(state.u).any() or np.isnan(state.U).any() or np.isposinf(state.U).any()):
        raise NumericalError("log-scalings became undefined")
    return SweepRecord(0, residual, change)


# -- driver ------------------------------------------------------------------


def initial_state(problem: Problem, log_domain: bool = False) -> ScalingState:
    return ScalingState.ones(problem.horizon, problem.n_species, problem.n_cells, log=log_domain)


def close_initial_rows(problem: Problem, kernels: KernelSequence, state: ScalingState, pool=None) -> None:
    """Re-pin the initial species rows, making every species carry exactly its initial mass."""
    psi0 = backward_pass(state, kernels, pool)[0]
    if state.log:
        state.U[0] = log_update_bimarginal(psi0, problem.species_costs[0], problem.epsilon)
    else:
        state.U[0] = update_bimarginal(psi0, problem.species_costs[0], problem.epsilon)


def extract(problem: Problem, kernels: KernelSequence, state: ScalingState, pool=None):
    """Species and total marginals for every time index (linear scale)."""
    species = all_bimarginals(state, kernels, pool)
    return species.sum(axis=1), species


def solve(
    problem: Problem,
    options: SolveOptions | None = None,
    *,
    kernels: KernelSequence | None = None,
    state: ScalingState | None = None,
    history: list | None = None,
    start_sweep: int = 0,
    on_sweep: Callable | None = None,
) -> Solution:
    """Run sweeps until constraints hold and scalings stop moving.

    Parameters
    ----------
    problem : Problem
    options : SolveOptions, optional
    kernels : KernelSequence, optional
        Prebuilt kernels; built from ``problem`` if omitted.
    state, history, start_sweep
        Resume point (e.g. from a checkpoint); ``state`` is copied.
    on_sweep : callable, optional
        Called as ``on_sweep(sweep_number, state, history)`` after every sweep.

    Returns
    -------
    Solution
        ``converged`` is False when ``max_sweeps`` ran out; that is not an error.
    """
    options = options or SolveOptions()
    kernels = kernels if kernels is not None else build_kernels(problem)
    if state is None:
        state = initial_state(problem, options.log_domain)
    else:
        state = state.copy()
        if state.log != options.log_domain:
            state = state.logarithmic() if options.log_domain else state.linear()
    history = list(history or [])
    threads = 1 if options.deterministic else max(1, int(options.threads))
    converged = False
    k = start_sweep
    with ThreadPoolExecutor(threads) if threads > 1 else nullcontext() as pool:
        for k in range(start_sweep + 1, options.max_sweeps + 1):
            try:
                rec = sweep(problem, kernels, state, pool)
            except InfeasibleError as exc:
                exc.sweep = k
                raise
            rec = SweepRecord(k, rec.residual, rec.log_change)
            converged = rec.residual <= options.tol and rec.log_change <= options.tol
            if k % options.record_every == 0 or converged or k == options.max_sweeps:
                history.append(rec)
                logger.debug("sweep %d residual %.3e log-change %.3e", k, rec.residual, rec.log_change)
            if on_sweep is not None:
                on_sweep(k, state, history)
            if converged:
                break
        close_initial_rows(problem, kernels, state, pool)
        totals, species = extract(problem, kernels, state, pool)
    return Solution(state, totals, species, history, converged, k)


# -- objective ---------------------------------------------------------------


def _f(x):
    return x / (1.0 - x)


def marginal_cost_value(cost, marginal, weight=1.0, cap_tol=1e-9) -> float:
    """Value of one marginal cost on an extracted marginal."""
    if isinstance(cost, (Free, Fixed, FixedOnSubset)):
        return 0.0
    if isinstance(cost, LinearWithCapacity):
        over = marginal > cost.capacity * (1 + cap_tol) + cap_tol
        if over.any():
            return math.inf
        return weight * float(np.dot(cost.cost, marginal))
    if isinstance(cost, Congestion):
        vals = marginal[cost.mask]
        if (vals >= 1).any():
            i = int(np.flatnonzero(cost.mask)[np.flatnonzero(vals >= 1)[0]])
            raise InfeasibleError(f"density {marginal[i]!r} >= 1 on congestion cell {i}", cell=i)
        return weight * float(np.sum(_f(vals)))
    raise TypeError(f"unsupported cost {cost!r}")


def marginal_costs(problem: Problem, totals, species_marginals) -> float:
    total = 0.0
    for j in range(1, problem.horizon + 1):
        weight = problem.running_weight(j)
        total += marginal_cost_value(problem.total_costs[j], totals[j], weight)
        for ell, cost in enumerate(problem.species_costs[j]):
            total += marginal_cost_value(cost, species_marginals[j][ell], weight)
    return total


def tensor_entry_count(problem: Problem) -> float:
    return problem.n_species * float(problem.n_cells) ** (problem.horizon + 1)


def _xlogy(x, logy):
    return np.where(x > 0, x * np.where(x > 0, logy, 0.0), 0.0)


def transport_and_entropy(problem: Problem, state: ScalingState, kernels: KernelSequence, include_constant=True):
    """``<C, M>`` from adjacent-pair projections and ``D(M)`` from the factorization."""
    eps = problem.epsilon
    log_state = state.logarithmic()
    lin_state = state.linear()
    cache = messages(lin_state, kernels)
    transport = 0.0
    for j in range(problem.horizon):
        for pair, k in zip(pair_projection(j, lin_state, cache, kernels), kernels.step(j)):
            cost = -eps * np.log(k.tocoo().data)
            transport += float(np.dot(pair.data, cost))
    bimarginals = all_bimarginals(lin_state, kernels)
    mass = float(bimarginals[0].sum())
    # sum M log M = sum M log K + sum M log U, and log K = -C / eps
    mlogm = -transport / eps
    for j in range(problem.horizon + 1):
        mlogm += float(_xlogy(bimarginals[j], log_state.U[j]).sum())
        if j >= 1:
            mlogm += float(_xlogy(bimarginals[j].sum(axis=0), log_state.u[j]).sum())
    entropy = mlogm - mass + (tensor_entry_count(problem) if include_constant else 0.0)
    return transport, entropy


def objective(problem: Problem, solution: Solution, kernels: KernelSequence | None = None, include_constant=True) -> float:
    """Primal value: transport + epsilon * entropy + marginal costs."""
    kernels = kernels if kernels is not None else build_kernels(problem)
    transport, entropy = transport_and_entropy(problem, solution.scalings, kernels, include_constant)
    return transport + problem.epsilon * entropy + marginal_costs(
        problem, solution.totals, solution.species_marginals
    )


def dual_objective(problem: Problem, state: ScalingState, kernels: KernelSequence | None = None) -> float:
    """Dual value of the scalings for problems whose costs are all equalities or free."""
    kernels = kernels if kernels is not None else build_kernels(problem)
    log_state = state.logarithmic()
    value = 0.0
    for j in range(problem.horizon + 1):
        costs = [(problem.total_costs[j], log_state.u[j])] if j >= 1 else []
        costs += list(zip(problem.species_costs[j], log_state.U[j]))
        for cost, logs in costs:
            if isinstance(cost, Free):
                continue
            if not isinstance(cost, EQUALITY_COSTS):
                raise ValueError("dual value is only defined for equality and free costs")
            mask = cost.mask if isinstance(cost, FixedOnSubset) else np.ones_like(logs, dtype=bool)
            value += float(_xlogy(cost.target * mask, logs).sum())
    mass = float(all_bimarginals(state.linear(), kernels)[0].sum())
    return problem.epsilon * (value - mass + tensor_entry_count(problem))
