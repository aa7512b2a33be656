"""Brute-force reference: materialize the mass tensor and sum it directly.

Only for desk-sized instances. Axis 0 of every dense tensor is the
species, axis ``j + 1`` is time index ``j``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernel import KernelSequence, build_kernels
from .propagation import ScalingState
from .scenario import EQUALITY_COSTS, FixedOnSubset, Free, Problem
from .solver import (
    SolveOptions,
    Solution,
    SweepRecord,
    _log_change,
    marginal_costs,
)
from .updates import InfeasibleError, equality_residual, update_bimarginal, update_scaling

MAX_ENTRIES = 10**7


class TensorTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class DenseTensor:
    n_species: int
    n_cells: int
    horizon: int
    values: np.ndarray

    @property
    def dims(self):
        return (self.n_species, self.n_cells, self.horizon + 1)

    def total(self) -> float:
        return float(self.values.sum())


def _check_size(n_species, n_cells, horizon):
    entries = n_species * n_cells ** (horizon + 1)
    if entries > MAX_ENTRIES:
        raise TensorTooLarge(f"dense tensor would have {entries} entries (cap {MAX_ENTRIES})")


def _dense_steps(kernels, horizon):
    if isinstance(kernels, KernelSequence):
        return [kernels.dense(j) for j in range(horizon)]
    kernels = [np.asarray(k, dtype=float) for k in kernels]
    if len(kernels) == 1:
        return kernels * horizon
    return kernels


def materialize(kernels, state: ScalingState) -> DenseTensor:
    """Every path's mass ``prod K * U0 * prod_(j>=1) U_j u_j``.

    ``kernels`` is a KernelSequence or a list of ``(L, N, N)`` arrays (one
    shared, or one per step).
    """
    state = state.linear()
    T, L, N = state.horizon, state.n_species, state.n_cells
    _check_size(L, N, T)
    steps = _dense_steps(kernels, T)
    M = state.U[0].copy()
    for j in range(T):
        K = steps[j]
        # M[l, i0..ij] -> M[l, i0..ij, i(j+1)]
        expand = (slice(None),) + (None,) * j + (slice(None), slice(None))
        M = M[..., None] * K[expand]
        tail = state.U[j + 1] * state.u[j + 1]
        M = M * tail.reshape((L,) + (1,) * (j + 1) + (N,))
    return DenseTensor(L, N, T, M)


def dense_projection(tensor: DenseTensor, modes) -> np.ndarray:
    """Sum out every mode not in ``modes`` (``-1`` is the species mode).

    The kept axes come out in increasing mode order.
    """
    keep = sorted(set(int(m) for m in modes))
    for m in keep:
        if not -1 <= m <= tensor.horizon:
            raise ValueError(f"mode {m} outside -1..{tensor.horizon}")
    axes = tuple(a for a in range(tensor.values.ndim) if a - 1 not in keep)
    return tensor.values.sum(axis=axes)


def cost_tensor(kernels, horizon: int, epsilon: float) -> np.ndarray:
    """``sum_j C_j[l, i_j, i_(j+1)]`` with ``C = -epsilon log K`` (inf where K = 0)."""
    steps = _dense_steps(kernels, horizon)
    L, N = steps[0].shape[:2]
    _check_size(L, N, horizon)
    with np.errstate(divide="ignore"):
        costs = [-epsilon * np.log(k) for k in steps]
    C = np.zeros((L, N))
    for j in range(horizon):
        expand = (slice(None),) + (None,) * j + (slice(None), slice(None))
        C = C[..., None] + costs[j][expand]
    return C


def dense_entropy_objective(tensor: DenseTensor, C: np.ndarray, epsilon: float) -> float:
    """``<C, M> + epsilon * sum(M log M - M + 1)`` with ``0 log 0 = 0`` and ``0 * inf = 0``."""
    M = tensor.values
    pos = M > 0
    transport = float(np.sum(M[pos] * C[pos]))
    entropy = float(np.sum(M[pos] * np.log(M[pos]))) - float(M.sum()) + M.size
    return transport + epsilon * entropy


def _replace(state: ScalingState, which: str, j: int) -> ScalingState:
    probe = state.copy()
    if which == "U":
        probe.U[j] = 1.0
    else:
        probe.u[j] = 1.0
    return probe


def dense_sweep(problem: Problem, steps, state: ScalingState) -> SweepRecord:
    """Same update order as the structured sweep; factors come from full sums."""
    eps = problem.epsilon
    residual, change = 0.0, 0.0
    for j in range(problem.horizon + 1):
        weight = problem.running_weight(j)
        W = dense_projection(materialize(steps, _replace(state, "U", j)), (-1, j))
        for ell, cost in enumerate(problem.species_costs[j]):
            r = equality_residual(cost, state.U[j][ell] * W[ell])
            if r is not None:
                residual = max(residual, r)
        new = update_bimarginal(W, problem.species_costs[j], eps, weight if j else 1.0)
        change = max(change, _log_change(state.U[j], new, False))
        state.U[j] = new
        if j == 0:
            continue
        w = dense_projection(materialize(steps, _replace(state, "u", j)), (j,))
        cost = problem.total_costs[j]
        r = equality_residual(cost, state.u[j] * w)
        if r is not None:
            residual = max(residual, r)
        new = update_scaling(cost, w, eps, weight)
        change = max(change, _log_change(state.u[j], new, False))
        state.u[j] = new
    return SweepRecord(0, residual, change)


def dense_solve(problem: Problem, options: SolveOptions | None = None, *, kernels=None, on_sweep=None) -> Solution:
    options = options or SolveOptions()
    T, L, N = problem.horizon, problem.n_species, problem.n_cells
    _check_size(L, N, T)
    kernels = kernels if kernels is not None else build_kernels(problem)
    steps = _dense_steps(kernels, T)
    state = ScalingState.ones(T, L, N)
    history = []
    converged = False
    k = 0
    for k in range(1, options.max_sweeps + 1):
        try:
            rec = dense_sweep(problem, steps, state)
        except InfeasibleError as exc:
            exc.sweep = k
            raise
        rec = SweepRecord(k, rec.residual, rec.log_change)
        converged = rec.residual <= options.tol and rec.log_change <= options.tol
        if k % options.record_every == 0 or converged or k == options.max_sweeps:
            history.append(rec)
        if on_sweep is not None:
            on_sweep(k, state, history)
        if converged:
            break
    W0 = dense_projection(materialize(steps, _replace(state, "U", 0)), (-1, 0))
    state.U[0] = update_bimarginal(W0, problem.species_costs[0], problem.epsilon)
    tensor = materialize(steps, state)
    species = np.stack([dense_projection(tensor, (-1, j)) for j in range(T + 1)])
    return Solution(state, species.sum(axis=1), species, history, converged, k)


def dense_objective(problem: Problem, solution: Solution, kernels=None) -> float:
    kernels = kernels if kernels is not None else build_kernels(problem)
    steps = _dense_steps(kernels, problem.horizon)
    tensor = materialize(steps, solution.scalings)
    C = cost_tensor(steps, problem.horizon, problem.epsilon)
    species = np.stack([dense_projection(tensor, (-1, j)) for j in range(problem.horizon + 1)])
    return dense_entropy_objective(tensor, C, problem.epsilon) + marginal_costs(problem, species.sum(axis=1), species)


def dense_dual(problem: Problem, state: ScalingState, kernels=None) -> float:
    """``epsilon * (sum <log s, target> - mass + entries)`` for equality/free problems."""
    kernels = kernels if kernels is not None else build_kernels(problem)
    tensor = materialize(_dense_steps(kernels, problem.horizon), state)
    lin = state.linear()
    value = 0.0
    for j in range(problem.horizon + 1):
        pairs = list(zip(problem.species_costs[j], lin.U[j]))
        if j >= 1:
            pairs.append((problem.total_costs[j], lin.u[j]))
        for cost, s in pairs:
            if isinstance(cost, Free):
                continue
            if not isinstance(cost, EQUALITY_COSTS):
                raise ValueError("dual value is only defined for equality and free costs")
            t = cost.target * (cost.mask if isinstance(cost, FixedOnSubset) else 1.0)
            for tv, sv in zip(t.ravel(), s.ravel()):
                if tv > 0:
                    value += tv * np.log(sv)
    return problem.epsilon * (value - tensor.total() + tensor.values.size)
