"""Forward/backward message recursions and tensor projections without the tensor.

The mass tensor is ``M = K * U`` with entries

    M[l, i0..iT] = prod_j K^j_l[i_j, i_(j+1)] * U_0[l, i0] * prod_(j>=1) U_j[l, i_j] u_j[i_j]

Its species/time bi-marginal at index ``j`` factors as
``psi[j] * psi_hat[j] * U[j] * u[j]`` where ``psi_hat`` collects the paths
before ``j`` and ``psi`` the paths after it. With the conventions
``psi_hat[0] = 1``, ``psi[T] = 1`` and ``u[0] = 1`` one formula covers
every index.

All functions work either on plain scalings or, when ``state.log`` is set,
on their logarithms; in that case messages are logarithms too.
"""

from __future__ import annotations

from concurrent.futures import Executor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import logsumexp

from .kernel import KernelSequence


@dataclass
class ScalingState:
    """Dual scalings of the mass tensor.

    ``u`` has shape ``(T + 1, N)``; row 0 is a placeholder (the initial total
    marginal is unconstrained) and stays at 1. ``U`` has shape
    ``(T + 1, L, N)``. With ``log=True`` both hold logarithms.
    """

    u: np.ndarray
    U: np.ndarray
    log: bool = False

    @classmethod
    def ones(cls, horizon: int, n_species: int, n_cells: int, log: bool = False) -> "ScalingState":
        fill = 0.0 if log else 1.0
        return cls(
            np.full((horizon + 1, n_cells), fill),
            np.full((horizon + 1, n_species, n_cells), fill),
            log,
        )

    @property
    def horizon(self) -> int:
        return self.u.shape[0] - 1

    @property
    def n_species(self) -> int:
        return self.U.shape[1]

    @property
    def n_cells(self) -> int:
        return self.u.shape[1]

    def copy(self) -> "ScalingState":
        return ScalingState(self.u.copy(), self.U.copy(), self.log)

    def linear(self) -> "ScalingState":
        if not self.log:
            return self
        return ScalingState(np.exp(self.u), np.exp(self.U), False)

    def logarithmic(self) -> "ScalingState":
        if self.log:
            return self
        with np.errstate(divide="ignore"):
            return ScalingState(np.log(self.u), np.log(self.U), True)

    def scaled(self, j: int) -> np.ndarray:
        """``U[j] diag(u[j])`` (a sum of logs in log mode); ``u[0]`` is never used."""
        if j == 0:
            return self.U[0]
        return self.U[j] + self.u[j] if self.log else self.U[j] * self.u[j]


@dataclass
class MessageCache:
    """Messages ``psi_hat[j]`` (j = 1..T) and ``psi[j]`` (j = 0..T-1), each ``(T + 1, L, N)``."""

    psi_hat: np.ndarray
    psi: np.ndarray
    log: bool = False


def _check(kernels, A):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != len(kernels):
        raise ValueError(f"expected an ({len(kernels)}, N) matrix, got shape {A.shape}")
    for k in kernels:
        if k.shape != (A.shape[1], A.shape[1]):
            raise ValueError(f"kernel shape {k.shape} does not match {A.shape[1]} cells")
    return A


def _map(pool: Executor | None, fn, items):
    if pool is None:
        return [fn(x) for x in items]
    return list(pool.map(fn, items))


def s_hat_apply(kernels, A, pool: Executor | None = None) -> np.ndarray:
    """``out[l, k] = sum_i K_l[i, k] A[l, i]``: push each species row one step forward."""
    A = _check(kernels, A)
    rows = _map(pool, lambda la: la[0].T @ la[1], list(zip(kernels, A)))
    return np.vstack(rows) if rows else np.zeros_like(A)


def s_apply(kernels, A, pool: Executor | None = None) -> np.ndarray:
    """``out[l, i] = sum_k K_l[i, k] A[l, k]``: pull each species row one step backward."""
    A = _check(kernels, A)
    rows = _map(pool, lambda la: la[0] @ la[1], list(zip(kernels, A)))
    return np.vstack(rows) if rows else np.zeros_like(A)


def log_matvec(log_kernel: sp.csr_matrix, a: np.ndarray) -> np.ndarray:
    """``out[i] = logsumexp_k(log_kernel[i, k] + a[k])`` over the stored pattern."""
    n = log_kernel.shape[0]
    out = np.full(n, -np.inf)
    indptr = log_kernel.indptr
    if log_kernel.nnz == 0:
        return out
    vals = log_kernel.data + a[log_kernel.indices]
    lengths = np.diff(indptr)
    rows = np.flatnonzero(lengths)
    starts = indptr[:-1][rows]
    peak = np.maximum.reduceat(vals, starts)
    shift = np.where(np.isfinite(peak), peak, 0.0)
    total = np.add.reduceat(np.exp(vals - np.repeat(shift, lengths[rows])), starts)
    with np.errstate(divide="ignore"):
        out[rows] = shift + np.log(total)
    return out


def log_s_hat_apply(log_kernels_t, A, pool: Executor | None = None) -> np.ndarray:
    """Log-domain ``s_hat_apply``; takes the transposed log-kernels."""
    A = np.asarray(A, dtype=float)
    return np.vstack(_map(pool, lambda la: log_matvec(la[0], la[1]), list(zip(log_kernels_t, A))))


def log_s_apply(log_kernels, A, pool: Executor | None = None) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    return np.vstack(_map(pool, lambda la: log_matvec(la[0], la[1]), list(zip(log_kernels, A))))


def _fill(state: ScalingState) -> float:
    return 0.0 if state.log else 1.0


def forward_step(state: ScalingState, kernels: KernelSequence, j: int, prev, pool=None) -> np.ndarray:
    """``psi_hat[j]`` from ``psi_hat[j - 1]`` (ignored for ``j = 1``)."""
    kernels.applications += 1
    if j == 1:
        arg = state.U[0]
    elif state.log:
        arg = prev + state.scaled(j - 1)
    else:
        arg = prev * state.scaled(j - 1)
    if state.log:
        return log_s_hat_apply(kernels.log_step_transposed(j - 1), arg, pool)
    return s_hat_apply(kernels.step(j - 1), arg, pool)


def backward_step(state: ScalingState, kernels: KernelSequence, j: int, nxt, pool=None) -> np.ndarray:
    """``psi[j]`` from ``psi[j + 1]`` (ignored for ``j = T - 1``)."""
    kernels.applications += 1
    T = state.horizon
    if j == T - 1:
        arg = state.scaled(T)
    elif state.log:
        arg = nxt + state.scaled(j + 1)
    else:
        arg = nxt * state.scaled(j + 1)
    if state.log:
        return log_s_apply(kernels.log_step(j), arg, pool)
    return s_apply(kernels.step(j), arg, pool)


def forward_pass(state: ScalingState, kernels: KernelSequence, pool=None) -> np.ndarray:
    """All forward messages; index 0 holds the neutral element."""
    T = state.horizon
    psi_hat = np.full((T + 1,) + state.U.shape[1:], _fill(state))
    for j in range(1, T + 1):
        psi_hat[j] = forward_step(state, kernels, j, psi_hat[j - 1], pool)
    return psi_hat


def backward_pass(state: ScalingState, kernels: KernelSequence, pool=None) -> np.ndarray:
    """All backward messages; index T holds the neutral element."""
    T = state.horizon
    psi = np.full((T + 1,) + state.U.shape[1:], _fill(state))
    for j in range(T - 1, -1, -1):
        psi[j] = backward_step(state, kernels, j, psi[j + 1], pool)
    return psi


def messages(state: ScalingState, kernels: KernelSequence, pool=None) -> MessageCache:
    return MessageCache(forward_pass(state, kernels, pool), backward_pass(state, kernels, pool), state.log)


def project_bimarginal(j: int, state: ScalingState, cache: MessageCache, kernels: KernelSequence | None = None) -> np.ndarray:
    """Species-by-cell marginal at time index ``j`` (log of it in log mode).

    If ``kernels`` is given the cache is recomputed from ``state`` and
    compared first; a mismatch raises ValueError.
    """
    if kernels is not None:
        fresh = messages(state, kernels)
        ok = np.allclose(fresh.psi_hat[j], cache.psi_hat[j], rtol=1e-9, atol=0) and np.allclose(
            fresh.psi[j], cache.psi[j], rtol=1e-9, atol=0
        )
        if not ok:
            raise ValueError(f"message cache is inconsistent with the scalings at index {j}")
    if state.log:
        return cache.psi[j] + cache.psi_hat[j] + state.scaled(j)
    return cache.psi[j] * cache.psi_hat[j] * state.scaled(j)


def project_total(bimarginal: np.ndarray, log: bool = False) -> np.ndarray:
    """Total density: sum of the species rows."""
    if log:
        return logsumexp(bimarginal, axis=0)
    return np.sum(bimarginal, axis=0)


def all_bimarginals(state: ScalingState, kernels: KernelSequence, pool=None) -> np.ndarray:
    """Bi-marginals for every index as a linear ``(T + 1, L, N)`` array."""
    cache = messages(state, kernels, pool)
    out = np.stack([project_bimarginal(j, state, cache) for j in range(state.horizon + 1)])
    return np.exp(out) if state.log else out


def pair_projection(j: int, state: ScalingState, cache: MessageCache, kernels: KernelSequence) -> list[sp.coo_matrix]:
    """Per-species joint mass of ``(i_j, i_(j+1))`` (linear scale).

    Each COO matrix lists its entries in the order of ``kernels.step(j)[l].tocoo()``.
    """
    left = cache.psi_hat[j] + state.scaled(j) if state.log else cache.psi_hat[j] * state.scaled(j)
    right = cache.psi[j + 1] + state.scaled(j + 1) if state.log else cache.psi[j + 1] * state.scaled(j + 1)
    out = []
    for ell, k in enumerate(kernels.step(j)):
        k = k.tocoo()
        if state.log:
            with np.errstate(divide="ignore"):
                vals = np.exp(np.log(k.data) + left[ell][k.row] + right[ell][k.col])
        else:
            vals = k.data * left[ell][k.row] * right[ell][k.col]
        out.append(sp.coo_matrix((vals, (k.row, k.col)), shape=k.shape))
    return out
