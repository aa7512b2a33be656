"""Scaling updates for each marginal cost.

Given the rest-of-tensor factor ``w`` (so that the current marginal is
``scaling * w``), each update returns the scaling whose marginal
``mu = scaling * w`` satisfies ``-epsilon * log(mu / w) in dF(mu)``.

Every rule has a log-domain twin taking ``log w`` and returning
``log scaling``; both share the same closed forms and root solver.
"""

from __future__ import annotations

import numpy as np

from .scenario import Congestion, Fixed, FixedOnSubset, Free, LinearWithCapacity

_LOG_HALF = np.log(0.5)
# keeps the barrier bracket strictly inside (0, 1)
_BARRIER_LO = 1e-15


class InfeasibleError(RuntimeError):
    """A positive target where the tensor carries no mass."""

    def __init__(self, message: str, cell: int | None = None, species: int | None = None):
        super().__init__(message)
        self.cell = cell
        self.species = species


class RootFindingError(RuntimeError):
    pass


def _positive_target_on_zero(w, target, mask=None):
    bad = (w <= 0) & (target > 0)
    if mask is not None:
        bad &= mask
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise InfeasibleError(f"target {float(target[i])!r} at cell {i} is unreachable (no mass can arrive)", cell=i)


# -- linear domain -----------------------------------------------------------


def update_fixed(w, target) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    target = np.asarray(target, dtype=float)
    _positive_target_on_zero(w, target)
    out = np.ones_like(w)
    pos = w > 0
    out[pos] = target[pos] / w[pos]
    return out


def update_fixed_on_subset(w, target, mask) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    target = np.asarray(target, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    _positive_target_on_zero(w, target, mask)
    out = np.ones_like(w)
    sel = mask & (w > 0)
    out[sel] = target[sel] / w[sel]
    return out


def update_linear_capacity(w, c, kappa, epsilon, weight=1.0) -> np.ndarray:
    """Linear running cost clipped at a capacity: ``mu = min(w exp(-c/eps), kappa)``."""
    w = np.asarray(w, dtype=float)
    free = np.exp(-weight * np.asarray(c, dtype=float) / epsilon) * np.ones_like(w)
    out = free.copy()
    pos = w > 0
    kappa = np.broadcast_to(np.asarray(kappa, dtype=float), w.shape)
    mu = np.minimum(w[pos] * free[pos], kappa[pos])
    out[pos] = mu / w[pos]
    return out


def barrier_log_root(log_w, epsilon, weight=1.0, tol=2e-13, max_iter=200) -> np.ndarray:
    """Solve ``epsilon * (y - log_w) + weight / (1 - e^y)**2 = 0`` for ``y = log mu``.

    The left side is increasing and convex in ``y``, so Newton started
    from the right of the root decreases monotonically onto it; a bracket
    guards every step and falls back to bisection if a step leaves it.
    """
    lw = np.asarray(log_w, dtype=float)
    eps = np.asarray(epsilon, dtype=float)
    hi = np.minimum(lw - weight / eps, np.log1p(-_BARRIER_LO))
    lo = np.minimum(lw - 4.0 * weight / eps, _LOG_HALF)
    y = hi.copy()
    scale = tol * np.maximum(1.0, np.abs(eps * lw))
    done = np.zeros(lw.shape, dtype=bool)
    for _ in range(max_iter):
        em1 = np.expm1(y)
        h = eps * (y - lw) + weight / (em1 * em1)
        done |= np.abs(h) <= scale
        if done.all():
            return y
        hi = np.where(h > 0, y, hi)
        lo = np.where(h < 0, y, lo)
        dh = eps + 2.0 * weight * np.exp(y) / (-em1) ** 3
        step = y - h / dh
        bad = ~np.isfinite(step) | (step <= lo) | (step >= hi)
        step = np.where(bad, 0.5 * (lo + hi), step)
        stalled = step == y
        done |= stalled
        y = np.where(done, y, step)
    raise RootFindingError(f"barrier root did not converge in {max_iter} iterations")


def congestion_root(w, epsilon, weight=1.0) -> np.ndarray:
    """Congested density ``mu* in (0, 1)`` for ``w > 0``."""
    with np.errstate(divide="ignore"):
        return np.exp(barrier_log_root(np.log(np.asarray(w, dtype=float)), epsilon, weight))


def update_congestion(w, epsilon, mask, weight=1.0) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    out = np.ones_like(w)
    sel = np.asarray(mask, dtype=bool) & (w > 0)
    if sel.any():
        out[sel] = congestion_root(w[sel], epsilon, weight) / w[sel]
    return out


def update_free(w) -> np.ndarray:
    return np.ones_like(np.asarray(w, dtype=float))


def update_scaling(cost, w, epsilon, weight=1.0) -> np.ndarray:
    """Dispatch to the rule matching ``cost``."""
    if isinstance(cost, Fixed):
        return update_fixed(w, cost.target)
    if isinstance(cost, FixedOnSubset):
        return update_fixed_on_subset(w, cost.target, cost.mask)
    if isinstance(cost, LinearWithCapacity):
        return update_linear_capacity(w, cost.cost, cost.capacity, epsilon, weight)
    if isinstance(cost, Congestion):
        return update_congestion(w, epsilon, cost.mask, weight)
    if isinstance(cost, Free):
        return update_free(w)
    raise TypeError(f"unsupported cost {cost!r}")


def update_species_row(w_row, cost, epsilon, weight=1.0) -> np.ndarray:
    return update_scaling(cost, w_row, epsilon, weight)


def update_bimarginal(W, costs, epsilon, weight=1.0) -> np.ndarray:
    """Row-wise update of the species scalings; rows are independent."""
    out = np.empty_like(np.asarray(W, dtype=float))
    for ell, (row, cost) in enumerate(zip(W, costs)):
        try:
            out[ell] = update_species_row(row, cost, epsilon, weight)
        except InfeasibleError as exc:
            raise InfeasibleError(f"species {ell + 1}: {exc}", cell=exc.cell, species=ell + 1) from exc
    return out


# -- log domain --------------------------------------------------------------


def log_update_scaling(cost, log_w, epsilon, weight=1.0) -> np.ndarray:
    lw = np.asarray(log_w, dtype=float)
    reach = lw > -np.inf
    if isinstance(cost, (Fixed, FixedOnSubset)):
        target = cost.target
        mask = cost.mask if isinstance(cost, FixedOnSubset) else np.ones(lw.shape, bool)
        _positive_target_on_zero(np.where(reach, 1.0, 0.0), target, mask)
        out = np.zeros_like(lw)
        sel = mask & reach
        with np.errstate(divide="ignore"):
            out[sel] = np.log(target[sel]) - lw[sel]
        return out
    if isinstance(cost, LinearWithCapacity):
        free = -weight * np.asarray(cost.cost, dtype=float) / epsilon * np.ones_like(lw)
        out = free.copy()
        with np.errstate(divide="ignore"):
            cap = np.log(cost.capacity) * np.ones_like(lw)
        out[reach] = np.minimum(free[reach], cap[reach] - lw[reach])
        return out
    if isinstance(cost, Congestion):
        out = np.zeros_like(lw)
        sel = cost.mask & reach
        if sel.any():
            out[sel] = barrier_log_root(lw[sel], epsilon, weight) - lw[sel]
        return out
    if isinstance(cost, Free):
        return np.zeros_like(lw)
    raise TypeError(f"unsupported cost {cost!r}")


def log_update_bimarginal(log_W, costs, epsilon, weight=1.0) -> np.ndarray:
    out = np.empty_like(np.asarray(log_W, dtype=float))
    for ell, (row, cost) in enumerate(zip(log_W, costs)):
        try:
            out[ell] = log_update_scaling(cost, row, epsilon, weight)
        except InfeasibleError as exc:
            raise InfeasibleError(f"species {ell + 1}: {exc}", cell=exc.cell, species=ell + 1) from exc
    return out


# -- residuals ---------------------------------------------------------------


def equality_residual(cost, marginal) -> float | None:
    """L1 violation of an equality cost, or None for soft costs."""
    if isinstance(cost, Fixed):
        return float(np.abs(marginal - cost.target).sum())
    if isinstance(cost, FixedOnSubset):
        return float(np.abs(marginal - cost.target)[cost.mask].sum())
    return None
