"""Estimator-style wrapper so the solver plugs into sklearn tooling (params, clone)."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .kernel import build_kernels
from .scenario import Problem, validate_problem
from .solver import SolveOptions, objective, solve


def check_problem(problem) -> Problem:
    """Validate ``problem`` (a Problem instance) and return it."""
    if not isinstance(problem, Problem):
        raise TypeError(f"expected a Problem, got {type(problem).__name__}")
    return validate_problem(problem)


class MultiSpeciesSinkhorn(BaseEstimator):
    """Generalized Sinkhorn solver with the fit/transform convention.

    ``fit(problem)`` solves the problem; ``transform(problem)`` returns the
    per-species densities ``(T + 1, L, N)`` of the fitted solution.

    Parameters
    ----------
    tol : float, default=1e-6
        Bound on equality residuals and on the largest log-scaling change.
    max_sweeps : int, default=5000
    log_domain : bool, default=False
        Run the recursions on logarithms (for small epsilon).
    record_every : int, default=1
    threads : int, default=1
        Worker threads for per-species kernel products.
    """

    def __init__(self, tol=1e-6, max_sweeps=5000, log_domain=False, record_every=1, threads=1):
        self.tol = tol
        self.max_sweeps = max_sweeps
        self.log_domain = log_domain
        self.record_every = record_every
        self.threads = threads

    def _options(self):
        return SolveOptions(
            tol=self.tol,
            max_sweeps=self.max_sweeps,
            log_domain=self.log_domain,
            record_every=self.record_every,
            threads=self.threads,
        )

    def fit(self, problem, y=None):
        problem = check_problem(problem)
        self.kernels_ = build_kernels(problem)
        self.solution_ = solve(problem, self._options(), kernels=self.kernels_)
        self.problem_ = problem
        self.converged_ = self.solution_.converged
        self.n_sweeps_ = self.solution_.sweeps_used
        return self

    def _check_fitted(self):
        if not hasattr(self, "solution_"):
            raise NotFittedError("call fit before using this estimator")

    def transform(self, problem=None):
        self._check_fitted()
        if problem is not None and problem != self.problem_:
            raise ValueError("transform only returns densities of the fitted problem")
        return np.array(self.solution_.species_marginals)

    def fit_transform(self, problem, y=None):
        return self.fit(problem).transform()

    def score(self, problem=None, y=None):
        """Negative primal objective (higher is better)."""
        self._check_fitted()
        return -objective(self.problem_, self.solution_, self.kernels_, include_constant=False)
