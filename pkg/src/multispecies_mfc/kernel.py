"""Movement stencils, one-step cost matrices and Gibbs kernels per species."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .scenario import Problem, SpeciesSpec, TerrainGrid


def build_stencil(species_or_radius_sq) -> list[tuple[int, int]]:
    """All integer offsets ``(ddx, ddy)`` with ``ddx**2 + ddy**2 <= radius_sq``."""
    r2 = getattr(species_or_radius_sq, "radius_sq", species_or_radius_sq)
    r2 = int(r2)
    if r2 < 0:
        raise ValueError(f"radius_sq must be >= 0, got {r2}")
    reach = int(np.floor(np.sqrt(r2)))
    return [
        (ddx, ddy)
        for ddy in range(-reach, reach + 1)
        for ddx in range(-reach, reach + 1)
        if ddx * ddx + ddy * ddy <= r2
    ]


@lru_cache(maxsize=None)
def supercover(ddx: int, ddy: int) -> tuple[tuple[int, int], ...]:
    """Cells touched by the segment from the center of (0, 0) to the center of (ddx, ddy).

    A cell is touched when its closed unit square meets the segment, so a
    segment through a corner touches all four cells sharing it. Computed
    exactly with rational clipping.
    """
    touched = []
    for cy in range(min(0, ddy), max(0, ddy) + 1):
        for cx in range(min(0, ddx), max(0, ddx) + 1):
            lo, hi = Fraction(0), Fraction(1)
            for d, c in ((ddx, cx), (ddy, cy)):
                a, b = Fraction(2 * c - 1, 2), Fraction(2 * c + 1, 2)
                if d == 0:
                    if not a <= 0 <= b:
                        lo, hi = Fraction(1), Fraction(0)
                    continue
                t0, t1 = sorted((a / d, b / d))
                lo, hi = max(lo, t0), min(hi, t1)
            if lo <= hi:
                touched.append((cx, cy))
    return tuple(touched)


def reachable(grid: TerrainGrid, species: SpeciesSpec, i: int, k: int) -> bool:
    """Whether ``species`` may move from cell ``i`` to ``k`` without jumping over forbidden cells."""
    allowed = species.allowed_mask(grid)
    r0, c0 = divmod(int(i), grid.width)
    r1, c1 = divmod(int(k), grid.width)
    for cx, cy in supercover(c1 - c0, r1 - r0):
        r, c = r0 + cy, c0 + cx
        if not (0 <= r < grid.height and 0 <= c < grid.width) or not allowed[r * grid.width + c]:
            return False
    return True


@dataclass(frozen=True)
class SparseCostMatrix:
    """Finite one-step costs; pairs not listed have infinite cost."""

    species_id: int
    n_cells: int
    source: np.ndarray
    target: np.ndarray
    cost: np.ndarray

    def to_dense(self) -> np.ndarray:
        out = np.full((self.n_cells, self.n_cells), np.inf)
        out[self.source, self.target] = self.cost
        return out


@dataclass(frozen=True)
class SparseKernel:
    """``exp(-C / epsilon)`` on the cost pattern, as CSR (``matrix[i, k]`` for i -> k)."""

    species_id: int
    matrix: sp.csr_matrix

    @property
    def nnz(self) -> int:
        return self.matrix.nnz


def _reachable_pairs(grid: TerrainGrid, species: SpeciesSpec):
    allowed = species.allowed_mask(grid).reshape(grid.height, grid.width)
    rows, cols = np.nonzero(allowed)
    src, dst = [], []
    for ddx, ddy in build_stencil(species):
        ok = np.ones(rows.size, dtype=bool)
        for cx, cy in supercover(ddx, ddy):
            r, c = rows + cy, cols + cx
            inside = (r >= 0) & (r < grid.height) & (c >= 0) & (c < grid.width)
            ok &= inside
            ok[inside] &= allowed[r[inside], c[inside]]
        src.append((rows * grid.width + cols)[ok])
        dst.append(((rows + ddy) * grid.width + cols + ddx)[ok])
    src = np.concatenate(src) if src else np.zeros(0, np.int64)
    dst = np.concatenate(dst) if dst else np.zeros(0, np.int64)
    order = np.lexsort((dst, src))
    return src[order].astype(np.int64), dst[order].astype(np.int64)


def build_cost_matrix(grid: TerrainGrid, species: SpeciesSpec) -> SparseCostMatrix:
    """Quadratic cost ``alpha * |x_i - x_k|^2`` on every reachable stencil move."""
    src, dst = _reachable_pairs(grid, species)
    xy = grid.coordinates()
    diff = xy[src] - xy[dst]
    cost = species.alpha * np.einsum("ij,ij->i", diff, diff)
    return SparseCostMatrix(species.id, grid.n_cells, src, dst, cost)


def build_kernel(cost: SparseCostMatrix, epsilon: float) -> SparseKernel:
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    values = np.exp(-cost.cost / epsilon)
    mat = sp.csr_matrix((values, (cost.source, cost.target)), shape=(cost.n_cells, cost.n_cells))
    mat.sum_duplicates()
    mat.sort_indices()
    return SparseKernel(cost.species_id, mat)


class KernelSequence:
    """Per-step, per-species kernels used by the message recursions.

    ``step(j)`` returns the ``L`` kernels for the transition ``j -> j + 1``.
    A static problem stores one list shared by every step. Log-kernels
    (``-C / epsilon`` on the same pattern) are kept as well for the
    log-domain path.
    """

    def __init__(self, steps, horizon: int):
        steps = [list(s) for s in steps]
        if len(steps) not in (1, horizon):
            raise ValueError(f"need 1 or {horizon} kernel steps, got {len(steps)}")
        self.horizon = horizon
        self._steps = [[_as_csr(k) for k in s] for s in steps]
        self._steps_t = [[k.T.tocsr() for k in s] for s in self._steps]
        for s in self._steps_t:
            for k in s:
                k.sort_indices()
        self._log = None
        self._log_t = None
        self.applications = 0

    @property
    def time_varying(self) -> bool:
        return len(self._steps) > 1

    @property
    def n_species(self) -> int:
        return len(self._steps[0])

    @property
    def n_cells(self) -> int:
        return self._steps[0][0].shape[0]

    def step(self, j: int) -> list[sp.csr_matrix]:
        return self._steps[j if self.time_varying else 0]

    def step_transposed(self, j: int) -> list[sp.csr_matrix]:
        return self._steps_t[j if self.time_varying else 0]

    def _logs(self, mats):
        out = []
        for m in mats:
            lm = m.copy()
            lm.data = np.log(lm.data)
            out.append(lm)
        return out

    def log_step(self, j: int) -> list[sp.csr_matrix]:
        if self._log is None:
            self._log = [self._logs(s) for s in self._steps]
        return self._log[j if self.time_varying else 0]

    def log_step_transposed(self, j: int) -> list[sp.csr_matrix]:
        if self._log_t is None:
            self._log_t = [self._logs(s) for s in self._steps_t]
        return self._log_t[j if self.time_varying else 0]

    def dense(self, j: int) -> np.ndarray:
        """Kernels at step ``j`` as an ``(L, N, N)`` array."""
        return np.stack([k.toarray() for k in self.step(j)])


def _as_csr(k) -> sp.csr_matrix:
    if isinstance(k, SparseKernel):
        k = k.matrix
    if sp.issparse(k):
        m = sp.csr_matrix(k, dtype=float)
    else:
        m = sp.csr_matrix(np.asarray(k, dtype=float))
    m.eliminate_zeros()
    m.sort_indices()
    if (m.data < 0).any() or not np.all(np.isfinite(m.data)):
        raise ValueError("kernel entries must be finite and nonnegative")
    return m


def species_cost_matrices(problem: Problem, species: SpeciesSpec) -> list[SparseCostMatrix]:
    """Cost matrices for one species: one shared matrix, or one per step."""
    if species.custom_cost is None:
        return [build_cost_matrix(problem.grid, species)]
    return [SparseCostMatrix(species.id, problem.n_cells, s, t, v) for s, t, v in species.custom_cost]


def build_kernels(problem: Problem) -> KernelSequence:
    """Kernels for every species of ``problem``, time-varying if any species is."""
    per_species = []
    for s in problem.species:
        per_species.append([build_kernel(c, problem.epsilon) for c in species_cost_matrices(problem, s)])
    n_steps = max(len(k) for k in per_species)
    steps = [[k[j] if len(k) > 1 else k[0] for k in per_species] for j in range(n_steps)]
    return KernelSequence(steps, problem.horizon)


def write_coo_csv(path, matrix) -> None:
    """Export a cost matrix or kernel as ``i,k,value`` lines."""
    if isinstance(matrix, SparseCostMatrix):
        triples = zip(matrix.source, matrix.target, matrix.cost)
    else:
        m = (matrix.matrix if isinstance(matrix, SparseKernel) else matrix).tocoo()
        triples = zip(m.row, m.col, m.data)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        fh.write("# i,k,value\n")
        for i, k, v in triples:
            writer.writerow([int(i), int(k), repr(float(v))])
