import dataclasses
import math

import numpy as np
import pytest

from multispecies_mfc.kernel import (
    KernelSequence,
    build_cost_matrix,
    build_kernel,
    build_kernels,
    build_stencil,
    reachable,
    supercover,
    write_coo_csv,
)
from multispecies_mfc.scenario import SpeciesSpec, TerrainGrid, generate_paper_example, read_coo_csv


def species(sid=3, terrains="n", radius_sq=9, alpha=100.0, n=1):
    return SpeciesSpec(sid, frozenset(terrains), radius_sq, alpha, 0.0, np.full(n, np.inf), 0.0, np.zeros(n))


def test_stencil_sizes():
    s6 = build_stencil(6)
    assert len(s6) == 21
    assert not {(2, 2), (-2, 2), (2, -2), (-2, -2)} & set(s6)
    s9 = build_stencil(9)
    assert len(s9) == 29
    assert {(3, 0), (-3, 0), (0, 3), (0, -3), (2, 2)} <= set(s9)
    assert build_stencil(0) == [(0, 0)]
    with pytest.raises(ValueError):
        build_stencil(-1)


def sampled_supercover(ddx, ddy, samples=1000):
    # cells whose closed square contains a sampled segment point (within a hair of the border)
    out = set()
    for t in np.linspace(0.0, 1.0, samples + 1):
        x, y = t * ddx, t * ddy
        for cx in range(math.floor(x - 0.5 - 1e-9), math.floor(x + 0.5 + 1e-9) + 1):
            for cy in range(math.floor(y - 0.5 - 1e-9), math.floor(y + 0.5 + 1e-9) + 1):
                if abs(x - cx) <= 0.5 + 1e-9 and abs(y - cy) <= 0.5 + 1e-9:
                    out.add((cx, cy))
    return out


@pytest.mark.parametrize("offset", build_stencil(9))
def test_supercover_matches_sampled_rasterization(offset):
    exact = set(supercover(*offset))
    sampled = sampled_supercover(*offset)
    # sampling can only miss touches; every sampled cell must be exact
    assert sampled <= exact
    # for stencil offsets 1000 samples are fine enough to see every touch
    assert exact == sampled


def test_supercover_corner_touch():
    assert set(supercover(1, 1)) == {(0, 0), (1, 0), (0, 1), (1, 1)}
    assert set(supercover(2, 0)) == {(0, 0), (1, 0), (2, 0)}
    assert supercover(0, 0) == ((0, 0),)


def test_reachability_rules():
    # row 0: n w n ; species 3 lives on normal terrain only
    grid = TerrainGrid(3, 1, np.array(list("nwn")))
    s = species(n=3)
    assert reachable(grid, s, 0, 0)
    assert not reachable(grid, s, 0, 2)
    amphibious = species(1, "nw", 6, n=3)
    assert reachable(grid, amphibious, 0, 2)


def test_diagonal_corridor():
    # a one-cell-wide diagonal corridor of normal cells in water
    rows = ["nwww", "wnww", "wwnw", "wwwn"]
    grid = TerrainGrid(4, 4, np.array(list("".join(rows))))
    s = species(n=16)
    # (0,0) -> (2,2) passes exactly through the corner shared with (1,0) and (0,1)
    assert not reachable(grid, s, 0, 10)
    assert set(supercover(2, 2)) >= {(1, 0), (0, 1)}
    open_grid = TerrainGrid(4, 4, np.array(["n"] * 16))
    assert reachable(open_grid, s, 0, 10)


def test_cost_values_at_full_scale_spacing():
    grid = TerrainGrid(100, 100, np.array(["n"] * 10000))
    dx = 2 / 99
    assert grid.dx == pytest.approx(dx, rel=1e-15)
    c400 = build_cost_matrix(grid, species(1, "n", 6, 400.0, 10000)).to_dense()
    c100 = build_cost_matrix(grid, species(3, "n", 9, 100.0, 10000)).to_dense()
    i = 50 * 100 + 50
    assert c400[i, i + 101] == pytest.approx(0.326497, abs=5e-7)
    assert c400[i, i + 101] == pytest.approx(400 * 2 * dx**2, rel=1e-14)
    assert c400[i, i] == 0.0
    assert c100[i, i + 3] == pytest.approx(0.367309, abs=5e-7)
    assert np.isinf(c400[i, i + 202])


def test_kernel_values_and_structure():
    grid = TerrainGrid(100, 100, np.array(["n"] * 10000))
    cost = build_cost_matrix(grid, species(1, "n", 6, 400.0, 10000))
    K = build_kernel(cost, 0.2).matrix
    i = 50 * 100 + 50
    assert K[i, i] == 1.0
    assert K[i, i + 101] == pytest.approx(math.exp(-400 * 2 * (2 / 99) ** 2 / 0.2), rel=1e-14)
    assert K[i, i + 101] == pytest.approx(0.195443, abs=5e-7)
    assert K[i, i + 202] == 0.0 and (i, i + 202) not in set(zip(*K.nonzero()))
    assert abs(K - K.T).max() == 0.0
    with pytest.raises(ValueError):
        build_kernel(cost, 0.0)


def test_robot_kernels_respect_terrain(desk_problem, desk_kernels):
    g = desk_problem.grid
    for s, K in zip(desk_problem.species, desk_kernels.step(0)):
        allowed = s.allowed_mask(g)
        rows, cols = K.nonzero()
        assert allowed[rows].all() and allowed[cols].all()
        assert np.all(K.diagonal()[allowed] == 1.0)
        assert (K != K.T).nnz == 0
    assert not desk_kernels.time_varying


def test_time_varying_sequence():
    a = np.eye(2)
    b = np.array([[1.0, 0.5], [0.0, 1.0]])
    seq = KernelSequence([[a], [b], [a]], 3)
    assert seq.time_varying
    assert np.array_equal(seq.dense(1)[0], b)
    assert np.array_equal(seq.step_transposed(1)[0].toarray(), b.T)
    assert np.allclose(np.exp(seq.log_step(1)[0].data), seq.step(1)[0].data)
    with pytest.raises(ValueError):
        KernelSequence([[a], [b]], 3)
    with pytest.raises(ValueError):
        KernelSequence([[-a]], 1)


def test_custom_costs_build_time_varying_kernels():
    p = generate_paper_example(10, 2)
    base = p.species[0]
    steps = (
        (np.array([0, 0]), np.array([0, 1]), np.array([0.0, 0.2])),
        (np.array([1]), np.array([1]), np.array([0.4])),
    )
    custom = SpeciesSpec(base.id, base.allowed_terrains, base.radius_sq, base.alpha, base.deploy_cost,
                         base.capacity, base.initial_mass, base.initial_distribution, custom_cost=steps)
    p = dataclasses.replace(p, species=(custom,) + p.species[1:])
    seq = build_kernels(p)
    assert seq.time_varying
    assert seq.step(0)[0][0, 1] == pytest.approx(math.exp(-1.0), rel=1e-15)
    assert seq.step(1)[0].nnz == 1 and seq.step(1)[0][1, 1] == pytest.approx(math.exp(-2.0), rel=1e-15)
    assert (seq.step(0)[1] != seq.step(1)[1]).nnz == 0


def test_coo_export(tmp_path, desk_kernels):
    K = desk_kernels.step(0)[2]
    write_coo_csv(tmp_path / "k.csv", K)
    src, dst, val = read_coo_csv(tmp_path / "k.csv")
    coo = K.tocoo()
    assert np.array_equal(src, coo.row) and np.array_equal(dst, coo.col) and np.array_equal(val, coo.data)
