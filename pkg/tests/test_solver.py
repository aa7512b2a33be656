import numpy as np
import pytest
from sklearn.base import clone

from instances import line_grid, random_feasible_problem, random_kernels
from multispecies_mfc.estimator import MultiSpeciesSinkhorn, check_problem
from multispecies_mfc.kernel import KernelSequence
from multispecies_mfc.oracle import dense_dual, dense_objective, dense_solve
from multispecies_mfc.propagation import ScalingState, messages, pair_projection
from multispecies_mfc.scenario import Fixed, Free, Problem, SpeciesSpec, make_problem
from multispecies_mfc.solver import (
    SolveOptions,
    dual_objective,
    initial_state,
    objective,
    solve,
    sweep,
)
from multispecies_mfc.updates import InfeasibleError
from sklearn.exceptions import NotFittedError


def spec(mu0, sid=1):
    n = mu0.size
    return SpeciesSpec(sid, frozenset("n"), 1, 1.0, 0.0, np.full(n, np.inf), float(mu0.sum()), mu0)


def sinkhorn_plan(K, a, b, iters=20000):
    u, v = np.ones_like(a), np.ones_like(b)
    for _ in range(iters):
        u = a / (K @ v)
        v = b / (K.T @ u)
    return u[:, None] * K * v[None, :]


def test_free_problem_sweep_is_noop():
    rng = np.random.default_rng(0)
    N, T = 4, 3
    _, kernels = random_kernels(rng, 1, N, T)
    # an initial distribution reproduced by the all-ones state: the row factor of U0 = 1
    from multispecies_mfc.propagation import backward_pass

    ones = ScalingState.ones(T, 1, N)
    mu0 = backward_pass(ones, kernels)[0][0]
    p = make_problem(line_grid(N), [spec(mu0)], T, 0.5)
    state = initial_state(p)
    rec = sweep(p, kernels, state)
    assert rec.residual == pytest.approx(0.0, abs=1e-15)
    assert np.allclose(state.U, 1.0, rtol=0, atol=1e-15) and np.array_equal(state.u, ones.u)


def test_infinite_tolerance_stops_after_one_sweep(desk_problem, desk_kernels):
    sol = solve(desk_problem, SolveOptions(tol=np.inf), kernels=desk_kernels)
    assert sol.converged and sol.sweeps_used == 1 and len(sol.residual_history) == 1


@pytest.mark.parametrize("seed", range(3))
def test_two_marginal_reduction_matches_sinkhorn(seed):
    rng = np.random.default_rng(seed)
    N = 4
    K = rng.uniform(0.1, 1.0, (N, N))
    a = rng.dirichlet(np.ones(N)) * 0.8
    b = rng.dirichlet(np.ones(N)) * 0.8
    p = make_problem(line_grid(N), [spec(a)], 1, 1.0, {1: Fixed(b)})
    kernels = KernelSequence([[K]], 1)
    sol = solve(p, SolveOptions(tol=1e-14, max_sweeps=20000), kernels=kernels)
    plan = pair_projection(0, sol.scalings, messages(sol.scalings, kernels), kernels)[0].toarray()
    ref = sinkhorn_plan(K, a, b)
    assert np.allclose(plan, ref, rtol=1e-10, atol=1e-14)
    assert np.allclose(sol.species_marginals[0][0], ref.sum(axis=1), rtol=1e-10, atol=0)
    assert np.allclose(sol.totals[1], ref.sum(axis=0), rtol=1e-10, atol=0)


def test_uniform_two_point_closed_form():
    # uniform kernel, two points: the entropic plan is the product of the marginals
    a, b = np.array([0.3, 0.1]), np.array([0.15, 0.25])
    p = make_problem(line_grid(2), [spec(a)], 1, 1.0, {1: Fixed(b)})
    kernels = KernelSequence([[np.ones((2, 2))]], 1)
    sol = solve(p, SolveOptions(tol=1e-14), kernels=kernels)
    plan = pair_projection(0, sol.scalings, messages(sol.scalings, kernels), kernels)[0].toarray()
    assert np.allclose(plan, np.outer(a, b) / a.sum(), rtol=1e-12, atol=0)


@pytest.mark.parametrize("seed", range(8))
def test_dual_ascends_and_matches_dense(seed):
    rng = np.random.default_rng(seed)
    equality = ("fixed", "subset", "free")
    p, steps, kernels = random_feasible_problem(rng, kinds=equality, row_kinds=equality)
    values = []
    solve(p, SolveOptions(tol=1e-12, max_sweeps=300), kernels=kernels,
          on_sweep=lambda k, s, h: values.append(dual_objective(p, s, kernels)))
    # each coordinate update maximizes the dual in its block
    assert (np.diff(values) >= -1e-10 * max(1.0, abs(values[-1]))).all()
    state = solve(p, SolveOptions(tol=1e-3), kernels=kernels).scalings
    assert dual_objective(p, state, kernels) == pytest.approx(dense_dual(p, state, steps), rel=1e-10, abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_objective_matches_dense(seed):
    rng = np.random.default_rng(seed)
    p, steps, kernels = random_feasible_problem(rng)
    sol = solve(p, SolveOptions(tol=1e-9, max_sweeps=500), kernels=kernels)
    assert objective(p, sol, kernels) == pytest.approx(dense_objective(p, sol, steps), rel=1e-10, abs=1e-10)


def test_zero_mass_objective():
    N, T = 3, 2
    # validation requires positive mass, so build the degenerate problem directly
    s = spec(np.zeros(N))
    p = Problem(line_grid(N), (s,), T, 0.5, (Free(),) * (T + 1), ((Fixed(np.zeros(N)),),) + ((Free(),),) * T)
    kernels = KernelSequence([[np.ones((N, N))]], T)
    sol = solve(p, kernels=kernels)
    assert not sol.totals.any()
    assert objective(p, sol, kernels, include_constant=False) == 0.0
    assert objective(p, sol, kernels) == pytest.approx(0.5 * N ** (T + 1), rel=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_structured_sweeps_follow_dense_sweeps(seed):
    rng = np.random.default_rng(seed)
    p, steps, kernels = random_feasible_problem(rng)
    fast, slow = [], []
    opts = SolveOptions(tol=1e-10, max_sweeps=40)
    solve(p, opts, kernels=kernels, on_sweep=lambda k, s, h: fast.append(s.copy()))
    dense_solve(p, opts, kernels=steps, on_sweep=lambda k, s, h: slow.append(s.copy()))
    assert len(fast) == len(slow)
    for a, b in zip(fast, slow):
        assert np.allclose(a.U, b.U, rtol=1e-10, atol=0) and np.allclose(a.u, b.u, rtol=1e-10, atol=0)


def test_converged_state_is_fixed_point(desk_problem, desk_kernels, desk_solution):
    assert desk_solution.converged
    state = desk_solution.scalings.copy()
    rec = sweep(desk_problem, desk_kernels, state)
    assert rec.log_change <= 1e-6 and rec.residual <= 1e-6


def test_robot_scenario_desk_scale(desk_problem, desk_solution):
    sol = desk_solution
    assert sol.final_residual <= 1e-6
    assert np.allclose(sol.species_marginals.sum(axis=2), 10.0, rtol=1e-8, atol=0)
    assert np.allclose(sol.totals.sum(axis=1), 30.0, rtol=1e-8, atol=0)
    g = desk_problem.grid
    cong = desk_problem.total_costs[1].mask
    assert sol.totals[1:-1][:, cong].max() <= 1 - 1e-9
    water, rough = g.class_mask("w"), g.class_mask("r")
    assert not sol.species_marginals[:, 1:, water].any()
    assert not sol.species_marginals[:, [0, 2]][:, :, rough].any()


def test_log_domain_matches_linear(desk_problem, desk_kernels, desk_solution):
    sol = solve(desk_problem, SolveOptions(log_domain=True, max_sweeps=desk_solution.sweeps_used), kernels=desk_kernels)
    assert sol.sweeps_used == desk_solution.sweeps_used
    assert np.allclose(sol.species_marginals, desk_solution.species_marginals, rtol=1e-8, atol=1e-12)


def test_threads_and_determinism():
    rng = np.random.default_rng(11)
    p, _, kernels = random_feasible_problem(rng, L=2, N=5, T=3)
    a = solve(p, SolveOptions(deterministic=True, max_sweeps=50), kernels=kernels)
    b = solve(p, SolveOptions(deterministic=True, max_sweeps=50), kernels=kernels)
    c = solve(p, SolveOptions(threads=3, max_sweeps=50), kernels=kernels)
    assert np.array_equal(a.scalings.U, b.scalings.U) and np.array_equal(a.scalings.u, b.scalings.u)
    assert np.allclose(a.species_marginals, c.species_marginals, rtol=1e-13, atol=0)


def test_resume_matches_uninterrupted():
    rng = np.random.default_rng(12)
    p, _, kernels = random_feasible_problem(rng, L=2, N=4, T=2)
    opts = SolveOptions(tol=1e-13, max_sweeps=60, deterministic=True)
    full = solve(p, opts, kernels=kernels)
    snap = {}
    solve(p, SolveOptions(tol=1e-13, max_sweeps=25, deterministic=True), kernels=kernels,
          on_sweep=lambda k, s, h: snap.update(state=s.copy(), history=list(h), k=k))
    assert snap["k"] == 25
    rest = solve(p, opts, kernels=kernels, state=snap["state"], history=snap["history"], start_sweep=snap["k"])
    assert np.array_equal(rest.species_marginals, full.species_marginals)
    assert [r.sweep for r in rest.residual_history] == [r.sweep for r in full.residual_history]


def test_infeasible_reports_sweep():
    N = 3
    K = np.eye(N)
    p = make_problem(line_grid(N), [spec(np.array([0.5, 0.0, 0.0]))], 1, 1.0, {1: Fixed(np.array([0.0, 0.5, 0.0]))})
    with pytest.raises(InfeasibleError) as info:
        solve(p, kernels=KernelSequence([[K]], 1))
    assert info.value.sweep == 1 and info.value.cell == 1


def test_options_validation():
    with pytest.raises(ValueError):
        SolveOptions(tol=0)
    with pytest.raises(ValueError):
        SolveOptions(max_sweeps=0)
    with pytest.raises(ValueError):
        SolveOptions(record_every=0)


def test_record_every():
    rng = np.random.default_rng(13)
    p, _, kernels = random_feasible_problem(rng)
    sol = solve(p, SolveOptions(tol=1e-300, max_sweeps=10, record_every=4), kernels=kernels)
    assert not sol.converged
    assert [r.sweep for r in sol.residual_history] == [4, 8, 10]


def test_estimator(desk_problem, desk_solution):
    est = MultiSpeciesSinkhorn(tol=1e-6)
    assert est.get_params()["tol"] == 1e-6
    twin = clone(est).set_params(max_sweeps=7)
    assert twin.max_sweeps == 7 and est.max_sweeps == 5000
    with pytest.raises(NotFittedError):
        est.transform()
    dens = est.fit_transform(desk_problem)
    assert est.converged_ and est.n_sweeps_ == desk_solution.sweeps_used
    assert np.array_equal(dens, desk_solution.species_marginals)
    assert np.isfinite(est.score())
    with pytest.raises(TypeError):
        check_problem({"grid": None})
