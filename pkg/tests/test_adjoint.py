import numpy as np
import pytest

from spde_smp.adjoint import (Multipliers, RegressionSpec, Regressor, adjoint_apriori,
                              adjoint_dependence, duality_check, solve_adjoint)
from spde_smp.errors import ConfigurationError, PreconditionError
from spde_smp.forward import simulate_forward
from spde_smp.gelfand import heat_space, make_heat_pair
from spde_smp.noise import MarkSpace, TimeGrid, sample_noise
from spde_smp.oracles import continuous_feedback_adjoint, deterministic_adjoint_ode
from spde_smp.problem import ControlProcess, make_lq_problem, random_lq_problem

MULT = Multipliers(0.8, 0.6)


def _probe(grid, m=1, scale=0.3):
    t = grid.times[:-1]
    return ControlProcess(scale * np.cos(np.pi * (np.arange(m)[None] + 1) * t[:, None]), grid.dt)


@pytest.fixture(scope="module")
def lq_run(small_lq, small_noise):
    space, pair, spec, grid, ms = small_lq
    u = _probe(grid)
    paths = simulate_forward(spec, pair, space, u, small_noise)
    return space, pair, spec, grid, ms, u, paths, solve_adjoint(spec, pair, space, paths, u, MULT)


def test_terminal_condition_exact(lq_run):
    *_, spec, grid, ms, u, paths, adj = lq_run
    xn = paths.states[:, -1]
    expected = 0.8 * spec.terminal_cost_x(xn) + 0.6 * spec.constraint_x(xn)
    assert np.array_equal(adj.p[:, -1], expected)


def test_zero_data_gives_zero_adjoint(lq_run):
    space, pair, spec, grid, ms, u, paths, _ = lq_run
    quiet = spec.with_overrides(running_cost_x=lambda t, x, u: np.zeros(np.shape(x)))
    adj = solve_adjoint(quiet, pair, space, paths, u, Multipliers(0.0, 0.0))
    for a in (adj.p, adj.q, adj.r):
        assert np.all(a == 0.0)


def _deterministic(n_steps):
    space = heat_space(3, 0.2)
    pair = make_heat_pair(space, 0.2)
    spec = make_lq_problem(space, pair, control_dim=1, initial_state=[1.0, -0.5, 0.25],
                           drift_x=np.array([[0.1, 0.2, 0.0], [0.0, -0.1, 0.3], [0.2, 0.0, 0.1]]),
                           control_loading=[[1.0], [0.5], [0.25]], state_weight=np.eye(3),
                           terminal_weight=np.eye(3), constraint_vector=[1.0, 0.5, 0.3])
    return space, pair, spec, TimeGrid(1.0, n_steps)


def test_deterministic_case_matches_ode_at_first_order():
    errs = []
    for n in (50, 100, 200):
        space, pair, spec, grid = _deterministic(n)
        u = _probe(grid)
        noise = sample_noise(grid, MarkSpace.empty(), 4, 0)
        paths = simulate_forward(spec, pair, space, u, noise)
        adj = solve_adjoint(spec, pair, space, paths, u, MULT)
        assert np.all(adj.q == 0.0) and adj.r.size == 0
        _, p_ode = deterministic_adjoint_ode(spec, pair, grid, u, MULT.lam, MULT.mu)
        errs.append(np.max(np.abs(adj.p - p_ode[None])) / np.max(np.abs(p_ode)))
    assert errs[-1] < 1e-2
    assert 1.6 <= errs[0] / errs[1] <= 2.4 and 1.6 <= errs[1] / errs[2] <= 2.4


def test_lq_adjoint_matches_riccati_feedback():
    from spde_smp.config import build
    from spde_smp.fixtures import fixture
    s = build(fixture("lq_constrained"), n_paths=4000)
    u = _probe(s.grid, 2, 0.2)
    noise = sample_noise(s.grid, s.markspace, 4000, 5)
    paths = simulate_forward(s.spec, s.pair, s.space, u, noise)
    adj = solve_adjoint(s.spec, s.pair, s.space, paths, u, MULT)
    ref = continuous_feedback_adjoint(s.spec, s.pair, s.grid, s.markspace, u,
                                      MULT.lam, MULT.mu).evaluate(paths.states)
    rel = np.sqrt(np.sum((adj.p - ref) ** 2) / np.sum(ref ** 2))
    assert rel <= 0.05


def test_regression_degree_two_changes_little(lq_run):
    space, pair, spec, grid, ms, u, paths, adj = lq_run
    adj2 = solve_adjoint(spec, pair, space, paths, u, MULT, RegressionSpec(degree=2))
    rel = np.sqrt(np.sum((adj2.p - adj.p) ** 2) / np.sum(adj.p ** 2))
    assert rel <= 0.01


def test_duality_identical_controls_is_exactly_zero(lq_run):
    space, pair, spec, grid, ms, u, paths, adj = lq_run
    rep = duality_check(spec, pair, paths, paths, adj, u, u)
    assert (rep.lhs, rep.rhs, rep.gap) == (0.0, 0.0, 0.0)


def test_duality_vanishing_adjoint(lq_run):
    space, pair, spec, grid, ms, u, paths, _ = lq_run
    quiet = spec.with_overrides(running_cost_x=lambda t, x, u: np.zeros(np.shape(x)),
                                running_cost=lambda t, x, u: np.zeros(np.shape(x)[:-1]))
    adj = solve_adjoint(quiet, pair, space, paths, u, Multipliers(0.0, 0.0))
    v = u.with_values(u.values + 0.01)
    pb = simulate_forward(quiet, pair, space, v, paths.noise)
    rep = duality_check(quiet, pair, paths, pb, adj, u, v)
    assert rep.lhs == 0.0 and rep.rhs == 0.0


def test_duality_small_perturbation(lq_run):
    space, pair, spec, grid, ms, u, paths, adj = lq_run
    rng = np.random.default_rng(0)
    v = u.with_values(u.values + 1e-2 * rng.standard_normal(u.values.shape))
    pb = simulate_forward(spec, pair, space, v, paths.noise)
    rep = duality_check(spec, pair, paths, pb, adj, u, v)
    assert rep.passed
    assert abs(rep.gap) <= max(3 * rep.stderr, rep.allowance)
    assert rep.scale > 0


def test_duality_requires_common_noise(lq_run):
    space, pair, spec, grid, ms, u, paths, adj = lq_run
    other = simulate_forward(spec, pair, space, u, sample_noise(grid, ms, paths.n_paths, 999))
    with pytest.raises(PreconditionError):
        duality_check(spec, pair, paths, other, adj, u, u)


def test_adjoint_estimates_stable(lq_run):
    space, pair, spec, grid, ms, u, paths, adj = lq_run
    ratio = adjoint_apriori(spec, adj, paths, u)["ratio"]
    assert np.isfinite(ratio) and ratio > 0
    dep = adjoint_dependence(spec, pair, space, paths, u, MULT, np.array([1.0, 0.0, -1.0]))
    assert max(dep["ratios"]) / min(dep["ratios"]) <= 10


def test_apriori_constant_across_instances(small_lq):
    space, pair, _, grid, ms = small_lq
    ratios = []
    for seed in range(10):
        spec = random_lq_problem(space, pair, 1, 2, seed)
        u = _probe(grid)
        noise = sample_noise(grid, ms, 1000, seed)
        paths = simulate_forward(spec, pair, space, u, noise)
        adj = solve_adjoint(spec, pair, space, paths, u, MULT)
        ratios.append(adjoint_apriori(spec, adj, paths, u)["ratio"])
    assert max(ratios) / min(ratios) <= 10


def test_rank_deficient_design_is_flagged():
    rng = np.random.default_rng(0)
    a = rng.standard_normal(500)
    x = np.stack([a, a, rng.standard_normal(500)], axis=1)
    reg = Regressor(x, RegressionSpec(1))
    y = (2 * a)[:, None]
    fit = reg.fit(y)
    assert reg.warning is not None
    assert np.allclose(fit, y, atol=1e-6)


def test_adjoint_solve_surfaces_regression_warnings(lq_setup):
    """Eight modes driven by three noise sources: the first steps are rank deficient."""
    s = lq_setup
    noise = sample_noise(s.grid, s.markspace, 500, 1)
    paths = simulate_forward(s.spec, s.pair, s.space, s.initial_control, noise)
    with pytest.warns(RuntimeWarning, match="ridge-regularised"):
        adj = solve_adjoint(s.spec, s.pair, s.space, paths, s.initial_control, MULT)
    assert adj.warnings and adj.warnings[0].startswith("step ")


def test_regression_preserves_sample_mean():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((300, 2))
    y = rng.standard_normal((300, 3)) + x @ np.ones((2, 3))
    for deg in (0, 1, 2):
        fit = Regressor(x, RegressionSpec(deg)).fit(y)
        assert np.allclose(fit.mean(axis=0), y.mean(axis=0), rtol=0, atol=1e-12)


def test_bad_regression_degree():
    with pytest.raises(ConfigurationError):
        RegressionSpec(degree=3)
