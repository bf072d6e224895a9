import numpy as np
import pytest

from spde_smp._parallel import mean_and_stderr
from spde_smp.errors import ConfigurationError, DivergenceError, NumericalError
from spde_smp.forward import (apriori_check, evaluate_cost, forward_dependence, per_path_costs,
                              simulate_forward)
from spde_smp.gelfand import GalerkinSpace, OperatorPair, heat_space, make_heat_pair
from spde_smp.noise import MarkSpace, TimeGrid, sample_noise
from spde_smp.problem import ControlProcess, make_lq_problem, random_lq_problem, zero_problem

MS = MarkSpace(np.array([0.5, 1.0]), np.array([1.0, 2.0]))


def _zero_ctrl(grid, m):
    return ControlProcess(np.zeros((grid.n_steps, m)), grid.dt)


def test_nothing_moves():
    n, grid = 3, TimeGrid(1.0, 25)
    space = GalerkinSpace.euclidean(n)
    pair = OperatorPair(np.zeros((n, n)), np.zeros((n, n)))
    spec = zero_problem(n, 1, 2).with_overrides(initial_state=np.array([0.5, -1.0, 2.0]))
    paths = simulate_forward(spec, pair, space, _zero_ctrl(grid, 1), sample_noise(grid, MS, 64, 1))
    assert np.all(paths.states == spec.initial_state)


def test_heat_mode_decay():
    space = heat_space(4, 1.0)
    pair = make_heat_pair(space, 1.0)
    grid = TimeGrid(0.1, 100)
    spec = zero_problem(4, 1).with_overrides(initial_state=np.eye(4)[0])
    paths = simulate_forward(spec, pair, space, _zero_ctrl(grid, 1),
                             sample_noise(grid, MarkSpace.empty(), 3, 0))
    x1 = paths.states[:, -1, 0]
    scheme = (1 + grid.dt * np.pi ** 2) ** -grid.n_steps
    assert np.all(np.abs(x1 - scheme) <= 1e-12)
    exact = np.exp(-np.pi ** 2 * 0.1)
    assert exact == pytest.approx(0.37271, abs=1e-5)
    # first-order gap: leading term 0.5 (pi^2)^2 T dt e^{-pi^2 T}
    lead = 0.5 * np.pi ** 4 * 0.1 * grid.dt * exact
    assert abs(x1[0] - exact) <= 2 * lead
    assert np.all(paths.states[:, :, 1:] == 0.0)


def test_compensated_jumps_keep_the_mean():
    n, grid = 2, TimeGrid(1.0, 50)
    space = GalerkinSpace.euclidean(n)
    pair = OperatorPair(np.zeros((n, n)), np.zeros((n, n)))
    x0 = np.array([1.0, -2.0])
    spec = make_lq_problem(space, pair, control_dim=1, n_marks=2, initial_state=x0,
                           jump0=[[0.3, 0.1], [-0.2, 0.4]])
    paths = simulate_forward(spec, pair, space, _zero_ctrl(grid, 1),
                             sample_noise(grid, MS, 10_000, 31))
    for i in range(n):
        mean, se = mean_and_stderr(paths.states[:, -1, i])
        assert abs(mean - x0[i]) <= 3 * se


def test_cost_of_trivial_integrands():
    n, grid = 2, TimeGrid(1.7, 30)
    space = heat_space(n, 0.3)
    pair = make_heat_pair(space, 0.3)
    spec = random_lq_problem(space, pair, 1, 2, 0)
    noise = sample_noise(grid, MS, 500, 4)
    ctrl = _zero_ctrl(grid, 1)
    zero = spec.with_overrides(running_cost=lambda t, x, u: np.zeros(np.shape(x)[:-1]),
                               terminal_cost=lambda x: np.zeros(np.shape(x)[:-1]))
    paths = simulate_forward(zero, pair, space, ctrl, noise)
    assert evaluate_cost(zero, paths, ctrl).J == 0.0
    unit = zero.with_overrides(running_cost=lambda t, x, u: np.ones(np.shape(x)[:-1]))
    rep = evaluate_cost(unit, paths, ctrl)
    assert rep.J == pytest.approx(1.7, rel=1e-14)
    assert rep.J_stderr == 0.0


def test_cost_recomputed_from_persisted_paths(small_lq, small_noise, tmp_path):
    space, pair, spec, grid, _ = small_lq
    ctrl = ControlProcess(np.full((grid.n_steps, 1), 0.3), grid.dt)
    paths = simulate_forward(spec, pair, space, ctrl, small_noise)
    rep = evaluate_cost(spec, paths, ctrl)
    np.save(tmp_path / "x.npy", paths.states)
    x = np.load(tmp_path / "x.npy")
    q, r, f = np.eye(3), np.eye(1), np.eye(3)
    c = np.array([1.0, 0.5, 1 / 3])
    per_path = np.zeros(x.shape[0])
    for k in range(grid.n_steps):
        xk = x[:, k]
        per_path += grid.dt * 0.5 * (np.einsum("pi,ij,pj->p", xk, q, xk) + 0.3 * 0.3 * r[0, 0])
    per_path += 0.5 * np.einsum("pi,ij,pj->p", x[:, -1], f, x[:, -1])
    assert rep.J == pytest.approx(np.mean(per_path), rel=1e-12)
    assert rep.constraint_value == pytest.approx(np.mean(x[:, -1] @ c), rel=1e-12, abs=1e-14)
    cost, _ = per_path_costs(spec, paths, ctrl)
    assert np.allclose(cost, per_path, rtol=1e-12, atol=0)


def test_bit_identical_across_threads(small_lq, monkeypatch):
    space, pair, spec, grid, ms = small_lq
    ctrl = ControlProcess(np.full((grid.n_steps, 1), -0.2), grid.dt)
    out = []
    for threads in ("1", "3"):
        monkeypatch.setenv("SPDE_SMP_THREADS", threads)
        noise = sample_noise(grid, ms, 5000, 8)
        paths = simulate_forward(spec, pair, space, ctrl, noise)
        out.append((paths.states.tobytes(), evaluate_cost(spec, paths, ctrl).to_dict()))
    assert out[0] == out[1]


def test_singular_step_reports_index():
    n, grid = 2, TimeGrid(1.0, 10)
    a = np.stack([np.zeros((n, n))] * 10)
    a[4] = np.eye(n) / grid.dt        # I - dt A = 0
    space = GalerkinSpace.euclidean(n)
    pair = OperatorPair(a, np.zeros((10, n, n)))
    with pytest.raises(NumericalError) as exc:
        simulate_forward(zero_problem(n, 1), pair, space, _zero_ctrl(grid, 1),
                         sample_noise(grid, MarkSpace.empty(), 4, 0))
    assert exc.value.step == 4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_path_and_step():
    n, grid = 1, TimeGrid(1.0, 200)
    space = GalerkinSpace.euclidean(n)
    pair = OperatorPair(np.zeros((1, 1)), np.zeros((1, 1)))
    spec = make_lq_problem(space, pair, control_dim=1, initial_state=[1.0], drift_x=[[5e5]])
    with pytest.raises(DivergenceError) as exc:
        simulate_forward(spec, pair, space, _zero_ctrl(grid, 1),
                         sample_noise(grid, MarkSpace.empty(), 3, 0))
    assert exc.value.path == 0 and exc.value.step > 0


def test_grid_mismatch_rejected(small_lq, small_noise):
    space, pair, spec, grid, _ = small_lq
    with pytest.raises(ConfigurationError):
        simulate_forward(spec, pair, space, ControlProcess(np.zeros((grid.n_steps + 1, 1)), grid.dt),
                         small_noise)


def test_apriori_zero_and_vacuous():
    n, grid = 2, TimeGrid(1.0, 10)
    space = GalerkinSpace.euclidean(n)
    pair = OperatorPair(np.zeros((n, n)), np.zeros((n, n)))
    spec = zero_problem(n, 1)
    noise = sample_noise(grid, MarkSpace.empty(), 8, 0)
    rep = apriori_check(simulate_forward(spec, pair, space, _zero_ctrl(grid, 1), noise), spec, space)
    assert (rep.lhs, rep.rhs, rep.ratio, rep.vacuous) == (0.0, 0.0, 0.0, False)


def test_apriori_constant_is_stable_in_dt():
    space = heat_space(4, 0.5)
    pair = make_heat_pair(space, 0.5)
    spec = make_lq_problem(space, pair, control_dim=1, initial_state=[1.0, 0.5, 0.0, 0.0],
                           drift0=[1.0, 1.0, 1.0, 1.0], diffusion0=[0.2, 0.1, 0.1, 0.1])
    ratios = []
    for n in (50, 100, 200):
        grid = TimeGrid(1.0, n)
        noise = sample_noise(grid, MarkSpace.empty(), 2000, 3)
        paths = simulate_forward(spec, pair, space, _zero_ctrl(grid, 1), noise)
        ratios.append(apriori_check(paths, spec, space).ratio)
    assert all(np.isfinite(ratios))
    assert max(ratios) / min(ratios) <= 1.2


def test_strong_order_pure_diffusion():
    n = 2
    space = GalerkinSpace.euclidean(n)
    pair = OperatorPair(-np.eye(n), 0.8 * np.eye(n))
    spec = make_lq_problem(space, pair, control_dim=1, initial_state=[1.0, -1.0],
                           diffusion_x=np.array([[0.0, 0.5], [0.5, 0.0]]))
    fine = TimeGrid(1.0, 256)
    noise = sample_noise(fine, MarkSpace.empty(), 2000, 17)
    ref = simulate_forward(spec, pair, space, _zero_ctrl(fine, 1), noise).states[:, -1]
    errs, dts = [], []
    for factor in (64, 32, 16):        # dt = 1/4, 1/8, 1/16; reference at dt/8 or finer
        c = noise.coarsen(factor)
        x = simulate_forward(spec, pair, space, _zero_ctrl(c.grid, 1), c).states[:, -1]
        errs.append(np.sqrt(np.mean(np.sum((x - ref) ** 2, axis=1))))
        dts.append(c.grid.dt)
    order = np.polyfit(np.log(dts), np.log(errs), 1)[0]
    assert order >= 0.4


def test_continuous_dependence_ratio_stable(small_lq, small_noise):
    space, pair, spec, grid, _ = small_lq
    ctrl = _zero_ctrl(grid, 1)
    dep = forward_dependence(spec, pair, space, ctrl, small_noise, np.array([1.0, -1.0, 0.5]))
    r = dep["ratios"]
    assert all(np.isfinite(r)) and max(r) / min(r) <= 10
