import numpy as np
import pytest

from spde_smp.config import build
from spde_smp.fixtures import fixture
from spde_smp.gelfand import GalerkinSpace, OperatorPair, heat_space, make_heat_pair
from spde_smp.noise import MarkSpace, TimeGrid, sample_noise
from spde_smp.problem import ControlSet, make_lq_problem


@pytest.fixture(scope="session")
def lq_setup():
    """Default constrained LQ fixture at reduced path count."""
    return build(fixture("lq_constrained"), n_paths=2000)


@pytest.fixture(scope="session")
def small_lq():
    """Three modes, one control, two marks: cheap enough for per-test sweeps."""
    space = heat_space(3, 0.05)
    pair = make_heat_pair(space, 0.05)
    rng = np.random.default_rng(11)
    ms = MarkSpace(np.array([0.5, 1.0]), np.array([1.0, 2.0]))
    spec = make_lq_problem(
        space, pair, control_dim=1, n_marks=2,
        initial_state=[1.0, -0.5, 0.25],
        drift_x=0.3 * rng.uniform(-1, 1, (3, 3)),
        control_loading=[[1.0], [0.5], [0.25]],
        diffusion0=[0.1, 0.05, 0.02],
        diffusion_x=0.1 * np.eye(3),
        jump0=[[0.05, 0.0, 0.0], [0.0, -0.05, 0.0]],
        jump_x=0.05 * np.stack([np.eye(3), -np.eye(3)]),
        state_weight=np.eye(3), control_weight=np.eye(1), terminal_weight=np.eye(3),
        constraint_vector=[1.0, 0.5, 1 / 3], target=0.0,
        control_set=ControlSet.box(1, 5.0))
    grid = TimeGrid(1.0, 20)
    return space, pair, spec, grid, ms


@pytest.fixture(scope="session")
def small_noise(small_lq):
    _, _, _, grid, ms = small_lq
    return sample_noise(grid, ms, 4000, 123)


def euclid_pair(a, b=None):
    a = np.asarray(a, dtype=float)
    return GalerkinSpace.euclidean(a.shape[0]), OperatorPair(a, np.zeros_like(a) if b is None else b)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(LINES):
            terminalreporter.write_line(LINES[k])
