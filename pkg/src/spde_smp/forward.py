"""Monte-Carlo forward integration, cost evaluation and a priori monitors.

One step of the scheme, per path::

    (I - dt A_k) X_{k+1} = X_k + dt b_k + (B_k X_k + g_k) dW_k
                           + sum_i s_{k,i} (dN_{k,i} - nu_i dt)

with every coefficient taken at the left endpoint ``(t_k, X_k, u_k)``.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor

from ._parallel import chunked_map, mean_and_stderr, tree_mean
from .errors import ConfigurationError, DivergenceError, NumericalError
from .gelfand import GalerkinSpace, OperatorPair
from .noise import NoiseBundle, TimeGrid
from .problem import ControlProcess, ProblemSpec

SINGULAR_RCOND = 1e-14


@dataclass(frozen=True, eq=False)
class StatePath:
    states: np.ndarray          # (paths, steps + 1, N)
    grid: TimeGrid
    control: ControlProcess
    noise: NoiseBundle

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    def mean_states(self) -> np.ndarray:
        return np.stack([tree_mean(self.states[:, k]) for k in range(self.states.shape[1])])

    def stderr_states(self) -> np.ndarray:
        out = np.empty(self.states.shape[1:])
        for k in range(self.states.shape[1]):
            for j in range(self.dim):
                out[k, j] = mean_and_stderr(self.states[:, k, j])[1]
        return out


@dataclass(frozen=True)
class CostReport:
    J: float
    J_stderr: float
    constraint_value: float
    constraint_stderr: float
    per_path_cost: np.ndarray = None
    per_path_constraint: np.ndarray = None

    def to_dict(self) -> dict:
        return {"J": self.J, "J_stderr": self.J_stderr,
                "constraint_value": self.constraint_value,
                "constraint_stderr": self.constraint_stderr}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


class StepOperator:
    """``I - dt A_k`` per step, checked for singularity once.

    Solves go through ``numpy.linalg.solve``: scipy's ``lu_solve`` is not
    safe to call from several worker threads at once.
    """

    def __init__(self, pair: OperatorPair, grid: TimeGrid):
        pair.check_steps(grid.n_steps)
        self.pair = pair
        self.dt = grid.dt
        self._const = pair.linear_drift.ndim == 2
        self._cache = {}

    def factors(self, k: int) -> np.ndarray:
        """The step matrix; raises if it is numerically singular."""
        key = 0 if self._const else k
        if key not in self._cache:
            n = self.pair.dim
            mat = np.eye(n) - self.dt * self.pair.drift_at(k)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", LinAlgWarning)
                lu, _ = lu_factor(mat, check_finite=False)
            diag = np.abs(np.diag(lu))
            if diag.min() <= SINGULAR_RCOND * max(diag.max(), 1.0):
                raise NumericalError(f"I - dt*A is singular at step {k}", step=k)
            mat.setflags(write=False)
            self._cache[key] = (mat, np.ascontiguousarray(mat.T))
        return self._cache[key]

    def prepare(self, n_steps: int) -> None:
        """Check every step matrix up front (call before going parallel)."""
        for k in range(1 if self._const else n_steps):
            self.factors(k)

    def solve(self, k: int, rows: np.ndarray) -> np.ndarray:
        """Solve ``(I - dt A_k) x = rhs`` for each row of ``rows``."""
        return np.linalg.solve(self.factors(k)[0], rows.T).T

    def solve_transposed(self, k: int, rows: np.ndarray) -> np.ndarray:
        """Solve ``(I - dt A_k)^T y = rhs`` for each row of ``rows``."""
        return np.linalg.solve(self.factors(k)[1], rows.T).T


def check_inputs(spec: ProblemSpec, pair: OperatorPair, space: GalerkinSpace,
                 control: ControlProcess, noise: NoiseBundle) -> None:
    spec.check_compatible(pair, noise.markspace)
    if space.dim != spec.state_dim:
        raise ConfigurationError("space dimension differs from state dimension")
    if control.n_steps != noise.grid.n_steps:
        raise ConfigurationError(
            f"control has {control.n_steps} steps, noise grid has {noise.grid.n_steps}")
    if not np.isclose(control.dt, noise.grid.dt, rtol=1e-12, atol=0.0):
        raise ConfigurationError("control and noise use different step sizes")
    if control.dim != spec.control_dim:
        raise ConfigurationError(
            f"control dimension {control.dim} differs from problem's {spec.control_dim}")


def simulate_forward(spec: ProblemSpec, pair: OperatorPair, space: GalerkinSpace,
                     control: ControlProcess, noise: NoiseBundle,
                     drift_shift=None) -> StatePath:
    """Integrate every path of ``noise`` under ``control``.

    ``drift_shift``, if given, is added to the drift: either a constant
    N-vector or a callable ``(t, x) -> (..., N)``.  It exists for
    perturbation studies and is ``None`` in normal use.
    """
    check_inputs(spec, pair, space, control, noise)
    grid = noise.grid
    n, dim = grid.n_steps, spec.state_dim
    dt = grid.dt
    step_op = StepOperator(pair, grid)
    step_op.prepare(n)
    marks = noise.markspace.marks
    nu_dt = noise.markspace.intensities * dt
    has_jumps = spec.n_marks > 0
    states = np.empty((noise.n_paths, n + 1, dim))
    states[:, 0] = spec.initial_state

    def run(lo, hi):
        x = states[lo:hi, 0].copy()
        for k in range(n):
            t = k * dt
            u = control.values[k]
            dw = noise.dw[lo:hi, k, None]
            b = spec.drift(t, x, u)
            if drift_shift is not None:
                b = b + (drift_shift(t, x) if callable(drift_shift) else drift_shift)
            rhs = (x + dt * b
                   + (x @ pair.diffusion_at(k).T + spec.diffusion(t, x, u)) * dw)
            if has_jumps:
                comp = noise.jumps[lo:hi, k] - nu_dt
                rhs = rhs + np.einsum("pin,pi->pn", spec.jump(t, marks, x, u), comp)
            x = step_op.solve(k, rhs)
            if not np.all(np.isfinite(x)):
                bad = int(np.nonzero(~np.all(np.isfinite(x), axis=1))[0][0]) + lo
                raise DivergenceError(
                    f"non-finite state on path {bad} at step {k + 1}", path=bad, step=k + 1)
            states[lo:hi, k + 1] = x

    chunked_map(run, noise.n_paths)
    states.setflags(write=False)
    return StatePath(states, grid, control, noise)


def _check_same_grid(spec: ProblemSpec, paths: StatePath, control: ControlProcess) -> None:
    if control.n_steps != paths.grid.n_steps:
        raise ConfigurationError("paths and control are on different grids")
    if paths.dim != spec.state_dim:
        raise ConfigurationError("paths and problem have different state dimensions")


def per_path_costs(spec: ProblemSpec, paths: StatePath, control: ControlProcess):
    """Per-path ``(running + terminal cost, constraint)`` arrays."""
    _check_same_grid(spec, paths, control)
    grid = paths.grid
    dt = grid.dt
    x = paths.states
    run = np.zeros(paths.n_paths)
    for k in range(grid.n_steps):
        run += dt * spec.running_cost(k * dt, x[:, k], control.values[k])
    cost = run + spec.terminal_cost(x[:, -1])
    return cost, np.asarray(spec.constraint(x[:, -1]), dtype=float)


def evaluate_cost(spec: ProblemSpec, paths: StatePath, control: ControlProcess) -> CostReport:
    cost, cons = per_path_costs(spec, paths, control)
    j, j_se = mean_and_stderr(cost)
    c, c_se = mean_and_stderr(cons)
    cost.setflags(write=False)
    cons.setflags(write=False)
    return CostReport(j, j_se, c, c_se, cost, cons)


@dataclass(frozen=True)
class AprioriReport:
    lhs: float
    rhs: float
    ratio: float
    vacuous: bool

    def to_dict(self) -> dict:
        return {"lhs": self.lhs, "rhs": self.rhs, "ratio": self.ratio, "vacuous": self.vacuous}


def apriori_check(paths: StatePath, spec: ProblemSpec, space: GalerkinSpace) -> AprioriReport:
    """Empirical constant of the forward energy estimate.

    ``lhs = sup_k E|X_k|_H^2 + sum_k dt E|X_k|_V^2`` and
    ``rhs = |x0|_H^2 + sum_k dt (|b(t_k,0,u_k)|^2 + |g(t_k,0,u_k)|^2
    + sum_i nu_i |s_i(t_k,0,u_k)|^2)``.
    """
    grid = paths.grid
    dt = grid.dt
    x = paths.states
    h2 = np.array([tree_mean(space.h_norm_sq(x[:, k])) for k in range(grid.n_steps + 1)])
    v2 = np.array([tree_mean(space.v_norm_sq(x[:, k])) for k in range(grid.n_steps)])
    lhs = float(h2.max() + dt * np.sum(v2))
    zero = np.zeros(spec.state_dim)
    nu = paths.noise.markspace.intensities
    data = float(np.sum(spec.initial_state ** 2))
    for k in range(grid.n_steps):
        t, u = k * dt, paths.control.values[k]
        data += dt * float(np.sum(spec.drift(t, zero, u) ** 2)
                           + np.sum(spec.diffusion(t, zero, u) ** 2))
        if spec.n_marks:
            s = spec.jump(t, paths.noise.markspace.marks, zero, u)
            data += dt * float(np.sum(nu[:, None] * s ** 2))
    if data == 0.0:
        return AprioriReport(lhs, 0.0, 0.0 if lhs == 0.0 else np.inf, lhs > 0.0)
    return AprioriReport(lhs, data, lhs / data, False)


def state_difference_norm(a: StatePath, b: StatePath) -> float:
    """``sqrt(sup_k E|X^a_k - X^b_k|_H^2)``."""
    d = a.states - b.states
    return float(np.sqrt(max(tree_mean(np.sum(d[:, k] ** 2, axis=1))
                             for k in range(d.shape[1]))))


def forward_dependence(spec: ProblemSpec, pair: OperatorPair, space: GalerkinSpace,
                       control: ControlProcess, noise: NoiseBundle, direction,
                       deltas=(1e-1, 1e-2, 1e-3)) -> dict:
    """Ratios ``|X^delta - X| / delta`` for a drift shift ``delta * direction``."""
    base = simulate_forward(spec, pair, space, control, noise)
    direction = np.asarray(direction, dtype=float)
    ratios = []
    for d in deltas:
        pert = simulate_forward(spec, pair, space, control, noise, drift_shift=d * direction)
        ratios.append(state_difference_norm(pert, base) / d)
    return {"deltas": list(deltas), "ratios": ratios}
