"""Penalised cost, multipliers, Gateaux derivative and the epsilon-continuation loop.

For a reference level ``J_ref`` and ``eps > 0`` the penalised cost is

    J_eps(u) = sqrt((J(u) - J_ref + eps)^2 + C(u)^2),   C(u) = E phi(X_T),

and its gradient is ``lam dJ + mu dC`` with
``lam = (J - J_ref + eps) / J_eps`` and ``mu = C / J_eps``.  Both
derivatives come from one adjoint solve with terminal data
``lam Phi_x + mu phi_x``.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .adjoint import Multipliers, RegressionSpec, mean_hamiltonian_u
from .errors import ConfigurationError, PreconditionError, StallError
from .forward import CostReport, evaluate_cost, simulate_forward
from .gelfand import GalerkinSpace, OperatorPair
from .hamiltonian import hamiltonian, hamiltonian_partials
from .noise import MarkSpace, NoiseBundle, TimeGrid, sample_noise
from .problem import ControlProcess, ControlSet, ProblemSpec, control_distance, project_control

log = logging.getLogger(__name__)

__all__ = [
    "hamiltonian", "hamiltonian_partials", "penalized_cost", "gateaux_derivative",
    "mp_residual", "ekeland_optimize", "OptimizerConfig", "PenaltyState",
    "OptimizationTrace", "Evaluation", "evaluate",
]


def penalized_cost(J: float, J_reference: float, epsilon: float,
                   constraint_value: float) -> tuple[float, Multipliers]:
    if not epsilon > 0:
        raise PreconditionError(f"epsilon must be positive, got {epsilon}")
    a = J - J_reference + epsilon
    j_eps = float(np.hypot(a, constraint_value))
    if j_eps == 0.0:
        return 0.0, Multipliers(0.0, 0.0, degenerate=True)
    return j_eps, Multipliers(a / j_eps, constraint_value / j_eps)


def mp_residual(control: ControlProcess, h_u_means: np.ndarray, cset: ControlSet) -> float:
    """``-sum_k dt min_{w in box} (H_u_k, w - u_k)``: zero iff the discrete
    variational inequality holds at every step."""
    h = np.asarray(h_u_means, dtype=float)
    u = control.values
    if h.shape != u.shape:
        raise ConfigurationError(f"H_u means have shape {h.shape}, control {u.shape}")
    with np.errstate(invalid="ignore"):
        to_lower = np.where(h > 0, h * (cset.lower - u), 0.0)
        to_upper = np.where(h < 0, h * (cset.upper - u), 0.0)
    worst = to_lower + to_upper
    return float(control.dt * np.sum(np.maximum(-worst, 0.0)))


@dataclass(frozen=True, eq=False)
class Evaluation:
    """Cost report at one control on one noise bundle, plus the adjoint gradient if computed."""

    control: ControlProcess
    cost: CostReport
    gradient: np.ndarray | None = None


def evaluate(spec, pair, space, control, noise, multipliers: Multipliers | None = None,
             regression: RegressionSpec = RegressionSpec()) -> Evaluation:
    paths = simulate_forward(spec, pair, space, control, noise)
    cost = evaluate_cost(spec, paths, control)
    grad = None
    if multipliers is not None:
        grad = mean_hamiltonian_u(spec, pair, paths, control, multipliers, regression)
    return Evaluation(control, cost, grad)


def gateaux_derivative(spec: ProblemSpec, pair: OperatorPair, space: GalerkinSpace,
                       u: ControlProcess, v: ControlProcess, multipliers: Multipliers,
                       noise: NoiseBundle,
                       regression: RegressionSpec = RegressionSpec()) -> float:
    """``sum_k dt (E H_u(t_k), v_k - u_k)``: the derivative of ``lam J + mu C`` along ``v - u``."""
    if u.values.shape != v.values.shape:
        raise ConfigurationError("u and v have different shapes")
    ev = evaluate(spec, pair, space, u, noise, multipliers, regression)
    return float(u.dt * np.sum(ev.gradient * (v.values - u.values)))


STEP_RULES = ("fixed", "bb1", "bb2", "abbmin")


@dataclass(frozen=True)
class OptimizerConfig:
    eps0: float = 1.0
    kappa: float = 0.5
    max_outer: int = 12
    tol_constraint: float = 1e-2
    tol_mp: float = 1e-3
    stationarity_const: float = 1.0
    armijo_c: float = 1e-4
    max_backtracks: int = 30
    max_inner: int = 200
    step0: float = 1.0
    step_rule: str = "abbmin"
    penalize_constraint: bool = True
    presolve: bool = True
    resample_noise: bool = True
    regression_degree: int = 1

    def __post_init__(self):
        if not self.eps0 > 0:
            raise ConfigurationError("eps0 must be positive")
        if not 0 < self.kappa < 1:
            raise ConfigurationError("kappa must lie in (0, 1)")
        if self.max_outer < 0 or self.max_inner < 1 or self.max_backtracks < 1:
            raise ConfigurationError("iteration limits must be positive (max_outer >= 0)")
        if not 0 < self.armijo_c < 1:
            raise ConfigurationError("armijo_c must lie in (0, 1)")
        if self.step0 <= 0 or self.stationarity_const <= 0:
            raise ConfigurationError("step0 and stationarity_const must be positive")
        if self.tol_constraint <= 0 or self.tol_mp <= 0:
            raise ConfigurationError("tolerances must be positive")
        if self.step_rule not in STEP_RULES:
            raise ConfigurationError(f"step_rule must be one of {STEP_RULES}")

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown optimizer keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PenaltyState:
    iteration: int
    epsilon: float
    J_current: float
    J_reference: float
    penalized_J: float
    multipliers: Multipliers
    constraint_value: float
    mp_residual: float
    inner_iterations: int
    noise_seed: int
    J_stderr: float = 0.0
    constraint_stderr: float = 0.0

    def row(self) -> dict:
        return {"iteration": self.iteration, "epsilon": self.epsilon, "J": self.J_current,
                "J_reference": self.J_reference, "J_eps": self.penalized_J,
                "lambda": self.multipliers.lam, "mu": self.multipliers.mu,
                "constraint": self.constraint_value, "mp_residual": self.mp_residual,
                "inner_iterations": self.inner_iterations, "noise_seed": self.noise_seed}


@dataclass
class OptimizationTrace:
    states: list = field(default_factory=list)
    control: ControlProcess | None = None
    adjoint_summary: dict = field(default_factory=dict)
    inner_values: list = field(default_factory=list)   # accepted J_eps values per outer iteration
    seeds: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    presolve: dict = field(default_factory=dict)
    converged: bool = False
    final_step: float = 0.0
    projected_stationarity: float = 0.0

    def rows(self) -> list[dict]:
        return [s.row() for s in self.states]

    def to_dict(self) -> dict:
        # wall_clock stays out: this dict is hashed as a reproducible artifact
        return {"states": self.rows(), "adjoint_summary": self.adjoint_summary,
                "seeds": self.seeds, "presolve": self.presolve,
                "converged": self.converged, "final_step": self.final_step,
                "projected_stationarity": self.projected_stationarity}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


class _Objective:
    """J_eps at fixed (J_ref, eps) on a fixed noise bundle; plain J when ``penalize`` is off."""

    def __init__(self, ctx, noise, j_ref, eps, penalize):
        self.ctx = ctx
        self.noise = noise
        self.j_ref = j_ref
        self.eps = eps
        self.penalize = penalize

    def value(self, cost: CostReport):
        if not self.penalize:
            return cost.J, Multipliers(1.0, 0.0)
        return penalized_cost(cost.J, self.j_ref, self.eps, cost.constraint_value)

    def evaluate(self, control, with_gradient: bool):
        spec, pair, space, reg = self.ctx
        paths = simulate_forward(spec, pair, space, control, self.noise)
        cost = evaluate_cost(spec, paths, control)
        j_eps, mult = self.value(cost)
        grad = None
        if with_gradient:
            grad = mean_hamiltonian_u(spec, pair, paths, control, mult, reg)
        return cost, j_eps, mult, grad


def _inner_product(a, b, dt):
    return float(dt * np.sum(a * b))


class _StepRule:
    """Trial step lengths: fixed, Barzilai-Borwein long/short, or adaptive min-of-short.

    ``abbmin`` takes the long step when consecutive gradients are nearly
    aligned and otherwise the smallest of the last three short steps; it
    copes well with the single stiff direction that ``J_eps`` develops as
    ``eps`` shrinks.
    """

    def __init__(self, rule: str, step0: float, dt: float):
        self.rule = rule
        self.step0 = step0
        self.dt = dt
        self.short = []

    def next(self, s, y) -> float:
        if self.rule == "fixed" or s is None:
            return self.step0
        sy = _inner_product(s, y, self.dt)
        if sy <= 0:
            return self.step0
        long_step = _inner_product(s, s, self.dt) / sy
        short_step = sy / _inner_product(y, y, self.dt)
        self.short = (self.short + [short_step])[-3:]
        if self.rule == "bb1":
            eta = long_step
        elif self.rule == "bb2":
            eta = short_step
        else:
            eta = min(self.short) if short_step < 0.5 * long_step else long_step
        return float(np.clip(eta, 1e-8, 1e8))


def _descend(obj: _Objective, u: ControlProcess, cset: ControlSet, cfg: OptimizerConfig,
             threshold: float, trace: OptimizationTrace, accepted: list):
    """Projected gradient with Armijo backtracking from a spectral trial step.

    Stops once the maximum-principle residual falls to ``threshold`` or
    ``cfg.max_inner`` gradient evaluations have been spent.
    """
    dt = u.dt
    cost, j_eps, mult, grad = obj.evaluate(u, True)
    accepted.append(j_eps)
    mp = mp_residual(u, grad, cset)
    rule = _StepRule(cfg.step_rule, cfg.step0, dt)
    eta = cfg.step0
    prev = None
    iters = 0
    while mp > threshold and iters < cfg.max_inner:
        if prev is None:
            eta = rule.next(None, None)
        else:
            eta = rule.next(u.values - prev[0].values, grad - prev[1])
        for _ in range(cfg.max_backtracks):
            trial = project_control(cset, u.with_values(u.values - eta * grad))
            step = trial.values - u.values
            if not np.any(step):
                break
            slope = _inner_product(grad, step, dt)
            t_jeps = obj.evaluate(trial, False)[1]
            if t_jeps <= j_eps + cfg.armijo_c * slope:
                break
            eta *= 0.5
        else:
            trace.final_step = eta
            raise StallError(
                f"no decrease of J_eps after {cfg.max_backtracks} backtracks "
                f"(eps={obj.eps:g}, J_eps={j_eps:.6g})", trace=trace)
        if not np.any(step):
            break
        prev = (u, grad)
        u = trial
        cost, j_eps, mult, grad = obj.evaluate(u, True)
        accepted.append(j_eps)
        mp = mp_residual(u, grad, cset)
        iters += 1
        log.debug("eps=%.3g it=%d J_eps=%.10g J=%.8g C=%.3e mp=%.3e eta=%.3g",
                  obj.eps, iters, j_eps, cost.J, cost.constraint_value, mp, eta)
    trace.final_step = eta
    return u, cost, j_eps, mult, grad, mp, iters


def _noise_for(grid, markspace, n_paths, base_seed, j, resample):
    seed = int(base_seed) + (j if resample else 0)
    return seed, sample_noise(grid, markspace, n_paths, seed)


def ekeland_optimize(spec: ProblemSpec, pair: OperatorPair, space: GalerkinSpace,
                     config: OptimizerConfig, grid: TimeGrid, markspace: MarkSpace,
                     n_paths: int, seed: int, initial: ControlProcess | None = None,
                     noise: NoiseBundle | None = None) -> OptimizationTrace:
    """Minimise ``J_eps`` to ``C sqrt(eps)`` stationarity for a shrinking ``eps`` schedule.

    The reference level starts at the unconstrained minimum of ``J`` (a
    lower bound for the constrained optimum) and is then moved to the
    tangent estimate ``J + (mu / lam) C`` of the constrained optimum at the
    start of every outer iteration.  Each outer iteration draws a fresh
    noise bundle with seed ``seed + j`` unless ``resample_noise`` is off;
    a supplied ``noise`` bundle is reused for every iteration.
    """
    cfg = config
    spec.check_compatible(pair, markspace)
    cset = spec.control_set
    reg = RegressionSpec(cfg.regression_degree)
    ctx = (spec, pair, space, reg)
    started = time.perf_counter()
    u0 = initial if initial is not None else ControlProcess(
        np.zeros((grid.n_steps, spec.control_dim)), grid.dt, spec.radius)
    u = project_control(cset, u0)
    trace = OptimizationTrace(control=u)
    trace.seeds = {"base_seed": int(seed), "per_outer": []}
    if cfg.max_outer == 0:
        trace.control = u0
        trace.converged = False
        trace.wall_clock = time.perf_counter() - started
        return trace

    def bundle(j):
        if noise is not None:
            return int(noise.seed), noise
        return _noise_for(grid, markspace, n_paths, seed, j, cfg.resample_noise)

    seed0, noise0 = bundle(0)
    if cfg.presolve:
        pre = _Objective(ctx, noise0, 0.0, 1.0, penalize=False)
        accepted: list = []
        u, cost, _, _, _, mp, iters = _descend(pre, u, cset, cfg, cfg.tol_mp, trace, accepted)
        j_ref = cost.J
        trace.presolve = {"J_unconstrained": j_ref, "mp_residual": mp, "iterations": iters,
                          "noise_seed": seed0}
    else:
        cost = _Objective(ctx, noise0, 0.0, 1.0, False).evaluate(u, False)[0]
        j_ref = cost.J
        trace.presolve = {"J_unconstrained": None, "mp_residual": None, "iterations": 0,
                          "noise_seed": seed0}

    mult_prev = Multipliers(1.0, 0.0)
    for j in range(cfg.max_outer):
        eps = cfg.eps0 * cfg.kappa ** j
        seed_j, noise_j = (seed0, noise0) if j == 0 else bundle(j)
        trace.seeds["per_outer"].append(seed_j)
        obj = _Objective(ctx, noise_j, j_ref, eps, cfg.penalize_constraint)
        if j > 0 and cfg.penalize_constraint:
            cost = obj.evaluate(u, False)[0]
            if mult_prev.lam > 1e-12:
                j_ref = cost.J + mult_prev.mu / mult_prev.lam * cost.constraint_value
            obj.j_ref = j_ref
        accepted = []
        threshold = cfg.stationarity_const * np.sqrt(eps)
        u, cost, j_eps, mult, grad, mp, iters = _descend(obj, u, cset, cfg, threshold,
                                                         trace, accepted)
        feasible = (not cfg.penalize_constraint) or abs(cost.constraint_value) <= cfg.tol_constraint
        if feasible and mp > cfg.tol_mp:
            u, cost, j_eps, mult, grad, mp, more = _descend(obj, u, cset, cfg, cfg.tol_mp,
                                                            trace, accepted)
            iters += more
            feasible = ((not cfg.penalize_constraint)
                        or abs(cost.constraint_value) <= cfg.tol_constraint)
        if not cfg.penalize_constraint:
            # Constraint dropped: J itself is the reference, so J_eps = eps and (lam, mu) = (1, 0).
            j_ref = cost.J
            j_eps, mult = penalized_cost(cost.J, j_ref, eps, 0.0)
        trace.inner_values.append(accepted)
        trace.states.append(PenaltyState(
            iteration=j, epsilon=eps, J_current=cost.J, J_reference=j_ref,
            penalized_J=j_eps, multipliers=mult, constraint_value=cost.constraint_value,
            mp_residual=mp, inner_iterations=iters, noise_seed=seed_j,
            J_stderr=cost.J_stderr, constraint_stderr=cost.constraint_stderr))
        trace.control = u
        trace.adjoint_summary = {"H_u_mean": grad.tolist(), "multipliers": mult.to_dict()}
        mult_prev = mult
        if feasible and mp <= cfg.tol_mp:
            trace.converged = True
            break
    step = project_control(cset, u.with_values(u.values - trace.final_step * grad))
    trace.projected_stationarity = control_distance(u, step, grid)
    trace.wall_clock = time.perf_counter() - started
    return trace
