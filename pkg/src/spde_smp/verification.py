"""One-command battery of identity, estimate and oracle checks.

``run_all`` builds the configured problem, optionally applies a coefficient
mutation, and returns one :class:`CheckResult` per check in a fixed order.
A check passes iff ``|measured| <= tolerance``; tolerances come from
``DEFAULT_TOLERANCES`` overridden by the config's ``verify.tolerances``.
Wall-clock times are kept out of the results so that two runs with the
same config and seed give byte-identical reports.
"""
from __future__ import annotations

import copy
import json
import time
from dataclasses import dataclass, field

import numpy as np

from ._parallel import mean_and_stderr, tree_mean
from .adjoint import (Multipliers, RegressionSpec, adjoint_apriori, adjoint_dependence,
                      duality_check, solve_adjoint)
from .config import Setup, build
from .errors import ConfigurationError, StallError
from .forward import apriori_check, evaluate_cost, forward_dependence, simulate_forward
from .gelfand import OperatorPair
from .noise import MarkSpace, TimeGrid, martingale_check, sample_noise
from .optimizer import ekeland_optimize, gateaux_derivative, penalized_cost
from .oracles import continuous_feedback_adjoint, deterministic_adjoint_ode, kkt_control
from .problem import (ControlProcess, control_distance, convex_perturbation, check_partials,
                      make_lq_problem, project_control, random_lq_problem)

DEFAULT_TOLERANCES = {
    "coercivity": 1e-10,             # worst negative coercivity margin
    "partials": 1e-4,                # relative error vs central differences
    "noise_dw_mean": 4.0,            # |mean| in standard errors
    "noise_jump_mean": 4.0,
    "noise_martingale": 3.0,
    "noise_independence": 4.0,       # |corr| * sqrt(draws)
    "forward_conservation": 0.0,
    "forward_heat_scheme": 1e-12,    # relative to (1 + dt mu)^-n
    "forward_heat_exponential": 2.0,  # error / (leading-order dt term)
    "forward_jump_mean": 3.0,        # standard errors
    "apriori_dt": 0.2,               # relative spread of K across dt
    "apriori_instances": 10.0,       # max/min of K across instances
    "dependence_delta": 10.0,
    "dependence_instances": 10.0,
    "adjoint_terminal": 0.0,
    "adjoint_zero": 0.0,
    "adjoint_deterministic": 2.0,    # relative error / dt
    "adjoint_deterministic_martingale": 0.0,
    "adjoint_riccati": 0.05,
    "bsee_apriori_instances": 10.0,
    "bsee_dependence_delta": 10.0,
    "bsee_dependence_instances": 10.0,
    "duality_refinement": 0.3,       # |allowance ratio / 0.5 - 1|
    "gateaux_fd": 1e-2,
    "gateaux_remainder": 1.0,        # largest successive remainder ratio
    "metric": 1e-12,
    "multiplier_normalization": 1e-12,
    "penalty_reference": 1e-15,
    "e2e_constraint": 1e-2,
    "e2e_mp": 1e-3,
    "e2e_kkt_distance": 1e-2,
    "e2e_multipliers": 1e-12,
    "e2e_monotone": 0.0,
}

GROUPS = ("coercivity", "partials", "noise", "forward", "apriori", "dependence", "adjoint",
          "bsee", "duality", "gateaux", "metric", "multipliers", "end_to_end")

MUTATIONS = ("drift_x", "drift_u", "running_cost_x", "terminal_cost_x", "constraint_x",
             "penalty_off")

PERTURBATION_SCALE = 1e-2
DELTAS = (1e-1, 1e-2, 1e-3)
PROBE_MULTIPLIERS = Multipliers(0.8, 0.6)


@dataclass(frozen=True)
class CheckResult:
    name: str
    group: str
    passed: bool
    measured: float
    tolerance: float
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "group": self.group, "passed": self.passed,
                "measured": self.measured, "tolerance": self.tolerance,
                "details": self.details}


def _check(name, group, measured, tolerance, **details) -> CheckResult:
    measured = float(measured)
    ok = bool(np.isfinite(measured) and abs(measured) <= tolerance)
    return CheckResult(name, group, ok, measured, float(tolerance), _plain(details))


def _plain(obj):
    """JSON-safe copy with floats kept at full precision."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _spread(values) -> float:
    """max/min of positive values; inf if any is zero or non-finite."""
    v = np.abs(np.asarray(values, dtype=float))
    if not np.all(np.isfinite(v)) or v.min() == 0:
        return np.inf
    return float(v.max() / v.min())


def sub_seed(seed: int, tag: int) -> int:
    """Independent 63-bit seed derived from ``(seed, tag)``."""
    return int(np.random.SeedSequence([int(seed), int(tag)]).generate_state(1, np.uint64)[0] >> 1)


def probe_control(grid: TimeGrid, m: int, radius: float) -> ControlProcess:
    """A smooth, nonconstant control used wherever a generic test point is needed."""
    t = grid.times[:-1]
    values = np.stack([0.2 * np.cos(np.pi * (j + 1) * t) for j in range(m)], axis=1)
    return ControlProcess(values, grid.dt, radius)


def apply_mutation(setup: Setup, mutation: str | None) -> Setup:
    """Scale one supplied partial by 1.1 (leaving its function untouched), or drop the penalty."""
    if mutation is None:
        return setup
    if mutation not in MUTATIONS:
        raise ConfigurationError(f"unknown mutation {mutation!r}; choose from {MUTATIONS}")
    if mutation == "penalty_off":
        opt = setup.optimizer.__class__.from_dict(
            {**setup.optimizer.to_dict(), "penalize_constraint": False})
        return _replace_setup(setup, optimizer=opt)
    original = getattr(setup.spec, mutation)

    def scaled(*args):
        return 1.1 * np.asarray(original(*args))

    return _replace_setup(setup, spec=setup.spec.with_overrides(**{mutation: scaled}))


def _replace_setup(setup: Setup, **kw) -> Setup:
    fields = {k: getattr(setup, k) for k in setup.__dataclass_fields__}
    fields.update(kw)
    return Setup(**fields)


class Battery:
    """Lazily shared state for one battery run."""

    def __init__(self, setup: Setup, tolerances: dict, study_paths: int, n_instances: int):
        self.s = setup
        self.tol = tolerances
        self.study_paths = study_paths
        self.n_instances = n_instances
        self._noise = None
        self._instances = None
        self.timing: dict = {}

    @property
    def noise(self):
        if self._noise is None:
            self._noise = sample_noise(self.s.grid, self.s.markspace, self.s.n_paths, self.s.seed)
        return self._noise

    def probe(self, grid: TimeGrid | None = None) -> ControlProcess:
        g = grid or self.s.grid
        return project_control(self.s.spec.control_set,
                               probe_control(g, self.s.spec.control_dim, self.s.spec.radius))

    def direction(self, grid: TimeGrid | None = None) -> np.ndarray:
        """Seeded perturbation direction, piecewise constant on the configured grid.

        On a refined grid the same function of time is repeated, so runs at
        different step sizes perturb the control identically.
        """
        g = grid or self.s.grid
        base = self.s.grid.n_steps
        rng = np.random.default_rng([self.s.seed, 1])
        d = rng.standard_normal((base, self.s.spec.control_dim))
        if g.n_steps == base:
            return d
        if g.n_steps % base:
            raise ConfigurationError("refined grid must subdivide the configured grid")
        return np.repeat(d, g.n_steps // base, axis=0)

    # ------------------------------------------------------------------
    def coercivity(self):
        cert = self.s.certify()
        yield _check("coercivity", "coercivity", max(0.0, -cert.worst_margin),
                     self.tol["coercivity"], **cert.to_dict())

    def partials(self):
        errs = check_partials(self.s.spec, self.s.markspace, n_probes=100, seed=self.s.seed)
        yield _check("partials", "partials", max(errs.values()), self.tol["partials"], errors=errs)

    def noise_checks(self):
        b, grid, ms = self.noise, self.s.grid, self.s.markspace
        dt = grid.dt
        draws = b.dw.size
        z_dw = abs(float(tree_mean(b.dw.reshape(-1)))) / np.sqrt(dt / draws)
        yield _check("noise_dw_mean", "noise", z_dw, self.tol["noise_dw_mean"])
        z_jump = 0.0
        for i in range(ms.size):
            rate = ms.intensities[i] * dt
            mean = float(tree_mean(b.jumps[:, :, i].reshape(-1).astype(float)))
            z_jump = max(z_jump, abs(mean - rate) / np.sqrt(rate / draws))
        yield _check("noise_jump_mean", "noise", z_jump, self.tol["noise_jump_mean"],
                     marks=ms.size)
        if ms.size:
            # Predictable integrand: a bounded function of the Brownian path so far.
            w_prev = np.concatenate([np.zeros((b.n_paths, 1)), np.cumsum(b.dw, axis=1)[:, :-1]],
                                    axis=1)
            integrand = np.tanh(w_prev)[:, :, None, None] * np.ones((1, 1, ms.size, 2))
            integrand[..., 1] = 1.0
            z_mart = martingale_check(b, integrand)
            comp = (b.jumps - ms.intensities * dt).sum(axis=2).reshape(-1)
            corr = float(np.corrcoef(b.dw.reshape(-1), comp)[0, 1])
            indep = abs(corr) * np.sqrt(draws)
        else:
            z_mart, indep, corr = 0.0, 0.0, 0.0
        yield _check("noise_martingale", "noise", z_mart, self.tol["noise_martingale"])
        yield _check("noise_independence", "noise", indep, self.tol["noise_independence"],
                     correlation=corr)

    def forward(self):
        s = self.s
        n = s.space.dim
        grid = s.grid
        zero_pair = OperatorPair(np.zeros((n, n)), np.zeros((n, n)))
        zero = make_lq_problem(s.space, zero_pair, control_dim=s.spec.control_dim,
                               n_marks=s.markspace.size, initial_state=s.spec.initial_state)
        u = ControlProcess(np.zeros((grid.n_steps, s.spec.control_dim)), grid.dt)
        paths = simulate_forward(zero, zero_pair, s.space, u, self.noise)
        drift = float(np.max(np.abs(paths.states - s.spec.initial_state)))
        yield _check("forward_conservation", "forward", drift, self.tol["forward_conservation"])

        # Heat decay of the first mode, no other terms.
        heat = make_lq_problem(s.space, s.pair, control_dim=1,
                               initial_state=np.eye(n)[0])
        hu = ControlProcess(np.zeros((grid.n_steps, 1)), grid.dt)
        hnoise = sample_noise(grid, MarkSpace.empty(), 2, s.seed)
        x1 = simulate_forward(heat, s.pair, s.space, hu, hnoise).states[0, -1, 0]
        rate = -float(s.pair.drift_at(0)[0, 0])
        scheme = (1.0 + grid.dt * rate) ** (-grid.n_steps)
        exact = float(np.exp(-rate * grid.horizon))
        yield _check("forward_heat_scheme", "forward", abs(x1 - scheme) / abs(scheme),
                     self.tol["forward_heat_scheme"], value=x1, closed_form=scheme)
        leading = 0.5 * rate ** 2 * grid.horizon * exact * grid.dt
        ratio = abs(x1 - exact) / leading if leading > 0 else abs(x1 - exact)
        yield _check("forward_heat_exponential", "forward", ratio,
                     self.tol["forward_heat_exponential"], error=abs(x1 - exact),
                     leading_term=leading, exact=exact)

        # Constant jump coefficient only: the terminal mean stays at x0.
        par = s.spec.params
        jump0 = par.get("jump0") if s.markspace.size else None
        if jump0 is not None and np.any(jump0):
            jp = make_lq_problem(s.space, zero_pair, control_dim=s.spec.control_dim,
                                 n_marks=s.markspace.size, initial_state=s.spec.initial_state,
                                 jump0=jump0)
            xt = simulate_forward(jp, zero_pair, s.space, u, self.noise).states[:, -1]
            z = 0.0
            for j in range(n):
                mean, se = mean_and_stderr(xt[:, j] - s.spec.initial_state[j])
                if se > 0:
                    z = max(z, abs(mean) / se)
        else:
            z = 0.0
        yield _check("forward_jump_mean", "forward", z, self.tol["forward_jump_mean"])

    def _instance_study(self):
        if self._instances is not None:
            return self._instances
        s = self.s
        grid, ms = s.grid, s.markspace
        h = np.ones(s.space.dim) / np.sqrt(s.space.dim)
        rows = []
        for i in range(self.n_instances):
            spec = random_lq_problem(s.space, s.pair, s.spec.control_dim, ms.size,
                                     seed=[s.seed, 100 + i])
            noise = sample_noise(grid, ms, self.study_paths, sub_seed(s.seed, 200 + i))
            u = project_control(spec.control_set,
                                probe_control(grid, spec.control_dim, spec.radius))
            paths = simulate_forward(spec, s.pair, s.space, u, noise)
            fa = apriori_check(paths, spec, s.space)
            fd = forward_dependence(spec, s.pair, s.space, u, noise, h, DELTAS)
            adj = solve_adjoint(spec, s.pair, s.space, paths, u, PROBE_MULTIPLIERS)
            ba = adjoint_apriori(spec, adj, paths, u)
            bd = adjoint_dependence(spec, s.pair, s.space, paths, u, PROBE_MULTIPLIERS, h, DELTAS)
            rows.append({"forward_apriori": fa.ratio, "forward_dependence": fd["ratios"],
                         "bsee_apriori": ba["ratio"], "bsee_dependence": bd["ratios"]})
        self._instances = rows
        return rows

    def apriori(self):
        s = self.s
        ks = []
        for factor in (0.5, 1.0, 2.0):
            n_steps = int(round(s.grid.n_steps * factor))
            grid = TimeGrid(s.grid.horizon, n_steps)
            spec = make_lq_problem(
                s.space, s.pair, control_dim=s.spec.control_dim, n_marks=s.markspace.size,
                initial_state=s.spec.initial_state, drift0=np.full(s.space.dim, 0.5),
                diffusion0=s.spec.params.get("diffusion0"),
                jump0=s.spec.params.get("jump0") if s.markspace.size else None)
            noise = sample_noise(grid, s.markspace, self.study_paths, sub_seed(s.seed, 300))
            u = ControlProcess(np.zeros((n_steps, s.spec.control_dim)), grid.dt)
            ks.append(apriori_check(simulate_forward(spec, s.pair, s.space, u, noise),
                                    spec, s.space).ratio)
        spread = (max(ks) - min(ks)) / min(ks) if min(ks) > 0 else np.inf
        yield _check("apriori_dt", "apriori", spread, self.tol["apriori_dt"], ratios=ks,
                     n_steps=[int(round(s.grid.n_steps * f)) for f in (0.5, 1.0, 2.0)])
        rows = self._instance_study()
        k = [r["forward_apriori"] for r in rows]
        yield _check("apriori_instances", "apriori", _spread(k), self.tol["apriori_instances"],
                     ratios=k)

    def dependence(self):
        rows = self._instance_study()
        worst = max(_spread(r["forward_dependence"]) for r in rows)
        yield _check("dependence_delta", "dependence", worst, self.tol["dependence_delta"],
                     deltas=DELTAS, ratios=[r["forward_dependence"] for r in rows])
        mid = [r["forward_dependence"][1] for r in rows]
        yield _check("dependence_instances", "dependence", _spread(mid),
                     self.tol["dependence_instances"], ratios=mid)

    def adjoint(self):
        s = self.s
        u = self.probe()
        paths = simulate_forward(s.spec, s.pair, s.space, u, self.noise)
        adj = solve_adjoint(s.spec, s.pair, s.space, paths, u, PROBE_MULTIPLIERS)
        xn = paths.states[:, -1]
        term = (PROBE_MULTIPLIERS.lam * s.spec.terminal_cost_x(xn)
                + PROBE_MULTIPLIERS.mu * s.spec.constraint_x(xn))
        yield _check("adjoint_terminal", "adjoint", np.max(np.abs(adj.p[:, -1] - term)),
                     self.tol["adjoint_terminal"])
        null = solve_adjoint(s.spec, s.pair, s.space, paths, u, Multipliers(0.0, 0.0))
        size = max(np.max(np.abs(a)) if a.size else 0.0 for a in (null.p, null.q, null.r))
        yield _check("adjoint_zero", "adjoint", size, self.tol["adjoint_zero"])

        # Noise-free copy of the problem against a fine ODE integration.
        det = self._deterministic_setup()
        du = project_control(det.spec.control_set,
                             probe_control(det.grid, det.spec.control_dim, det.spec.radius))
        dnoise = sample_noise(det.grid, det.markspace, 4, s.seed)
        dpaths = simulate_forward(det.spec, det.pair, det.space, du, dnoise)
        dadj = solve_adjoint(det.spec, det.pair, det.space, dpaths, du, PROBE_MULTIPLIERS)
        _, p_ode = deterministic_adjoint_ode(det.spec, det.pair, det.grid, du,
                                             PROBE_MULTIPLIERS.lam, PROBE_MULTIPLIERS.mu)
        scale = np.max(np.abs(p_ode))
        gap = float(np.max(np.abs(dadj.p - p_ode[None])))
        err = gap / scale if scale > 0 else gap
        yield _check("adjoint_deterministic", "adjoint", err / det.grid.dt,
                     self.tol["adjoint_deterministic"], relative_error=err, dt=det.grid.dt)
        mart = max(np.max(np.abs(dadj.q)), np.max(np.abs(dadj.r)) if dadj.r.size else 0.0)
        yield _check("adjoint_deterministic_martingale", "adjoint", mart,
                     self.tol["adjoint_deterministic_martingale"])

        fb = continuous_feedback_adjoint(s.spec, s.pair, s.grid, s.markspace, u,
                                         PROBE_MULTIPLIERS.lam, PROBE_MULTIPLIERS.mu)
        ref = fb.evaluate(paths.states)
        ref_norm = np.sum(ref ** 2)
        diff = float(np.sum((adj.p - ref) ** 2))
        rel = float(np.sqrt(diff / ref_norm)) if ref_norm > 0 else np.sqrt(diff)
        yield _check("adjoint_riccati", "adjoint", rel, self.tol["adjoint_riccati"])

    def _deterministic_setup(self) -> Setup:
        cfg = copy.deepcopy(self.s.config)
        for key in ("diffusion0", "diffusion_x", "diffusion_u", "jump0", "jump_x", "jump_u"):
            cfg["problem"].pop(key, None)
        cfg["noise"]["marks"] = []
        cfg["noise"]["intensities"] = []
        det = build(cfg)
        return _replace_setup(det, spec=_transfer_mutation(self.s.spec, det.spec))

    def bsee(self):
        rows = self._instance_study()
        k = [r["bsee_apriori"] for r in rows]
        yield _check("bsee_apriori_instances", "bsee", _spread(k),
                     self.tol["bsee_apriori_instances"], ratios=k)
        worst = max(_spread(r["bsee_dependence"]) for r in rows)
        yield _check("bsee_dependence_delta", "bsee", worst, self.tol["bsee_dependence_delta"],
                     deltas=DELTAS, ratios=[r["bsee_dependence"] for r in rows])
        mid = [r["bsee_dependence"][1] for r in rows]
        yield _check("bsee_dependence_instances", "bsee", _spread(mid),
                     self.tol["bsee_dependence_instances"], ratios=mid)

    def _duality_at(self, setup: Setup, noise):
        grid = setup.grid
        u = project_control(setup.spec.control_set,
                            probe_control(grid, setup.spec.control_dim, setup.spec.radius))
        v = project_control(setup.spec.control_set,
                            u.with_values(u.values + PERTURBATION_SCALE * self.direction(grid)))
        pa = simulate_forward(setup.spec, setup.pair, setup.space, u, noise)
        pb = simulate_forward(setup.spec, setup.pair, setup.space, v, noise)
        adj = solve_adjoint(setup.spec, setup.pair, setup.space, pa, u, PROBE_MULTIPLIERS)
        return duality_check(setup.spec, setup.pair, pa, pb, adj, u, v)

    def duality(self):
        s = self.s
        # One fine bundle; the configured step uses its pairwise sums, so both
        # runs see the same Brownian and jump paths.
        fine = _replace_setup(build(s.config, n_steps=2 * s.grid.n_steps), spec=s.spec)
        fnoise = sample_noise(fine.grid, fine.markspace, fine.n_paths, s.seed)
        rep = self._duality_at(s, fnoise.coarsen(2))
        bound = max(3.0 * rep.stderr, rep.allowance)
        yield _check("duality", "duality", abs(rep.gap), bound, **rep.to_dict())
        rep2 = self._duality_at(fine, fnoise)
        if rep.allowance == 0.0 and rep2.allowance == 0.0:
            ratio, miss = 0.0, 0.0          # no discretisation ambiguity at either step
        else:
            ratio = rep2.allowance / rep.allowance if rep.allowance > 0 else np.inf
            miss = abs(ratio / 0.5 - 1.0)
        yield _check("duality_refinement", "duality", miss,
                     self.tol["duality_refinement"], allowance=rep.allowance,
                     allowance_half_dt=rep2.allowance, ratio=ratio,
                     gap_half_dt=rep2.gap, stderr_half_dt=rep2.stderr)

    def gateaux(self):
        s = self.s
        u = self.probe()
        d = self.direction()
        v = u.with_values(u.values + d)
        noise = self.noise

        def cost_at(w):
            c = evaluate_cost(s.spec, simulate_forward(s.spec, s.pair, s.space, w, noise), w)
            return c.J, c.constraint_value

        j0, c0 = cost_at(u)
        # Reference chosen so that lam = mu: cost and constraint weigh equally.
        # With no constraint violation, fall back to lam = 1 (the hypot kink is at 0).
        eps = 0.1
        j_ref = j0 + eps - (abs(c0) if c0 != 0.0 else eps)
        base, mult = penalized_cost(j0, j_ref, eps, c0)

        def j_eps(w):
            j, c = cost_at(w)
            return penalized_cost(j, j_ref, eps, c)[0]

        deriv = gateaux_derivative(s.spec, s.pair, s.space, u, v, mult, noise,
                                   RegressionSpec(s.optimizer.regression_degree))
        h = 1e-3
        fd = (j_eps(convex_perturbation_free(u, v, h))
              - j_eps(convex_perturbation_free(u, v, -h))) / (2 * h)
        rel = abs(deriv - fd) / max(abs(fd), 1e-300)
        yield _check("gateaux_fd", "gateaux", rel, self.tol["gateaux_fd"], analytic=deriv,
                     finite_difference=fd, multipliers=mult.to_dict())
        rems = []
        for rho in (1e-1, 1e-2, 1e-3):
            rems.append(abs(j_eps(convex_perturbation_free(u, v, rho)) - base - rho * deriv) / rho)
        if not any(rems):
            worst = 0.0
        else:
            worst = max(rems[i + 1] / rems[i] if rems[i] > 0 else np.inf for i in range(2))
        yield _check("gateaux_remainder", "gateaux", worst, self.tol["gateaux_remainder"],
                     rho=[1e-1, 1e-2, 1e-3], remainders=rems)

    def metric(self):
        rng = np.random.default_rng([self.s.seed, 2])
        grid, m = self.s.grid, self.s.spec.control_dim
        worst = 0.0
        for _ in range(100):
            u = ControlProcess(rng.uniform(-1, 1, (grid.n_steps, m)), grid.dt)
            v = ControlProcess(rng.uniform(-1, 1, (grid.n_steps, m)), grid.dt)
            rho = float(rng.uniform())
            lhs = control_distance(convex_perturbation(u, v, rho), u, grid)
            worst = max(worst, abs(lhs - rho * control_distance(v, u, grid)))
        yield _check("metric", "metric", worst, self.tol["metric"], samples=100)

    def multipliers(self):
        rng = np.random.default_rng([self.s.seed, 3])
        worst = 0.0
        for _ in range(1000):
            j, jr, c = rng.normal(size=3) * 10.0 ** rng.uniform(-3, 3, 3)
            eps = 10.0 ** rng.uniform(-6, 1)
            je, mult = penalized_cost(j, jr, eps, c)
            if je > 0:
                worst = max(worst, abs(mult.norm_sq() - 1.0))
        yield _check("multiplier_normalization", "multipliers", worst,
                     self.tol["multiplier_normalization"], samples=1000)
        worst = 0.0
        for eps in (1.0, 0.5, 1e-3, 1e-8):
            for j in (0.0, 0.3715, 12.5):
                je, mult = penalized_cost(j, j, eps, 0.0)
                worst = max(worst, abs(je - eps) / eps, abs(mult.lam - 1.0), abs(mult.mu))
        yield _check("penalty_reference", "multipliers", worst, self.tol["penalty_reference"])

    def end_to_end(self):
        s = self.s
        started = time.perf_counter()
        try:
            trace = ekeland_optimize(s.spec, s.pair, s.space, s.optimizer, s.grid, s.markspace,
                                     s.n_paths, s.seed, initial=s.initial_control)
        except StallError as exc:
            trace = exc.trace
            self.timing["end_to_end"] = time.perf_counter() - started
            yield _check("e2e_constraint", "end_to_end", np.inf, self.tol["e2e_constraint"],
                         error=str(exc))
            return
        self.timing["end_to_end"] = time.perf_counter() - started
        self.trace = trace
        last = trace.states[-1] if trace.states else None
        oracle = kkt_control(s.spec, s.pair, s.grid)
        cons = last.constraint_value if last else np.inf
        mp = last.mp_residual if last else np.inf
        rows = trace.rows()
        yield _check("e2e_constraint", "end_to_end", cons, self.tol["e2e_constraint"],
                     converged=trace.converged, outer_iterations=len(trace.states),
                     trace=rows)
        yield _check("e2e_mp", "end_to_end", mp, self.tol["e2e_mp"])
        dist = control_distance(trace.control, oracle.control, s.grid)
        yield _check("e2e_kkt_distance", "end_to_end", dist, self.tol["e2e_kkt_distance"],
                     oracle_multiplier=oracle.multiplier, oracle_cost=oracle.mean_cost)
        norm = max((abs(st.multipliers.norm_sq() - 1.0) for st in trace.states
                    if not st.multipliers.degenerate), default=0.0)
        yield _check("e2e_multipliers", "end_to_end", norm, self.tol["e2e_multipliers"])
        rise = 0.0
        for vals in trace.inner_values:
            if len(vals) > 1:
                rise = max(rise, float(np.max(np.diff(vals))))
        yield _check("e2e_monotone", "end_to_end", max(rise, 0.0), self.tol["e2e_monotone"])


def convex_perturbation_free(u: ControlProcess, v: ControlProcess, rho: float) -> ControlProcess:
    """``u + rho (v - u)`` for any real ``rho`` (finite differences step both ways)."""
    return u.with_values(u.values + rho * (v.values - u.values))


def _transfer_mutation(mutated, fresh):
    """Carry overridden partial callbacks from ``mutated`` onto a rebuilt spec."""
    kw = {}
    for name in MUTATIONS[:-1]:
        fn = getattr(mutated, name)
        if getattr(fn, "__name__", "") == "scaled":
            original = getattr(fresh, name)

            def scaled(*args, _f=original):
                return 1.1 * np.asarray(_f(*args))

            kw[name] = scaled
    return fresh.with_overrides(**kw) if kw else fresh


_RUNNERS = (
    ("coercivity", Battery.coercivity),
    ("partials", Battery.partials),
    ("noise", Battery.noise_checks),
    ("forward", Battery.forward),
    ("apriori", Battery.apriori),
    ("dependence", Battery.dependence),
    ("adjoint", Battery.adjoint),
    ("bsee", Battery.bsee),
    ("duality", Battery.duality),
    ("gateaux", Battery.gateaux),
    ("metric", Battery.metric),
    ("multipliers", Battery.multipliers),
    ("end_to_end", Battery.end_to_end),
)

CHECK_NAMES = {
    "coercivity": ("coercivity",),
    "partials": ("partials",),
    "noise": ("noise_dw_mean", "noise_jump_mean", "noise_martingale", "noise_independence"),
    "forward": ("forward_conservation", "forward_heat_scheme", "forward_heat_exponential",
                "forward_jump_mean"),
    "apriori": ("apriori_dt", "apriori_instances"),
    "dependence": ("dependence_delta", "dependence_instances"),
    "adjoint": ("adjoint_terminal", "adjoint_zero", "adjoint_deterministic",
                "adjoint_deterministic_martingale", "adjoint_riccati"),
    "bsee": ("bsee_apriori_instances", "bsee_dependence_delta", "bsee_dependence_instances"),
    "duality": ("duality", "duality_refinement"),
    "gateaux": ("gateaux_fd", "gateaux_remainder"),
    "metric": ("metric",),
    "multipliers": ("multiplier_normalization", "penalty_reference"),
    "end_to_end": ("e2e_constraint", "e2e_mp", "e2e_kkt_distance", "e2e_multipliers",
                   "e2e_monotone"),
}


def _selected(only) -> tuple[set, set]:
    if not only:
        return set(GROUPS), set()
    groups, names = set(), set()
    known = {n for v in CHECK_NAMES.values() for n in v}
    for item in only:
        if item in GROUPS:
            groups.add(item)
        elif item in known:
            names.add(item)
            groups.update(g for g, v in CHECK_NAMES.items() if item in v)
        else:
            raise ConfigurationError(f"unknown check or group {item!r}")
    # a group named explicitly keeps all its checks
    explicit = {g for g in only if g in GROUPS}
    keep = {n for g in explicit for n in CHECK_NAMES[g]} | names
    return groups, keep


@dataclass
class BatteryReport:
    results: list
    seed: int
    mutation: str | None
    timing: dict
    trace: object = None

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "mutation": self.mutation, "passed": self.passed,
                "checks": [r.to_dict() for r in self.results]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def summary(self) -> str:
        width = max((len(r.name) for r in self.results), default=4)
        lines = []
        for r in self.results:
            flag = "PASS" if r.passed else "FAIL"
            lines.append(f"{flag}  {r.name:<{width}}  measured={r.measured:.6g}  "
                         f"tolerance={r.tolerance:.6g}")
        n_fail = sum(not r.passed for r in self.results)
        lines.append(f"{len(self.results) - n_fail}/{len(self.results)} checks passed")
        return "\n".join(lines) + "\n"


def run_battery(config: dict, seed: int | None = None, *, only=None, mutation=None,
                tolerances: dict | None = None, n_paths: int | None = None,
                n_steps: int | None = None) -> BatteryReport:
    """Run the selected checks and keep timings and the optimizer trace alongside."""
    setup = build(config, seed=seed, n_paths=n_paths, n_steps=n_steps)
    vcfg = setup.config.get("verify", {})
    tol = dict(DEFAULT_TOLERANCES)
    tol.update(vcfg.get("tolerances", {}))
    tol.update(tolerances or {})
    unknown = set(tol) - set(DEFAULT_TOLERANCES)
    if unknown:
        raise ConfigurationError(f"unknown tolerance keys: {sorted(unknown)}")
    if mutation is None:
        mutation = vcfg.get("mutation")
    only = only if only is not None else vcfg.get("only")
    setup = apply_mutation(setup, mutation)
    groups, keep = _selected(only)
    bat = Battery(setup, tol, int(vcfg.get("study_paths", 2000)),
                  int(vcfg.get("n_instances", 10)))
    results = []
    for group, runner in _RUNNERS:
        if group not in groups:
            continue
        started = time.perf_counter()
        try:
            for res in runner(bat):
                if not keep or res.name in keep:
                    results.append(res)
        except (ConfigurationError, StallError):
            raise
        except Exception as exc:
            raise RuntimeError(f"check group {group!r} aborted: {exc}") from exc
        bat.timing.setdefault(group, time.perf_counter() - started)
    return BatteryReport(results, setup.seed, mutation, bat.timing, getattr(bat, "trace", None))


def run_all(config: dict, seed: int | None = None, **kw) -> list[CheckResult]:
    return run_battery(config, seed, **kw).results


# --------------------------------------------------------------------------
# scheme-order study

def _observed_order(dts, errors) -> float:
    dts = np.asarray(dts, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if np.all(errors == 0):
        return np.inf
    if np.any(errors <= 0):
        return np.nan
    slope, _ = np.polyfit(np.log(dts), np.log(errors), 1)
    return float(slope)


def convergence_study(config: dict, dt_list, path_list=(), *, seed: int | None = None,
                      n_paths: int = 2000, exact_terminal=None, duality: bool = True) -> dict:
    """Strong error of the forward scheme over ``dt_list`` and the duality gap split.

    ``dt_list`` is descending; the finest entry is the reference unless
    ``exact_terminal`` (the exact terminal state, N-vector) is given, in
    which case every entry is compared with it.  Coarse runs reuse the
    finest Brownian and jump increments, summed, so errors are pathwise.
    ``path_list`` gives the ensemble sizes for the duality-gap table.
    """
    dts = [float(d) for d in dt_list]
    if any(b >= a for a, b in zip(dts, dts[1:])):
        raise ConfigurationError("dt_list must be strictly descending")
    base = build(config, seed=seed)
    horizon = base.grid.horizon
    steps = [int(round(horizon / d)) for d in dts]
    if any(abs(n * d - horizon) > 1e-9 * horizon for n, d in zip(steps, dts)):
        raise ConfigurationError("every dt must divide the horizon")
    finest = steps[-1]
    if any(finest % n for n in steps):
        raise ConfigurationError("every step count must divide the finest one")
    s_fine = build(config, seed=seed, n_steps=finest)
    fine_noise = sample_noise(s_fine.grid, s_fine.markspace, n_paths, s_fine.seed)
    terminal = {}
    for n in steps:
        st = build(config, seed=seed, n_steps=n)
        noise = fine_noise.coarsen(finest // n)
        u = ControlProcess(np.zeros((n, st.spec.control_dim)), st.grid.dt, st.spec.radius)
        terminal[n] = simulate_forward(st.spec, st.pair, st.space, u, noise).states[:, -1]
    if exact_terminal is not None:
        ref = np.broadcast_to(np.asarray(exact_terminal, dtype=float), terminal[finest].shape)
        compare = steps
    else:
        ref = terminal[finest]
        compare = steps[:-1]
    rows = []
    for n, d in zip(steps, dts):
        if n not in compare:
            continue
        err = float(np.sqrt(tree_mean(np.sum((terminal[n] - ref) ** 2, axis=1))))
        rows.append({"dt": d, "n_steps": n, "strong_error": err})
    order = _observed_order([r["dt"] for r in rows], [r["strong_error"] for r in rows]) \
        if len(rows) >= 2 else np.nan
    gap_rows = []
    if duality:
        bat = Battery(base, dict(DEFAULT_TOLERANCES), n_paths, 1)
        for n in steps:
            for p in path_list:
                st = build(config, seed=seed, n_steps=n, n_paths=p)
                noise = sample_noise(st.grid, st.markspace, p, st.seed)
                rep = bat._duality_at(st, noise)
                gap_rows.append({"dt": st.grid.dt, "n_paths": p, "gap": rep.gap,
                                 "stderr": rep.stderr, "allowance": rep.allowance,
                                 "bias_bound": rep.allowance, "noise_bound": 3 * rep.stderr})
    return {"strong": rows, "observed_order": order, "duality": gap_rows,
            "reference": "exact" if exact_terminal is not None else f"dt={dts[-1]}"}
