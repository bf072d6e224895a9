"""Coefficients, costs, constraint, controls and the control metric.

Coefficient callbacks are vectorised: ``x`` has shape ``(..., N)`` and ``u``
shape ``(..., m)`` (broadcastable against ``x``'s leading axes).  Jump
callbacks also receive the mark values and return one entry per mark.

======================  ========================  ===================
callback                returns                   partial shapes
======================  ========================  ===================
``drift(t, x, u)``      ``(..., N)``              x: (N, N), u: (N, m)
``diffusion(t, x, u)``  ``(..., N)``              x: (N, N), u: (N, m)
``jump(t, e, x, u)``    ``(..., M, N)``           x: (M, N, N), u: (M, N, m)
``running_cost``        ``(...)``                 x: (N,), u: (m,)
``terminal_cost(x)``    ``(...)``                 x: (N,)
``constraint(x)``       ``(...)``                 x: (N,)
======================  ========================  ===================

Partials are returned with the same leading axes (``[..., i, j] = d f_i / d z_j``).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import ConfigurationError, PreconditionError
from .gelfand import GalerkinSpace, OperatorPair
from .noise import MarkSpace, TimeGrid

DEFAULT_RADIUS = 1e3


@dataclass(frozen=True)
class ControlSet:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).reshape(-1)
        hi = np.asarray(self.upper, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise ConfigurationError("control bounds have different lengths")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)) or np.any(lo > hi):
            raise ConfigurationError("control bounds must satisfy lower <= upper")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def unbounded(cls, dim: int) -> "ControlSet":
        return cls(np.full(dim, -np.inf), np.full(dim, np.inf))

    @classmethod
    def box(cls, dim: int, half_width: float) -> "ControlSet":
        return cls(np.full(dim, -half_width), np.full(dim, half_width))

    @property
    def dim(self) -> int:
        return self.lower.shape[0]


@dataclass(frozen=True, eq=False)
class ControlProcess:
    """Deterministic, piecewise-constant control: ``values[k]`` acts on step k."""

    values: np.ndarray
    dt: float
    radius: float = DEFAULT_RADIUS

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2:
            raise ConfigurationError(f"control values must be (steps, m), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ConfigurationError("control values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, grid: TimeGrid, value, radius: float = DEFAULT_RADIUS):
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(np.tile(value, (grid.n_steps, 1)), grid.dt, radius)

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def norm(self) -> float:
        return float(np.sqrt(self.dt * np.sum(self.values ** 2)))

    def with_values(self, values) -> "ControlProcess":
        return ControlProcess(values, self.dt, self.radius)


def _same_shape(u1: ControlProcess, u2: ControlProcess) -> None:
    if u1.values.shape != u2.values.shape:
        raise ConfigurationError(
            f"control shapes differ: {u1.values.shape} vs {u2.values.shape}")


def control_distance(u1: ControlProcess, u2: ControlProcess, grid: TimeGrid) -> float:
    """``sqrt(sum_k dt |u1_k - u2_k|^2)``."""
    _same_shape(u1, u2)
    if u1.n_steps != grid.n_steps:
        raise ConfigurationError("control step count does not match the grid")
    d = u1.values - u2.values
    return float(np.sqrt(grid.dt * np.sum(d * d)))


def project_control(cset: ControlSet, u: ControlProcess) -> ControlProcess:
    """Clamp onto the box, then pull inside the radius ball if needed."""
    if cset.dim != u.dim:
        raise ConfigurationError(f"control set has dim {cset.dim}, control has {u.dim}")
    v = np.clip(u.values, cset.lower, cset.upper)
    norm = float(np.sqrt(u.dt * np.sum(v * v)))
    if norm > u.radius * (1.0 + 1e-12):
        v = np.clip(v * (u.radius / norm), cset.lower, cset.upper)
    return u.with_values(v)


def convex_perturbation(u: ControlProcess, v: ControlProcess, rho: float) -> ControlProcess:
    if not 0.0 <= rho <= 1.0:
        raise PreconditionError(f"rho must lie in [0, 1], got {rho}")
    _same_shape(u, v)
    if rho == 0.0:
        return u
    if rho == 1.0:
        return u.with_values(v.values)
    return u.with_values(u.values + rho * (v.values - u.values))


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """All coefficients of the controlled equation and its cost.

    Callbacks must be pure; a spec is shared read-only across workers.
    """

    initial_state: np.ndarray
    control_dim: int
    n_marks: int
    control_set: ControlSet
    drift: Callable
    drift_x: Callable
    drift_u: Callable
    diffusion: Callable
    diffusion_x: Callable
    diffusion_u: Callable
    jump: Callable
    jump_x: Callable
    jump_u: Callable
    running_cost: Callable
    running_cost_x: Callable
    running_cost_u: Callable
    terminal_cost: Callable
    terminal_cost_x: Callable
    constraint: Callable
    constraint_x: Callable
    radius: float = DEFAULT_RADIUS
    family: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        x0 = np.array(self.initial_state, dtype=float).reshape(-1)
        x0.setflags(write=False)
        object.__setattr__(self, "initial_state", x0)
        if self.control_set.dim != self.control_dim:
            raise ConfigurationError("control_set dimension differs from control_dim")

    @property
    def state_dim(self) -> int:
        return self.initial_state.shape[0]

    def check_compatible(self, pair: OperatorPair, markspace: MarkSpace) -> None:
        if pair.dim != self.state_dim:
            raise ConfigurationError(
                f"operator dimension {pair.dim} differs from state dimension {self.state_dim}")
        if markspace.size != self.n_marks:
            raise ConfigurationError(
                f"problem has {self.n_marks} jump marks, mark space has {markspace.size}")

    def with_overrides(self, **kw) -> "ProblemSpec":
        return replace(self, **kw)


# --------------------------------------------------------------------------
# linear-quadratic and bilinear families

def _mat(a, shape, label):
    if a is None:
        return np.zeros(shape)
    a = np.array(a, dtype=float)
    if a.shape != shape:
        raise ConfigurationError(f"{label} must have shape {shape}, got {a.shape}")
    return a


def _bcast(a, lead, tail_shape):
    return np.broadcast_to(a, tuple(lead) + tuple(tail_shape))


def _lead(x, u):
    return np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])


def _build_quadratic_family(n, m, n_marks, *, initial_state, drift0, drift_x, drift_u,
                            drift_bilinear, diffusion0, diffusion_x, diffusion_u,
                            diffusion_bilinear, jump0, jump_x, jump_u,
                            state_weight, control_weight, terminal_weight,
                            constraint_vector, target, control_set, radius, family):
    b0 = _mat(drift0, (n,), "drift0")
    bx = _mat(drift_x, (n, n), "drift_x")
    bu = _mat(drift_u, (n, m), "control_loading")
    bk = _mat(drift_bilinear, (m, n, n), "drift_bilinear")
    g0 = _mat(diffusion0, (n,), "diffusion0")
    gx = _mat(diffusion_x, (n, n), "diffusion_x")
    gu = _mat(diffusion_u, (n, m), "diffusion_u")
    gk = _mat(diffusion_bilinear, (m, n, n), "diffusion_bilinear")
    s0 = _mat(jump0, (n_marks, n), "jump0")
    sx = _mat(jump_x, (n_marks, n, n), "jump_x")
    su = _mat(jump_u, (n_marks, n, m), "jump_u")
    q = _mat(state_weight, (n, n), "state_weight")
    r = _mat(control_weight if control_weight is not None else np.eye(m), (m, m),
             "control_weight")
    f = _mat(terminal_weight, (n, n), "terminal_weight")
    c = _mat(constraint_vector, (n,), "constraint_vector")
    target = float(target)
    x0 = _mat(initial_state, (n,), "initial_state")
    for label, w in (("state_weight", q), ("control_weight", r), ("terminal_weight", f)):
        if not np.allclose(w, w.T):
            raise ConfigurationError(f"{label} must be symmetric")
    if np.linalg.eigvalsh(r).min() <= 0:
        raise ConfigurationError("control_weight must be positive definite")
    for label, w in (("state_weight", q), ("terminal_weight", f)):
        if np.linalg.eigvalsh(w).min() < -1e-12:
            raise ConfigurationError(f"{label} must be positive semidefinite")
    if control_set is None:
        control_set = ControlSet.unbounded(m)
    bilinear = bool(np.any(bk) or np.any(gk))

    def affine(base, lin, ctl, bil):
        use_lin, use_ctl = bool(np.any(lin)), bool(np.any(ctl))

        def value(t, x, u):
            out = base + (x @ lin.T if use_lin else 0.0 * x)
            if use_ctl:
                out = out + u @ ctl.T
            else:
                out = out + 0.0 * u[..., :1]
            if bil is not None:
                out = out + np.einsum("...j,jab,...b->...a", u, bil, x)
            return out

        def d_x(t, x, u):
            if bil is None:
                return _bcast(lin, _lead(x, u), lin.shape)
            return lin + np.einsum("...j,jab->...ab", u, bil)

        def d_u(t, x, u):
            if bil is None:
                return _bcast(ctl, _lead(x, u), ctl.shape)
            return ctl + np.einsum("jab,...b->...aj", bil, x)

        return value, d_x, d_u

    drift, drift_dx, drift_du = affine(b0, bx, bu, bk if np.any(bk) else None)
    diff, diff_dx, diff_du = affine(g0, gx, gu, gk if np.any(gk) else None)
    jump_state, jump_control = bool(np.any(sx)), bool(np.any(su))

    def jump(t, e, x, u):
        lead = _lead(x, u)
        out = np.broadcast_to(s0, lead + s0.shape)
        if jump_state:
            out = out + np.einsum("iab,...b->...ia", sx, x)
        if jump_control:
            out = out + np.einsum("iaj,...j->...ia", su, u)
        return out

    def jump_dx(t, e, x, u):
        return _bcast(sx, _lead(x, u), sx.shape)

    def jump_du(t, e, x, u):
        return _bcast(su, _lead(x, u), su.shape)

    def running(t, x, u):
        return 0.5 * (np.einsum("...a,ab,...b->...", x, q, x)
                      + np.einsum("...a,ab,...b->...", u, r, u))

    def running_dx(t, x, u):
        return _bcast(x @ q, _lead(x, u), (n,))

    def running_du(t, x, u):
        return _bcast(u @ r, _lead(x, u), (m,))

    def terminal(x):
        return 0.5 * np.einsum("...a,ab,...b->...", x, f, x)

    def terminal_dx(x):
        return x @ f

    def constraint(x):
        return x @ c - target

    def constraint_dx(x):
        return np.broadcast_to(c, np.shape(x))

    params = {
        "initial_state": x0, "drift0": b0, "drift_x": bx, "control_loading": bu,
        "diffusion0": g0, "diffusion_x": gx, "diffusion_u": gu,
        "jump0": s0, "jump_x": sx, "jump_u": su,
        "state_weight": q, "control_weight": r, "terminal_weight": f,
        "constraint_vector": c, "target": target,
    }
    if bilinear:
        params["drift_bilinear"] = bk
        params["diffusion_bilinear"] = gk
    return ProblemSpec(
        initial_state=x0, control_dim=m, n_marks=n_marks, control_set=control_set,
        drift=drift, drift_x=drift_dx, drift_u=drift_du,
        diffusion=diff, diffusion_x=diff_dx, diffusion_u=diff_du,
        jump=jump, jump_x=jump_dx, jump_u=jump_du,
        running_cost=running, running_cost_x=running_dx, running_cost_u=running_du,
        terminal_cost=terminal, terminal_cost_x=terminal_dx,
        constraint=constraint, constraint_x=constraint_dx,
        radius=float(radius), family=family, params=params)


def make_lq_problem(space: GalerkinSpace, pair: OperatorPair, *, control_dim: int,
                    n_marks: int = 0, initial_state=None, drift0=None, drift_x=None,
                    control_loading=None, diffusion0=None, diffusion_x=None,
                    diffusion_u=None, jump0=None, jump_x=None, jump_u=None,
                    state_weight=None, control_weight=None, terminal_weight=None,
                    constraint_vector=None, target=0.0, control_set=None,
                    radius=DEFAULT_RADIUS) -> ProblemSpec:
    """Linear dynamics, quadratic costs, affine terminal constraint.

    ``drift = drift0 + drift_x x + control_loading u``; diffusion and jump
    coefficients are affine in the same way (control-free unless
    ``diffusion_u`` / ``jump_u`` are given).  Costs are
    ``0.5 (x'Qx + u'Ru)`` and ``0.5 x'Fx``; the constraint is
    ``(c, x)_H - target``.  Omitted matrices are zero, except ``R = I``.
    """
    if pair.dim != space.dim:
        raise ConfigurationError("operator pair and space dimensions differ")
    n = space.dim
    if initial_state is None:
        initial_state = np.zeros(n)
    return _build_quadratic_family(
        n, control_dim, n_marks, initial_state=initial_state, drift0=drift0,
        drift_x=drift_x, drift_u=control_loading, drift_bilinear=None,
        diffusion0=diffusion0, diffusion_x=diffusion_x, diffusion_u=diffusion_u,
        diffusion_bilinear=None, jump0=jump0, jump_x=jump_x, jump_u=jump_u,
        state_weight=state_weight, control_weight=control_weight,
        terminal_weight=terminal_weight, constraint_vector=constraint_vector,
        target=target, control_set=control_set, radius=radius, family="lq")


def make_bilinear_problem(space: GalerkinSpace, pair: OperatorPair, *, control_dim: int,
                          drift_bilinear=None, diffusion_bilinear=None,
                          **kwargs) -> ProblemSpec:
    """LQ family plus control-state products ``sum_j u_j K_j x`` in drift and diffusion."""
    if pair.dim != space.dim:
        raise ConfigurationError("operator pair and space dimensions differ")
    n = space.dim
    kw = dict(n_marks=0, initial_state=np.zeros(n), drift0=None, drift_x=None,
              control_loading=None, diffusion0=None, diffusion_x=None, diffusion_u=None,
              jump0=None, jump_x=None, jump_u=None, state_weight=None,
              control_weight=None, terminal_weight=None, constraint_vector=None,
              target=0.0, control_set=None, radius=DEFAULT_RADIUS)
    unknown = set(kwargs) - set(kw)
    if unknown:
        raise ConfigurationError(f"unknown bilinear parameters: {sorted(unknown)}")
    kw.update(kwargs)
    n_marks = kw.pop("n_marks")
    loading = kw.pop("control_loading")
    return _build_quadratic_family(
        n, control_dim, n_marks, drift_u=loading, drift_bilinear=drift_bilinear,
        diffusion_bilinear=diffusion_bilinear, family="bilinear", **kw)


def random_lq_problem(space: GalerkinSpace, pair: OperatorPair, control_dim: int,
                      n_marks: int, seed, *, scale: float = 0.3) -> ProblemSpec:
    """A seeded member of the LQ family with bounded random coefficients."""
    rng = np.random.default_rng(seed)
    n, m = space.dim, control_dim
    k = np.arange(1, n + 1)
    decay = 1.0 / k
    return make_lq_problem(
        space, pair, control_dim=m, n_marks=n_marks,
        initial_state=rng.uniform(-1, 1, n) * decay,
        drift0=scale * rng.uniform(-1, 1, n) * decay,
        drift_x=scale * rng.uniform(-1, 1, (n, n)) / np.sqrt(n),
        control_loading=rng.uniform(-1, 1, (n, m)) * decay[:, None],
        diffusion0=scale * rng.uniform(0.2, 1, n) * decay,
        diffusion_x=0.5 * scale * rng.uniform(-1, 1, (n, n)) / np.sqrt(n),
        jump0=scale * rng.uniform(-1, 1, (n_marks, n)) * decay,
        jump_x=0.5 * scale * rng.uniform(-1, 1, (n_marks, n, n)) / np.sqrt(n),
        state_weight=np.diag(rng.uniform(0.1, 1.0, n)),
        control_weight=np.diag(rng.uniform(0.5, 1.5, m)),
        terminal_weight=np.diag(rng.uniform(0.1, 1.0, n)),
        constraint_vector=rng.uniform(-1, 1, n) * decay, target=0.1)


def zero_problem(n: int, m: int, n_marks: int = 0) -> ProblemSpec:
    """Every coefficient and cost identically zero."""
    return _build_quadratic_family(
        n, m, n_marks, initial_state=np.zeros(n), drift0=None, drift_x=None, drift_u=None,
        drift_bilinear=None, diffusion0=None, diffusion_x=None, diffusion_u=None,
        diffusion_bilinear=None, jump0=None, jump_x=None, jump_u=None,
        state_weight=None, control_weight=np.eye(m), terminal_weight=None,
        constraint_vector=None, target=0.0, control_set=None, radius=DEFAULT_RADIUS,
        family="lq")


# --------------------------------------------------------------------------
# empirical assumption checks

def _probes(spec: ProblemSpec, n_probes: int, seed, horizon: float = 1.0):
    rng = np.random.default_rng(seed)
    t = rng.uniform(0, horizon, n_probes)
    x = rng.standard_normal((n_probes, spec.state_dim))
    u = rng.standard_normal((n_probes, spec.control_dim))
    return t, x, u


def _fd_jacobian(fn, z, h):
    """Central differences of ``fn`` w.r.t. the last axis of ``z`` -> (..., out, dim)."""
    cols = []
    for j in range(z.shape[-1]):
        e = np.zeros(z.shape[-1])
        e[j] = h
        cols.append((fn(z + e) - fn(z - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def _rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8))


def check_partials(spec: ProblemSpec, markspace: MarkSpace, n_probes: int = 100,
                   seed=0, step: float = 1e-5) -> dict:
    """Worst relative error of every supplied partial against central differences."""
    e = markspace.marks
    errs = {}
    for i in range(n_probes):
        t, x, u = (a[i] for a in _probes(spec, n_probes, seed))
        pairs = {
            "drift_x": (spec.drift_x(t, x, u), _fd_jacobian(lambda z: spec.drift(t, z, u), x, step)),
            "drift_u": (spec.drift_u(t, x, u), _fd_jacobian(lambda z: spec.drift(t, x, z), u, step)),
            "diffusion_x": (spec.diffusion_x(t, x, u),
                            _fd_jacobian(lambda z: spec.diffusion(t, z, u), x, step)),
            "diffusion_u": (spec.diffusion_u(t, x, u),
                            _fd_jacobian(lambda z: spec.diffusion(t, x, z), u, step)),
            "running_cost_x": (spec.running_cost_x(t, x, u),
                               _fd_jacobian(lambda z: spec.running_cost(t, z, u), x, step)),
            "running_cost_u": (spec.running_cost_u(t, x, u),
                               _fd_jacobian(lambda z: spec.running_cost(t, x, z), u, step)),
            "terminal_cost_x": (spec.terminal_cost_x(x),
                                _fd_jacobian(spec.terminal_cost, x, step)),
            "constraint_x": (spec.constraint_x(x), _fd_jacobian(spec.constraint, x, step)),
        }
        if spec.n_marks:
            pairs["jump_x"] = (spec.jump_x(t, e, x, u),
                               _fd_jacobian(lambda z: spec.jump(t, e, z, u), x, step))
            pairs["jump_u"] = (spec.jump_u(t, e, x, u),
                               _fd_jacobian(lambda z: spec.jump(t, e, x, z), u, step))
        for name, (a, b) in pairs.items():
            errs[name] = max(errs.get(name, 0.0), _rel_err(a, b))
    return errs


def lipschitz_probe(spec: ProblemSpec, markspace: MarkSpace, n_probes: int = 100,
                    seed=0) -> float:
    """Largest observed ``|f(x) - f(y)| / |x - y|`` over drift, diffusion and jumps."""
    rng = np.random.default_rng(seed)
    t, x, u = _probes(spec, n_probes, seed)
    y = x + rng.standard_normal(x.shape)
    dist = np.linalg.norm(x - y, axis=1)
    ratios = []
    for f in (spec.drift, spec.diffusion):
        ratios.append(np.linalg.norm(f(t[:, None], x, u) - f(t[:, None], y, u), axis=-1) / dist)
    if spec.n_marks:
        e = markspace.marks
        dj = spec.jump(t[:, None, None], e, x, u) - spec.jump(t[:, None, None], e, y, u)
        ratios.append(np.sqrt(np.sum(markspace.intensities[:, None] * dj ** 2, axis=(-2, -1))) / dist)
    return float(max(np.max(r) for r in ratios))


def growth_probe(spec: ProblemSpec, n_probes: int = 100, seed=0) -> dict:
    """Smallest constants consistent with the quadratic/linear growth bounds on the probes."""
    t, x, u = _probes(spec, n_probes, seed)
    x2 = np.sum(x * x, axis=1)
    u2 = np.sum(u * u, axis=1)
    nx, nu = np.sqrt(x2), np.sqrt(u2)
    tt = t[:, None]
    lx = np.linalg.norm(spec.running_cost_x(tt, x, u), axis=-1)
    lu = np.linalg.norm(spec.running_cost_u(tt, x, u), axis=-1)
    return {
        "running_cost": float(np.max(np.abs(spec.running_cost(tt, x, u)) / (1 + x2 + u2))),
        "running_cost_grad": float(np.max((lx + lu) / (1 + nx + nu))),
        "terminal_cost": float(np.max(np.abs(spec.terminal_cost(x)) / (1 + x2))),
        "constraint": float(np.max(np.abs(spec.constraint(x)) / (1 + x2))),
        "terminal_cost_grad": float(np.max(np.linalg.norm(spec.terminal_cost_x(x), axis=-1) / (1 + nx))),
        "constraint_grad": float(np.max(np.linalg.norm(spec.constraint_x(x), axis=-1) / (1 + nx))),
    }
