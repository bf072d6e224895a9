"""Backward sweep for the linear adjoint equation and the duality check.

The sweep is the exact discrete adjoint of the forward scheme.  For
k = n-1, ..., 0::

    y_k        = (I - dt A_k)^{-T} p_{k+1}
    yhat_k     = E[y_k | X_k]
    q_k        = E[(y_k - yhat_k) dW_k | X_k] / dt
    r_{k,i}    = E[(y_k - yhat_k) (dN_{k,i} - nu_i dt) | X_k] / (nu_i dt)
    p_k        = yhat_k + dt (B_k^T q_k + H_x(t_k, X_k, u_k, yhat_k, q_k, r_k))

with terminal value ``p_n = lam * Phi_x(X_n) + mu * phi_x(X_n)``.  The
conditional expectations are least-squares regressions on polynomial
features of ``X_k``.
"""
from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from ._parallel import chunked_map, mean_and_stderr, tree_sum
from .errors import ConfigurationError, PreconditionError
from .forward import StatePath, StepOperator
from .gelfand import GalerkinSpace, OperatorPair
from .hamiltonian import hamiltonian, hamiltonian_u, hamiltonian_x
from .noise import MarkSpace
from .problem import ControlProcess, ProblemSpec

RIDGE = 1e-10
COND_WARN = 1e9


@dataclass(frozen=True)
class Multipliers:
    lam: float
    mu: float
    degenerate: bool = False

    def norm_sq(self) -> float:
        return self.lam * self.lam + self.mu * self.mu

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "mu": self.mu, "degenerate": self.degenerate}


@dataclass(frozen=True)
class RegressionSpec:
    degree: int = 1
    ridge: float = RIDGE

    def __post_init__(self):
        if self.degree not in (0, 1, 2):
            raise ConfigurationError(f"regression degree must be 0, 1 or 2, got {self.degree}")
        if self.ridge < 0:
            raise ConfigurationError("ridge must be nonnegative")


@dataclass(frozen=True, eq=False)
class AdjointTriple:
    p: np.ndarray        # (paths, steps + 1, N)
    p_hat: np.ndarray    # (paths, steps, N): E[y_k | X_k]
    q: np.ndarray        # (paths, steps, N)
    r: np.ndarray        # (paths, steps, marks, N)
    multipliers: Multipliers
    warnings: list = field(default_factory=list)


def _features(x: np.ndarray, degree: int) -> np.ndarray:
    """Polynomial features of ``x`` without the constant column."""
    if degree == 0:
        return np.zeros((x.shape[0], 0))
    cols = [x]
    if degree == 2:
        n = x.shape[1]
        cols.append(np.stack([x[:, i] * x[:, j] for i, j in
                              itertools.combinations_with_replacement(range(n), 2)], axis=1))
    return np.concatenate(cols, axis=1)


def _ordered_sum(a: np.ndarray) -> np.ndarray:
    """Sum over axis 0: chunk sums, then a fixed pairwise tree over chunks."""
    parts = chunked_map(lambda lo, hi: np.sum(a[lo:hi], axis=0), a.shape[0])
    return tree_sum(np.stack(parts))


def _ordered_gram(f: np.ndarray, t: np.ndarray):
    parts = chunked_map(lambda lo, hi: (f[lo:hi].T @ f[lo:hi], f[lo:hi].T @ t[lo:hi]),
                        f.shape[0])
    return tree_sum(np.stack([g for g, _ in parts])), tree_sum(np.stack([c for _, c in parts]))


class Regressor:
    """Least-squares conditional expectation given ``X_k``.

    Features are centred and scaled; constant columns are dropped, so a
    degenerate (deterministic) state collapses to the sample mean.  The
    fitted values always have exactly the sample mean of the target.
    """

    def __init__(self, x: np.ndarray, spec: RegressionSpec):
        self.n = x.shape[0]
        self.spec = spec
        self.warning = None
        f = _features(x, spec.degree)
        if f.shape[1]:
            mean = _ordered_sum(f) / self.n
            fc = f - mean
            scale = np.sqrt(_ordered_sum(fc * fc) / self.n)
            keep = scale > 1e-12 * np.maximum(1.0, np.abs(mean))
            fc = fc[:, keep] / scale[keep]
        else:
            fc = f
        self.fc = fc
        self._solve = None

    def fit(self, target: np.ndarray) -> np.ndarray:
        """Fitted values for every column of ``target`` (paths, k)."""
        mean = _ordered_sum(target) / self.n
        if self.fc.shape[1] == 0:
            return np.broadcast_to(mean, target.shape).copy()
        if self._solve is None:
            gram, _ = _ordered_gram(self.fc, np.zeros((self.n, 0)))
            gram = gram / self.n + self.spec.ridge * np.eye(gram.shape[0])
            cond = np.linalg.cond(gram)
            if cond > COND_WARN:
                self.warning = f"ill-conditioned regression design (cond {cond:.2e})"
            self._solve = cho_factor(gram)
        _, cross = _ordered_gram(self.fc, target - mean)
        coef = cho_solve(self._solve, cross / self.n)
        return mean + self.fc @ coef


def _terminal(spec: ProblemSpec, x_n: np.ndarray, mult: Multipliers) -> np.ndarray:
    return mult.lam * spec.terminal_cost_x(x_n) + mult.mu * spec.constraint_x(x_n)


@dataclass
class SweepStep:
    k: int
    p_next: np.ndarray
    p_hat: np.ndarray
    q: np.ndarray
    r: np.ndarray
    p: np.ndarray


def backward_sweep(spec: ProblemSpec, pair: OperatorPair, paths: StatePath,
                   control: ControlProcess, multipliers: Multipliers,
                   regression: RegressionSpec = RegressionSpec(), driver_shift=None,
                   messages: list | None = None):
    """Yield one :class:`SweepStep` per step, from ``k = n - 1`` down to 0.

    ``driver_shift(k, x)`` (or a constant N-vector) is added to ``H_x``;
    it is used only by perturbation studies.
    """
    spec.check_compatible(pair, paths.noise.markspace)
    if control.n_steps != paths.grid.n_steps:
        raise ConfigurationError("paths and control are on different grids")
    grid = paths.grid
    dt = grid.dt
    noise = paths.noise
    ms = noise.markspace
    n_marks = ms.size
    step_op = StepOperator(pair, grid)
    x = paths.states
    p_next = np.asarray(_terminal(spec, x[:, -1], multipliers), dtype=float)
    if p_next.shape != x[:, -1].shape:
        raise ConfigurationError("terminal gradient shape differs from state shape")
    lam = multipliers.lam
    for k in range(grid.n_steps - 1, -1, -1):
        t = k * dt
        xk = x[:, k]
        u = control.values[k]
        y = step_op.solve_transposed(k, p_next)
        reg = Regressor(xk, regression)
        p_hat = reg.fit(y)
        # The fitted mean is a control variate: E[dW | X_k] = 0, so
        # subtracting it leaves q and r unbiased and makes them vanish
        # exactly when y is deterministic.
        resid = y - p_hat
        targets = [resid * noise.dw[:, k, None]]
        if n_marks:
            comp = noise.jumps[:, k] - ms.intensities * dt
            targets += [resid * comp[:, i, None] for i in range(n_marks)]
        fitted = reg.fit(np.concatenate(targets, axis=1))
        if reg.warning and messages is not None:
            messages.append(f"step {k}: {reg.warning}")
        n = spec.state_dim
        q = fitted[:, :n] / dt
        r = np.stack([fitted[:, (1 + i) * n:(2 + i) * n] / (ms.intensities[i] * dt)
                      for i in range(n_marks)], axis=1) if n_marks else np.zeros((xk.shape[0], 0, n))
        hx = hamiltonian_x(spec, ms, t, xk, u, p_hat, q, r, lam)
        if driver_shift is not None:
            hx = hx + (driver_shift(k, xk) if callable(driver_shift) else driver_shift)
        p = p_hat + dt * (q @ pair.diffusion_at(k) + hx)
        yield SweepStep(k, p_next, p_hat, q, r, p)
        p_next = p


def solve_adjoint(spec: ProblemSpec, pair: OperatorPair, space: GalerkinSpace,
                  paths: StatePath, control: ControlProcess, multipliers: Multipliers,
                  regression: RegressionSpec = RegressionSpec(),
                  driver_shift=None) -> AdjointTriple:
    if space.dim != spec.state_dim:
        raise ConfigurationError("space dimension differs from state dimension")
    n_paths, n1, dim = paths.states.shape
    n_steps = n1 - 1
    m = paths.noise.markspace.size
    p = np.empty((n_paths, n1, dim))
    p_hat = np.empty((n_paths, n_steps, dim))
    q = np.empty((n_paths, n_steps, dim))
    r = np.empty((n_paths, n_steps, m, dim))
    msgs: list = []
    for st in backward_sweep(spec, pair, paths, control, multipliers, regression,
                             driver_shift, msgs):
        if st.k == n_steps - 1:
            p[:, n_steps] = st.p_next
        p[:, st.k] = st.p
        p_hat[:, st.k] = st.p_hat
        q[:, st.k] = st.q
        r[:, st.k] = st.r
    if msgs:
        # one summary per solve; the per-step messages stay on the triple
        warnings.warn(f"ridge-regularised regression at {len(msgs)} of {n_steps} steps "
                      f"({msgs[0]})", RuntimeWarning, stacklevel=2)
    for a in (p, p_hat, q, r):
        a.setflags(write=False)
    return AdjointTriple(p, p_hat, q, r, multipliers, msgs)


def mean_hamiltonian_u(spec: ProblemSpec, pair: OperatorPair, paths: StatePath,
                       control: ControlProcess, multipliers: Multipliers,
                       regression: RegressionSpec = RegressionSpec()) -> np.ndarray:
    """Per-step ensemble mean of ``H_u`` (steps, m), without storing the triple."""
    ms = paths.noise.markspace
    dt = paths.grid.dt
    out = np.empty((control.n_steps, control.dim))
    for st in backward_sweep(spec, pair, paths, control, multipliers, regression):
        hu = hamiltonian_u(spec, ms, st.k * dt, paths.states[:, st.k], control.values[st.k],
                           st.p_hat, st.q, st.r, multipliers.lam)
        out[st.k] = _ordered_sum(np.broadcast_to(hu, (paths.n_paths, control.dim))) / paths.n_paths
    return out


# --------------------------------------------------------------------------
# duality

@dataclass(frozen=True)
class DualityReport:
    lhs: float
    rhs: float
    gap: float
    stderr: float
    allowance: float
    scale: float

    @property
    def passed(self) -> bool:
        return abs(self.gap) <= max(3.0 * self.stderr, self.allowance)

    def to_dict(self) -> dict:
        return {"lhs": self.lhs, "rhs": self.rhs, "gap": self.gap, "stderr": self.stderr,
                "allowance": self.allowance, "scale": self.scale, "passed": self.passed}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def duality_check(spec: ProblemSpec, pair: OperatorPair, paths_a: StatePath,
                  paths_b: StatePath, adjoint: AdjointTriple, control_a: ControlProcess,
                  control_b: ControlProcess, fd_step: float = 1e-6) -> DualityReport:
    """Compare both sides of the discrete Ito duality identity.

    ``lhs = E sum_k dt [(yhat, db) + (q, dg) + sum_i nu_i (r_i, ds_i)]`` and
    ``rhs = E sum_k dt (H_x, dX_k) + E (p_n, dX_n)``.  The ``(H_x, dX)``
    term is a central difference of the Hamiltonian along ``dX``, so it
    does not reuse the supplied partials.  ``allowance`` is the gap
    obtained when ``yhat`` is replaced by ``p_k`` in ``lhs``, an O(dt)
    discretisation ambiguity.
    """
    if not paths_a.noise.same_as(paths_b.noise):
        raise PreconditionError("duality check requires both runs to share one noise bundle")
    grid = paths_a.grid
    if control_a.n_steps != grid.n_steps or control_b.n_steps != grid.n_steps:
        raise ConfigurationError("controls and paths are on different grids")
    dt = grid.dt
    ms = paths_a.noise.markspace
    lam, mu = adjoint.multipliers.lam, adjoint.multipliers.mu
    xa, xb = paths_a.states, paths_b.states
    n_paths = xa.shape[0]
    lhs = np.zeros(n_paths)
    lhs_alt = np.zeros(n_paths)
    rhs = np.zeros(n_paths)
    for k in range(grid.n_steps):
        t = k * dt
        a, b = xa[:, k], xb[:, k]
        ua, ub = control_a.values[k], control_b.values[k]
        db = spec.drift(t, b, ub) - spec.drift(t, a, ua)
        dg = spec.diffusion(t, b, ub) - spec.diffusion(t, a, ua)
        ph, q, r = adjoint.p_hat[:, k], adjoint.q[:, k], adjoint.r[:, k]
        common = np.sum(q * dg, axis=1)
        if spec.n_marks:
            ds = spec.jump(t, ms.marks, b, ub) - spec.jump(t, ms.marks, a, ua)
            common = common + np.einsum("m,pmi,pmi->p", ms.intensities, ds, r)
        lhs += dt * (np.sum(ph * db, axis=1) + common)
        lhs_alt += dt * (np.sum(adjoint.p[:, k] * db, axis=1) + common)
        d = b - a
        h_plus = hamiltonian(spec, ms, t, a + fd_step * d, ua, ph, q, r, lam)
        h_minus = hamiltonian(spec, ms, t, a - fd_step * d, ua, ph, q, r, lam)
        rhs += dt * (h_plus - h_minus) / (2 * fd_step)
    d_n = xb[:, -1] - xa[:, -1]
    rhs += np.sum((lam * spec.terminal_cost_x(xa[:, -1])
                   + mu * spec.constraint_x(xa[:, -1])) * d_n, axis=1)
    l_mean, _ = mean_and_stderr(lhs)
    r_mean, _ = mean_and_stderr(rhs)
    gap_mean, gap_se = mean_and_stderr(lhs - rhs)
    alt_mean, _ = mean_and_stderr(lhs_alt - rhs)
    scale = max(abs(l_mean), abs(r_mean))
    return DualityReport(l_mean, r_mean, gap_mean, gap_se, abs(alt_mean), scale)


# --------------------------------------------------------------------------
# empirical estimates for the backward equation

def adjoint_norms(adj: AdjointTriple, markspace: MarkSpace, dt: float) -> dict:
    """``sup_k E|p_k|^2``, ``sum dt E|q|^2`` and ``sum dt sum_i nu_i E|r_i|^2``."""
    p2 = max(float(_ordered_sum(np.sum(adj.p[:, k] ** 2, axis=1))) / adj.p.shape[0]
             for k in range(adj.p.shape[1]))
    q2 = dt * float(_ordered_sum(np.sum(adj.q ** 2, axis=(1, 2)))) / adj.q.shape[0]
    if markspace.size:
        r2 = dt * float(_ordered_sum(np.einsum("m,pkmi->p", markspace.intensities,
                                               adj.r ** 2))) / adj.r.shape[0]
    else:
        r2 = 0.0
    return {"p": p2, "q": q2, "r": r2}


def adjoint_apriori(spec: ProblemSpec, adj: AdjointTriple, paths: StatePath,
                    control: ControlProcess) -> dict:
    """Empirical constant ``sup_k E|p_k|^2 / (E|p_n|^2 + sum dt E|H_x^0|^2)``.

    ``H_x^0`` is the driver's free term ``lam * l_x``: the part of ``H_x``
    that does not depend on the adjoint itself.
    """
    dt = paths.grid.dt
    ms = paths.noise.markspace
    norms = adjoint_norms(adj, ms, dt)
    p_n = float(_ordered_sum(np.sum(adj.p[:, -1] ** 2, axis=1))) / adj.p.shape[0]
    drv = 0.0
    for k in range(paths.grid.n_steps):
        lx = adj.multipliers.lam * spec.running_cost_x(k * dt, paths.states[:, k],
                                                       control.values[k])
        lx = np.broadcast_to(lx, paths.states[:, k].shape)
        drv += dt * float(_ordered_sum(np.sum(lx ** 2, axis=1))) / adj.p.shape[0]
    data = p_n + drv
    lhs = norms["p"] + norms["q"] + norms["r"]
    if data == 0.0:
        return {"lhs": lhs, "rhs": 0.0, "ratio": 0.0 if lhs == 0 else np.inf}
    return {"lhs": lhs, "rhs": data, "ratio": lhs / data}


def adjoint_difference(a: AdjointTriple, b: AdjointTriple, markspace: MarkSpace,
                       dt: float) -> float:
    """Ensemble norm of ``(p, q, r)`` differences."""
    diff = AdjointTriple(a.p - b.p, a.p_hat - b.p_hat, a.q - b.q, a.r - b.r, a.multipliers)
    n = adjoint_norms(diff, markspace, dt)
    return float(np.sqrt(n["p"] + n["q"] + n["r"]))


def adjoint_dependence(spec: ProblemSpec, pair: OperatorPair, space: GalerkinSpace,
                       paths: StatePath, control: ControlProcess, multipliers: Multipliers,
                       direction, deltas=(1e-1, 1e-2, 1e-3),
                       regression: RegressionSpec = RegressionSpec()) -> dict:
    """Ratios ``|(p,q,r)^delta - (p,q,r)| / delta`` for a driver shift ``delta * direction``."""
    base = solve_adjoint(spec, pair, space, paths, control, multipliers, regression)
    direction = np.asarray(direction, dtype=float)
    ratios = []
    for d in deltas:
        pert = solve_adjoint(spec, pair, space, paths, control, multipliers, regression,
                             driver_shift=d * direction)
        ratios.append(adjoint_difference(pert, base, paths.noise.markspace, paths.grid.dt) / d)
    return {"deltas": list(deltas), "ratios": ratios}


__all__ = [
    "Multipliers", "RegressionSpec", "AdjointTriple", "Regressor", "backward_sweep",
    "solve_adjoint", "mean_hamiltonian_u",
    "DualityReport", "duality_check", "adjoint_norms", "adjoint_apriori",
    "adjoint_difference", "adjoint_dependence",
]
