"""Reference solutions that do not share code paths with the Monte-Carlo solvers.

All routines here work on the linear-quadratic family and use its matrices
directly (``spec.params``), never the coefficient callbacks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import minimize

from .errors import PreconditionError
from .gelfand import OperatorPair
from .noise import MarkSpace, TimeGrid
from .problem import ControlProcess, ControlSet, ProblemSpec


def _lq(spec: ProblemSpec) -> dict:
    if spec.family != "lq":
        raise PreconditionError(f"oracle needs the LQ family, got '{spec.family}'")
    return spec.params


def _require_additive(par: dict, pair: OperatorPair) -> None:
    if (np.any(pair.linear_diffusion) or np.any(par["diffusion_x"]) or np.any(par["diffusion_u"])
            or np.any(par["jump_x"]) or np.any(par["jump_u"])):
        raise PreconditionError(
            "the mean-system oracle is exact only for additive, control-free noise")


def _step_matrices(pair: OperatorPair, grid: TimeGrid, k: int):
    """``M_k^{-1}`` with ``M_k = I - dt A_k``."""
    n = pair.dim
    return np.linalg.inv(np.eye(n) - grid.dt * pair.drift_at(k))


# --------------------------------------------------------------------------
# deterministic-equivalent quadratic program

@dataclass(frozen=True)
class MeanSystemQP:
    hessian: np.ndarray       # (n m, n m)
    linear: np.ndarray        # (n m,)
    constant: float
    cons_row: np.ndarray      # (n m,)
    cons_offset: float        # constraint = cons_row . u + cons_offset
    free_states: np.ndarray   # (n + 1, N) mean states under u = 0
    response: np.ndarray      # (n + 1, N, n m)
    n_steps: int
    control_dim: int

    def mean_cost(self, u_flat) -> float:
        return float(0.5 * u_flat @ self.hessian @ u_flat + self.linear @ u_flat + self.constant)

    def mean_constraint(self, u_flat) -> float:
        return float(self.cons_row @ u_flat + self.cons_offset)

    def mean_states(self, u_flat) -> np.ndarray:
        return self.free_states + self.response @ u_flat


def mean_system_qp(spec: ProblemSpec, pair: OperatorPair, grid: TimeGrid) -> MeanSystemQP:
    """Mean cost and constraint of the discrete scheme as exact functions of the control.

    With additive noise the state mean obeys the noise-free recursion and the
    state covariance does not depend on the control, so minimising the
    returned quadratic is equivalent to minimising the expected cost.
    """
    par = _lq(spec)
    _require_additive(par, pair)
    n_steps, dt = grid.n_steps, grid.dt
    n, m = spec.state_dim, spec.control_dim
    nm = n_steps * m
    bx, bu, b0 = par["drift_x"], par["control_loading"], par["drift0"]
    q, r, f = par["state_weight"], par["control_weight"], par["terminal_weight"]
    free = np.empty((n_steps + 1, n))
    resp = np.zeros((n_steps + 1, n, nm))
    free[0] = par["initial_state"]
    for k in range(n_steps):
        minv = _step_matrices(pair, grid, k)
        prop = minv @ (np.eye(n) + dt * bx)
        free[k + 1] = prop @ free[k] + dt * minv @ b0
        resp[k + 1] = prop @ resp[k]
        resp[k + 1][:, k * m:(k + 1) * m] += dt * minv @ bu
    hess = np.zeros((nm, nm))
    lin = np.zeros(nm)
    const = 0.0
    for k in range(n_steps):
        s = resp[k]
        hess += dt * s.T @ q @ s
        lin += dt * s.T @ q @ free[k]
        const += 0.5 * dt * free[k] @ q @ free[k]
        hess[k * m:(k + 1) * m, k * m:(k + 1) * m] += dt * r
    s = resp[n_steps]
    hess += s.T @ f @ s
    lin += s.T @ f @ free[n_steps]
    const += 0.5 * free[n_steps] @ f @ free[n_steps]
    c = par["constraint_vector"]
    return MeanSystemQP(0.5 * (hess + hess.T), lin, float(const), s.T @ c,
                        float(c @ free[n_steps] - par["target"]), free, resp, n_steps, m)


@dataclass(frozen=True)
class KKTSolution:
    control: ControlProcess
    multiplier: float
    mean_cost: float
    mean_constraint: float


def kkt_control(spec: ProblemSpec, pair: OperatorPair, grid: TimeGrid,
                constrained: bool = True, control_set: ControlSet | None = None) -> KKTSolution:
    """Minimiser of the mean-system QP, with ``E phi(X_T) = 0`` if ``constrained``.

    Without active bounds this is one linear KKT solve; if the box binds,
    SLSQP on the same QP from the unbounded solution.
    """
    qp = mean_system_qp(spec, pair, grid)
    cset = control_set or spec.control_set
    nm = qp.hessian.shape[0]
    if constrained:
        kkt = np.zeros((nm + 1, nm + 1))
        kkt[:nm, :nm] = qp.hessian
        kkt[:nm, nm] = qp.cons_row
        kkt[nm, :nm] = qp.cons_row
        sol = np.linalg.solve(kkt, np.concatenate([-qp.linear, [-qp.cons_offset]]))
        u, kappa = sol[:nm], float(sol[nm])
    else:
        u, kappa = np.linalg.solve(qp.hessian, -qp.linear), 0.0
    lo = np.tile(cset.lower, qp.n_steps)
    hi = np.tile(cset.upper, qp.n_steps)
    if np.any(u < lo - 1e-12) or np.any(u > hi + 1e-12):
        cons = ([{"type": "eq", "fun": qp.mean_constraint, "jac": lambda z: qp.cons_row}]
                if constrained else [])
        res = minimize(qp.mean_cost, np.clip(u, lo, hi),
                       jac=lambda z: qp.hessian @ z + qp.linear,
                       bounds=list(zip(lo, hi)), constraints=cons, method="SLSQP",
                       options={"ftol": 1e-14, "maxiter": 1000})
        u = res.x
        if constrained:
            g = qp.hessian @ u + qp.linear
            free_idx = (u > lo + 1e-9) & (u < hi - 1e-9)
            a = qp.cons_row[free_idx]
            kappa = float(-(a @ g[free_idx]) / (a @ a)) if a @ a > 0 else 0.0
    ctrl = ControlProcess(u.reshape(qp.n_steps, qp.control_dim), grid.dt, spec.radius)
    return KKTSolution(ctrl, kappa, qp.mean_cost(u), qp.mean_constraint(u))


# --------------------------------------------------------------------------
# dynamic programming on the mean system

def discrete_riccati_control(spec: ProblemSpec, pair: OperatorPair,
                             grid: TimeGrid) -> ControlProcess:
    """Unconstrained optimal control of the mean system by a backward Riccati recursion."""
    par = _lq(spec)
    _require_additive(par, pair)
    n_steps, dt = grid.n_steps, grid.dt
    n = spec.state_dim
    q, r, f = par["state_weight"], par["control_weight"], par["terminal_weight"]
    trans, load, shift = [], [], []
    for k in range(n_steps):
        minv = _step_matrices(pair, grid, k)
        trans.append(minv @ (np.eye(n) + dt * par["drift_x"]))
        load.append(dt * minv @ par["control_loading"])
        shift.append(dt * minv @ par["drift0"])
    p_mat, s_vec = f.copy(), np.zeros(n)
    gains, offsets = [None] * n_steps, [None] * n_steps
    for k in range(n_steps - 1, -1, -1):
        a, b, c = trans[k], load[k], shift[k]
        h = dt * r + b.T @ p_mat @ b
        gain = np.linalg.solve(h, b.T @ p_mat @ a)
        off = np.linalg.solve(h, b.T @ (p_mat @ c + s_vec))
        gains[k], offsets[k] = gain, off
        closed = a - b @ gain
        s_vec = dt * gain.T @ r @ off + closed.T @ (p_mat @ (c - b @ off) + s_vec)
        p_mat = dt * q + a.T @ p_mat @ closed
        p_mat = 0.5 * (p_mat + p_mat.T)
    x = par["initial_state"].copy()
    u = np.empty((n_steps, spec.control_dim))
    for k in range(n_steps):
        u[k] = -(gains[k] @ x + offsets[k])
        x = trans[k] @ x + load[k] @ u[k] + shift[k]
    return ControlProcess(u, dt, spec.radius)



def _const_drift(pair: OperatorPair) -> np.ndarray:
    if pair.linear_drift.ndim != 2 or pair.linear_diffusion.ndim != 2:
        raise PreconditionError("continuous-time oracles need time-constant operators")
    return pair.linear_drift


def riccati_ode_control(spec: ProblemSpec, pair: OperatorPair, grid: TimeGrid,
                        rtol: float = 1e-10, atol: float = 1e-12) -> ControlProcess:
    """Unconstrained continuous-time optimal control sampled at the left grid points.

    Solves ``-P' = At^T P + P At + Q - P D R^{-1} D^T P``, ``P(T) = F`` and the
    offset equation ``-s' = (At - D R^{-1} D^T P)^T s + P b0``, ``s(T) = 0``
    with ``At = A + drift_x``, then integrates the closed-loop mean state.
    Agrees with the discrete optimum to O(dt).
    """
    par = _lq(spec)
    _require_additive(par, pair)
    a_tot = _const_drift(pair) + par["drift_x"]
    d, b0 = par["control_loading"], par["drift0"]
    q, r, f = par["state_weight"], par["control_weight"], par["terminal_weight"]
    rinv_dt = np.linalg.solve(r, d.T)
    n = spec.state_dim
    horizon = grid.horizon

    def backward(t, z):
        p = z[:n * n].reshape(n, n)
        s = z[n * n:]
        dp = -(a_tot.T @ p + p @ a_tot + q - p @ d @ rinv_dt @ p)
        ds = -((a_tot - d @ rinv_dt @ p).T @ s + p @ b0)
        return np.concatenate([dp.ravel(), ds])

    z_end = np.concatenate([f.ravel(), np.zeros(n)])
    sol = solve_ivp(backward, (horizon, 0.0), z_end, method="LSODA", rtol=rtol, atol=atol,
                    dense_output=True)

    def closed_loop(t, x):
        z = sol.sol(t)
        p, s = z[:n * n].reshape(n, n), z[n * n:]
        u = -rinv_dt @ (p @ x + s)
        return a_tot @ x + b0 + d @ u

    fwd = solve_ivp(closed_loop, (0.0, horizon), par["initial_state"], method="LSODA",
                    rtol=rtol, atol=atol, t_eval=grid.times[:-1])
    u = np.empty((grid.n_steps, spec.control_dim))
    for k, t in enumerate(grid.times[:-1]):
        z = sol.sol(t)
        p, s = z[:n * n].reshape(n, n), z[n * n:]
        u[k] = -rinv_dt @ (p @ fwd.y[:, k] + s)
    return ControlProcess(u, grid.dt, spec.radius)


@dataclass(frozen=True)
class FeedbackAdjoint:
    """``p_k ~ gain[k] @ X_k + offset[k]`` for ``k = 0..n``."""

    gain: np.ndarray      # (n + 1, N, N)
    offset: np.ndarray    # (n + 1, N)

    def evaluate(self, states: np.ndarray) -> np.ndarray:
        """Apply the representation to an ensemble (paths, steps + 1, N)."""
        return np.einsum("kij,pkj->pki", self.gain, states) + self.offset


def _lq_noise_matrices(spec: ProblemSpec, pair: OperatorPair):
    par = _lq(spec)
    if np.any(par["diffusion_u"]) or np.any(par["jump_u"]):
        raise PreconditionError("feedback oracle needs control-free noise coefficients")
    return par


def discrete_feedback_adjoint(spec: ProblemSpec, pair: OperatorPair, grid: TimeGrid,
                              markspace: MarkSpace, control: ControlProcess,
                              lam: float, mu: float) -> FeedbackAdjoint:
    """Affine-in-state form of the scheme's adjoint, from a backward matrix recursion.

    Exact for the discrete sweep whenever its conditional expectations are
    exact; multiplicative noise (``B``, ``diffusion_x``, ``jump_x``) allowed.
    """
    par = _lq_noise_matrices(spec, pair)
    n_steps, dt = grid.n_steps, grid.dt
    n = spec.state_dim
    nu = markspace.intensities
    eye = np.eye(n)
    gain = np.empty((n_steps + 1, n, n))
    off = np.empty((n_steps + 1, n))
    gain[-1] = lam * par["terminal_weight"]
    off[-1] = mu * par["constraint_vector"]
    grow = eye + dt * par["drift_x"]
    for k in range(n_steps - 1, -1, -1):
        minv = _step_matrices(pair, grid, k)
        w = minv.T @ gain[k + 1] @ minv
        s_next = minv.T @ off[k + 1]
        b_tot = pair.diffusion_at(k) + par["diffusion_x"]
        g = grow.T @ w @ grow + dt * b_tot.T @ w @ b_tot + dt * lam * par["state_weight"]
        forcing = par["drift0"] + par["control_loading"] @ control.values[k]
        o = grow.T @ (dt * w @ forcing + s_next) + dt * b_tot.T @ w @ par["diffusion0"]
        for i in range(markspace.size):
            sx, s0 = par["jump_x"][i], par["jump0"][i]
            g += dt * nu[i] * sx.T @ w @ sx
            o += dt * nu[i] * sx.T @ w @ s0
        gain[k] = 0.5 * (g + g.T)
        off[k] = o
    return FeedbackAdjoint(gain, off)


def continuous_feedback_adjoint(spec: ProblemSpec, pair: OperatorPair, grid: TimeGrid,
                                markspace: MarkSpace, control: ControlProcess,
                                lam: float, mu: float, rtol: float = 1e-10,
                                atol: float = 1e-12) -> FeedbackAdjoint:
    """Affine-in-state form of the continuous adjoint from the Lyapunov/offset ODEs.

    ``-P' = P At + At^T P + Bt^T P Bt + sum_i nu_i S_i^T P S_i + lam Q``,
    ``P(T) = lam F`` and
    ``-s' = At^T s + P (b0 + D u) + Bt^T P g0 + sum_i nu_i S_i^T P s_i``,
    ``s(T) = mu c``, with ``At = A + drift_x`` and ``Bt = B + diffusion_x``.
    The control is piecewise constant, so each grid interval is integrated
    separately.
    """
    par = _lq_noise_matrices(spec, pair)
    a_tot = _const_drift(pair) + par["drift_x"]
    b_tot = pair.linear_diffusion + par["diffusion_x"]
    nu = markspace.intensities
    n = spec.state_dim
    q, d, b0, g0 = par["state_weight"], par["control_loading"], par["drift0"], par["diffusion0"]

    def rhs_for(u):
        forcing = b0 + d @ u

        def rhs(t, z):
            p = z[:n * n].reshape(n, n)
            s = z[n * n:]
            dp = p @ a_tot + a_tot.T @ p + b_tot.T @ p @ b_tot + lam * q
            ds = a_tot.T @ s + p @ forcing + b_tot.T @ p @ g0
            for i in range(markspace.size):
                sx = par["jump_x"][i]
                dp = dp + nu[i] * sx.T @ p @ sx
                ds = ds + nu[i] * sx.T @ p @ par["jump0"][i]
            return -np.concatenate([dp.ravel(), ds])
        return rhs

    times = grid.times
    gain = np.empty((grid.n_steps + 1, n, n))
    off = np.empty((grid.n_steps + 1, n))
    gain[-1] = lam * par["terminal_weight"]
    off[-1] = mu * par["constraint_vector"]
    z = np.concatenate([gain[-1].ravel(), off[-1]])
    for k in range(grid.n_steps - 1, -1, -1):
        sol = solve_ivp(rhs_for(control.values[k]), (times[k + 1], times[k]), z,
                        method="LSODA", rtol=rtol, atol=atol)
        z = sol.y[:, -1]
        gain[k] = z[:n * n].reshape(n, n)
        off[k] = z[n * n:]
    return FeedbackAdjoint(gain, off)


def deterministic_adjoint_ode(spec: ProblemSpec, pair: OperatorPair, grid: TimeGrid,
                              control: ControlProcess, lam: float, mu: float,
                              substeps: int = 1, rtol: float = 1e-10,
                              atol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free state and adjoint on the grid from fine ODE integration.

    ``x' = A x + drift(t, x, u)`` forward, then
    ``-p' = A^T p + drift_x^T p + lam running_cost_x`` with
    ``p(T) = lam Phi_x + mu phi_x``.  Uses the callbacks, so it applies to any
    problem whose noise coefficients vanish.
    """
    a = _const_drift(pair)
    times = grid.times
    n = spec.state_dim
    states = np.empty((grid.n_steps + 1, n))
    states[0] = spec.initial_state
    pieces = []
    for k in range(grid.n_steps):
        u = control.values[k]
        sol = solve_ivp(lambda t, x: a @ x + spec.drift(t, x, u), (times[k], times[k + 1]),
                        states[k], method="LSODA", rtol=rtol, atol=atol, dense_output=True)
        pieces.append(sol.sol)
        states[k + 1] = sol.y[:, -1]
    adj = np.empty_like(states)
    xn = states[-1]
    adj[-1] = lam * spec.terminal_cost_x(xn) + mu * spec.constraint_x(xn)
    for k in range(grid.n_steps - 1, -1, -1):
        u, path = control.values[k], pieces[k]

        def rhs(t, p):
            x = path(t)
            return -(a.T @ p + spec.drift_x(t, x, u).T @ p + lam * spec.running_cost_x(t, x, u))

        sol = solve_ivp(rhs, (times[k + 1], times[k]), adj[k + 1], method="LSODA",
                        rtol=rtol, atol=atol)
        adj[k] = sol.y[:, -1]
    return states, adj
