"""The Hamiltonian of the control problem and its partial derivatives.

All functions are row-wise: ``x``, ``p``, ``q`` carry leading path axes,
``r`` has one extra axis for the marks.
"""
from __future__ import annotations

import numpy as np

from .noise import MarkSpace
from .problem import ProblemSpec


def hamiltonian(spec: ProblemSpec, markspace: MarkSpace, t, x, u, p, q, r, lam):
    """``(b, p) + (g, q) + sum_i nu_i (s_i, r_i) + lam l``."""
    h = (np.sum(spec.drift(t, x, u) * p, axis=-1)
         + np.sum(spec.diffusion(t, x, u) * q, axis=-1)
         + lam * spec.running_cost(t, x, u))
    if spec.n_marks:
        s = spec.jump(t, markspace.marks, x, u)
        h = h + np.einsum("m,...mi,...mi->...", markspace.intensities, s, r)
    return h


def _constant_core(jac: np.ndarray, tail: int):
    """The underlying matrix if ``jac`` is a broadcast of one, else ``None``."""
    lead = jac.ndim - tail
    if lead == 0:
        return jac
    if all(s == 0 for s in jac.strides[:lead]):
        return jac[(0,) * lead]
    return None


def _pull_back(jac, p):
    """Row-wise ``jac^T p`` for ``jac`` of shape (..., i, j) and ``p`` (..., i)."""
    jac = np.asarray(jac)
    core = _constant_core(jac, 2)
    if core is not None:
        return p @ core
    return np.matmul(p[..., None, :], jac)[..., 0, :]


def _pull_back_marks(jac, r, nu):
    """Row-wise ``sum_i nu_i jac_i^T r_i`` for ``jac`` (..., M, i, j), ``r`` (..., M, i)."""
    jac = np.asarray(jac)
    core = _constant_core(jac, 3)
    wr = r * nu[:, None]
    if core is not None:
        return wr.reshape(wr.shape[:-2] + (-1,)) @ core.reshape(-1, core.shape[-1])
    return np.sum(np.matmul(wr[..., None, :], jac)[..., 0, :], axis=-2)


def hamiltonian_x(spec: ProblemSpec, markspace: MarkSpace, t, x, u, p, q, r, lam):
    """``b_x^T p + g_x^T q + sum_i nu_i s_{x,i}^T r_i + lam l_x`` row-wise."""
    out = (_pull_back(spec.drift_x(t, x, u), p)
           + _pull_back(spec.diffusion_x(t, x, u), q)
           + lam * spec.running_cost_x(t, x, u))
    if spec.n_marks:
        out = out + _pull_back_marks(spec.jump_x(t, markspace.marks, x, u), r,
                                     markspace.intensities)
    return out


def hamiltonian_u(spec: ProblemSpec, markspace: MarkSpace, t, x, u, p, q, r, lam):
    """``b_u^T p + g_u^T q + sum_i nu_i s_{u,i}^T r_i + lam l_u`` row-wise."""
    out = (_pull_back(spec.drift_u(t, x, u), p)
           + _pull_back(spec.diffusion_u(t, x, u), q)
           + lam * spec.running_cost_u(t, x, u))
    if spec.n_marks:
        out = out + _pull_back_marks(spec.jump_u(t, markspace.marks, x, u), r,
                                     markspace.intensities)
    return out


def hamiltonian_partials(spec: ProblemSpec, markspace: MarkSpace, t, x, u, p, q, r, lam):
    return (hamiltonian_x(spec, markspace, t, x, u, p, q, r, lam),
            hamiltonian_u(spec, markspace, t, x, u, p, q, r, lam))
