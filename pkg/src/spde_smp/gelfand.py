"""Finite-dimensional Gelfand triple and the linear operator pair.

Coordinates are taken in an H-orthonormal basis, so the pivot inner product
is the Euclidean one and the V-norm is diagonal with weights ``w_k >= 1``.
The dual norm on V* then has weights ``1 / w_k``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

TOL = 1e-10


@dataclass(frozen=True)
class GalerkinSpace:
    dim: int
    v_weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.v_weights, dtype=float).reshape(-1)
        if self.dim < 1:
            raise ConfigurationError(f"dim must be positive, got {self.dim}")
        if w.shape != (self.dim,):
            raise ConfigurationError(
                f"v_weights has length {w.shape[0]}, expected {self.dim}")
        if np.any(w < 1.0) or not np.all(np.isfinite(w)):
            raise ConfigurationError("v_weights must be finite and >= 1")
        w.setflags(write=False)
        object.__setattr__(self, "v_weights", w)

    @classmethod
    def euclidean(cls, dim: int) -> "GalerkinSpace":
        return cls(dim, np.ones(dim))

    def h_norm_sq(self, x):
        x = np.asarray(x, dtype=float)
        return np.sum(x * x, axis=-1)

    def v_norm_sq(self, x):
        x = np.asarray(x, dtype=float)
        return np.sum(self.v_weights * x * x, axis=-1)

    def dual_norm_sq(self, f):
        f = np.asarray(f, dtype=float)
        return np.sum(f * f / self.v_weights, axis=-1)

    def h_norm(self, x):
        return np.sqrt(self.h_norm_sq(x))

    def v_norm(self, x):
        return np.sqrt(self.v_norm_sq(x))

    def dual_norm(self, f):
        return np.sqrt(self.dual_norm_sq(f))

    def pairing(self, f, x):
        """Duality product between V* and V (Euclidean in these coordinates)."""
        return np.sum(np.asarray(f, dtype=float) * np.asarray(x, dtype=float), axis=-1)


def heat_space(dim: int, viscosity: float) -> GalerkinSpace:
    """Sine-mode space with weights ``1 + viscosity * k^2 pi^2``."""
    if viscosity <= 0:
        raise ConfigurationError(f"viscosity must be positive, got {viscosity}")
    k = np.arange(1, dim + 1)
    return GalerkinSpace(dim, 1.0 + viscosity * (k * np.pi) ** 2)


@dataclass(frozen=True)
class OperatorPair:
    """Linear drift and diffusion operators.

    Each operator is either one ``(N, N)`` matrix (time-constant) or an
    ``(n_steps, N, N)`` stack, piecewise constant on the grid.
    """

    linear_drift: np.ndarray
    linear_diffusion: np.ndarray
    name: str = "matrix"
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        a = np.array(self.linear_drift, dtype=float)
        b = np.array(self.linear_diffusion, dtype=float)
        for label, m in (("linear_drift", a), ("linear_diffusion", b)):
            if m.ndim not in (2, 3) or m.shape[-1] != m.shape[-2]:
                raise ConfigurationError(f"{label} must be square, got shape {m.shape}")
            if not np.all(np.isfinite(m)):
                raise ConfigurationError(f"{label} has non-finite entries")
        if a.shape[-1] != b.shape[-1]:
            raise ConfigurationError("linear_drift and linear_diffusion dimensions differ")
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "linear_drift", a)
        object.__setattr__(self, "linear_diffusion", b)

    @property
    def dim(self) -> int:
        return self.linear_drift.shape[-1]

    @property
    def time_constant(self) -> bool:
        return self.linear_drift.ndim == 2 and self.linear_diffusion.ndim == 2

    def n_slices(self) -> int:
        n = 1
        for m in (self.linear_drift, self.linear_diffusion):
            if m.ndim == 3:
                n = max(n, m.shape[0])
        return n

    def drift_at(self, k: int) -> np.ndarray:
        a = self.linear_drift
        return a if a.ndim == 2 else a[k]

    def diffusion_at(self, k: int) -> np.ndarray:
        b = self.linear_diffusion
        return b if b.ndim == 2 else b[k]

    def check_steps(self, n_steps: int) -> None:
        for label, m in (("linear_drift", self.linear_drift),
                         ("linear_diffusion", self.linear_diffusion)):
            if m.ndim == 3 and m.shape[0] != n_steps:
                raise ConfigurationError(
                    f"{label} has {m.shape[0]} time slices but the grid has {n_steps} steps")

    def operator_bounds(self, space: GalerkinSpace) -> dict:
        """Largest induced norms over the grid: ``|A|_{V->V*}`` and ``|B|_{V->H}``."""
        _check_dims(self, space)
        s = 1.0 / np.sqrt(space.v_weights)
        a = self.linear_drift if self.linear_drift.ndim == 3 else self.linear_drift[None]
        b = self.linear_diffusion if self.linear_diffusion.ndim == 3 else self.linear_diffusion[None]
        a_norm = max(np.linalg.norm(s[:, None] * m * s[None, :], 2) for m in a)
        b_norm = max(np.linalg.norm(m * s[None, :], 2) for m in b)
        return {"drift_v_to_vstar": float(a_norm), "diffusion_v_to_h": float(b_norm)}

    def to_config(self) -> dict:
        if self.name == "heat":
            return {"factory": "heat", **self.params}
        return {"A": self.linear_drift.tolist(), "B": self.linear_diffusion.tolist()}


def _check_dims(pair: OperatorPair, space: GalerkinSpace) -> None:
    if pair.dim != space.dim:
        raise ConfigurationError(
            f"operator dimension {pair.dim} does not match space dimension {space.dim}")


def make_heat_pair(space: GalerkinSpace, viscosity: float) -> OperatorPair:
    """Diagonal heat generator ``-viscosity * k^2 pi^2`` with no multiplicative noise.

    Passes :func:`check_coercivity` with ``alpha = viscosity / 2`` and
    ``lambda_shift = 1`` on :func:`heat_space` weights whenever
    ``viscosity <= 2``.
    """
    if viscosity <= 0:
        raise ConfigurationError(f"viscosity must be positive, got {viscosity}")
    k = np.arange(1, space.dim + 1)
    a = np.diag(-viscosity * (k * np.pi) ** 2)
    return OperatorPair(a, np.zeros_like(a), name="heat", params={"viscosity": viscosity})


@dataclass(frozen=True)
class CoercivityCertificate:
    alpha: float
    lambda_shift: float
    verified: bool
    worst_margin: float
    worst_vector: np.ndarray
    worst_step: int
    n_tested: int
    bounds: dict

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha, "lambda_shift": self.lambda_shift,
            "verified": self.verified, "worst_margin": self.worst_margin,
            "worst_vector": self.worst_vector.tolist(), "worst_step": self.worst_step,
            "n_tested": self.n_tested, "bounds": self.bounds,
        }


def coercivity_margin(a, b, space: GalerkinSpace, alpha, lambda_shift, x):
    """``-<Ax,x> + lambda |x|_H^2 - alpha |x|_V^2 - |Bx|_H^2`` for rows of ``x``."""
    x = np.asarray(x, dtype=float)
    ax = x @ np.asarray(a).T
    bx = x @ np.asarray(b).T
    return (-np.sum(ax * x, axis=-1) + lambda_shift * space.h_norm_sq(x)
            - alpha * space.v_norm_sq(x) - np.sum(bx * bx, axis=-1))


def check_coercivity(pair: OperatorPair, space: GalerkinSpace, alpha: float,
                     lambda_shift: float, n_samples: int, seed=0) -> CoercivityCertificate:
    """Certify the coercivity inequality by sampling.

    Tested vectors: every basis vector, ``n_samples - N`` random unit vectors
    and, per time slice, the eigenvector of the smallest eigenvalue of the
    symmetric quadratic form.  Every time slice of the pair is visited.
    """
    _check_dims(pair, space)
    n = space.dim
    if alpha <= 0:
        raise ConfigurationError(f"alpha must be positive, got {alpha}")
    if n_samples < n:
        raise ConfigurationError(f"n_samples must be >= dim ({n}), got {n_samples}")
    rng = np.random.default_rng(seed)
    rand = rng.standard_normal((n_samples - n, n))
    rand /= np.linalg.norm(rand, axis=1, keepdims=True)
    probes = np.vstack([np.eye(n), rand])

    worst = np.inf
    worst_vec = probes[0]
    worst_step = 0
    tested = 0
    for k in range(pair.n_slices()):
        a = pair.drift_at(k)
        b = pair.diffusion_at(k)
        form = (-0.5 * (a + a.T) + lambda_shift * np.eye(n)
                - alpha * np.diag(space.v_weights) - b.T @ b)
        _, vecs = np.linalg.eigh(form)
        xs = np.vstack([probes, vecs[:, 0]])
        margins = coercivity_margin(a, b, space, alpha, lambda_shift, xs)
        tested += xs.shape[0]
        i = int(np.argmin(margins))
        if margins[i] < worst:
            worst, worst_vec, worst_step = float(margins[i]), xs[i].copy(), k
    return CoercivityCertificate(
        alpha=float(alpha), lambda_shift=float(lambda_shift),
        verified=bool(worst >= -TOL), worst_margin=worst, worst_vector=worst_vec,
        worst_step=worst_step, n_tested=tested, bounds=pair.operator_bounds(space))
