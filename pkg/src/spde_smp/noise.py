"""Brownian increments and marked Poisson counts on a uniform grid.

Each path owns a Philox stream keyed by the run seed, with the path index
placed in the top counter word.  Any subset of paths can therefore be
regenerated independently and the bundle does not depend on how paths are
split between workers.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from ._parallel import chunked_map, mean_and_stderr
from .errors import ConfigurationError


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise ConfigurationError(f"n_steps must be >= 1, got {self.n_steps}")
        if not (self.horizon > 0 and np.isfinite(self.horizon)):
            raise ConfigurationError(f"horizon must be positive, got {self.horizon}")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def t(self, k: int) -> float:
        return k * self.dt

    def refine(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.horizon, self.n_steps * factor)


@dataclass(frozen=True)
class MarkSpace:
    """Finitely many marks with intensities; the empty space means no jumps."""

    marks: np.ndarray
    intensities: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.marks, dtype=float).reshape(-1)
        nu = np.asarray(self.intensities, dtype=float).reshape(-1)
        if e.shape != nu.shape:
            raise ConfigurationError("marks and intensities must have equal length")
        if np.any(nu <= 0) or not np.all(np.isfinite(nu)):
            raise ConfigurationError("intensities must be positive and finite")
        e.setflags(write=False)
        nu.setflags(write=False)
        object.__setattr__(self, "marks", e)
        object.__setattr__(self, "intensities", nu)

    @classmethod
    def empty(cls) -> "MarkSpace":
        return cls(np.zeros(0), np.zeros(0))

    @property
    def size(self) -> int:
        return self.marks.shape[0]

    @property
    def total_intensity(self) -> float:
        return float(np.sum(self.intensities))


@dataclass(frozen=True, eq=False)
class NoiseBundle:
    dw: np.ndarray        # (paths, steps)
    jumps: np.ndarray     # (paths, steps, marks), integer counts
    seed: int
    grid: TimeGrid
    markspace: MarkSpace

    @property
    def n_paths(self) -> int:
        return self.dw.shape[0]

    def compensated_jumps(self) -> np.ndarray:
        """``jumps - nu * dt`` as floats."""
        return self.jumps - self.markspace.intensities * self.grid.dt

    def same_as(self, other: "NoiseBundle") -> bool:
        return (self is other) or (
            self.grid == other.grid
            and np.array_equal(self.markspace.intensities, other.markspace.intensities)
            and np.array_equal(self.dw, other.dw)
            and np.array_equal(self.jumps, other.jumps))

    def coarsen(self, factor: int) -> "NoiseBundle":
        """Aggregate ``factor`` consecutive increments (same sample paths, coarser grid)."""
        n = self.grid.n_steps
        if factor < 1 or n % factor:
            raise ConfigurationError(f"cannot coarsen {n} steps by {factor}")
        p = self.n_paths
        dw = self.dw.reshape(p, n // factor, factor).sum(axis=2)
        jumps = self.jumps.reshape(p, n // factor, factor, -1).sum(axis=2)
        grid = TimeGrid(self.grid.horizon, n // factor)
        return NoiseBundle(dw, jumps, self.seed, grid, self.markspace)

    def save(self, path) -> None:
        np.savez(path, dw=self.dw, jumps=self.jumps, seed=np.uint64(self.seed),
                 horizon=self.grid.horizon, n_steps=self.grid.n_steps,
                 marks=self.markspace.marks, intensities=self.markspace.intensities)

    @classmethod
    def load(cls, path) -> "NoiseBundle":
        with np.load(path) as z:
            grid = TimeGrid(float(z["horizon"]), int(z["n_steps"]))
            ms = MarkSpace(z["marks"], z["intensities"])
            return cls(z["dw"], z["jumps"], int(z["seed"]), grid, ms)

    def to_csv(self, path) -> None:
        """One row per (path, step): ``path, step, dw, n_1..n_M``."""
        m = self.markspace.size
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "step", "dw"] + [f"n_{i + 1}" for i in range(m)])
            for p in range(self.n_paths):
                for k in range(self.grid.n_steps):
                    w.writerow([p, k, repr(float(self.dw[p, k]))]
                               + [int(c) for c in self.jumps[p, k]])


def _stream_key(seed: int) -> np.ndarray:
    return np.random.SeedSequence(int(seed)).generate_state(2, dtype=np.uint64)


def path_generator(key: np.ndarray, path: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=key, counter=[0, 0, 0, int(path)]))


def sample_noise(grid: TimeGrid, markspace: MarkSpace, n_paths: int, seed) -> NoiseBundle:
    if n_paths < 1:
        raise ConfigurationError(f"n_paths must be >= 1, got {n_paths}")
    n, m = grid.n_steps, markspace.size
    key = _stream_key(seed)
    sd = np.sqrt(grid.dt)
    lam = markspace.intensities * grid.dt
    dw = np.empty((n_paths, n))
    jumps = np.zeros((n_paths, n, m), dtype=np.int64)

    def fill(lo, hi):
        for p in range(lo, hi):
            gen = path_generator(key, p)
            dw[p] = gen.standard_normal(n) * sd
            if m:
                jumps[p] = gen.poisson(lam, size=(n, m))

    chunked_map(fill, n_paths)
    dw.setflags(write=False)
    jumps.setflags(write=False)
    return NoiseBundle(dw, jumps, int(seed), grid, markspace)


def compensated_sum(bundle: NoiseBundle, markspace: MarkSpace, grid: TimeGrid,
                    integrand) -> np.ndarray:
    """Sum of ``integrand * (count - nu dt)`` over steps and marks, per path.

    ``integrand`` has shape ``(paths, steps, marks, N)`` and must be
    predictable (built from information available at each step's start).
    """
    integrand = np.asarray(integrand, dtype=float)
    p, n, m = bundle.n_paths, grid.n_steps, markspace.size
    if bundle.jumps.shape != (p, n, m) or grid != bundle.grid:
        raise ConfigurationError("noise bundle does not match grid/markspace")
    if integrand.ndim != 4 or integrand.shape[:3] != (p, n, m):
        raise ConfigurationError(
            f"integrand shape {integrand.shape} incompatible with ({p}, {n}, {m}, N)")
    comp = bundle.jumps - markspace.intensities * grid.dt
    return np.einsum("pkin,pki->pn", integrand, comp)


def martingale_check(bundle: NoiseBundle, integrand) -> float:
    """Largest |mean| / stderr over components of the compensated sum."""
    vals = compensated_sum(bundle, bundle.markspace, bundle.grid, integrand)
    worst = 0.0
    for j in range(vals.shape[1]):
        mean, se = mean_and_stderr(vals[:, j])
        if se > 0:
            worst = max(worst, abs(mean) / se)
    return worst
