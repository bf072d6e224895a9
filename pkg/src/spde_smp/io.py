"""Result files: CSV for arrays, JSON for reports, and the run manifest.

Floats are written with ``repr`` so a CSV round-trips bit-exactly.  Column
layouts are documented in ``docs/formats.md``.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .problem import DEFAULT_RADIUS, ControlProcess

MANIFEST_NAME = "manifest.json"


def _f(x) -> str:
    return repr(float(x))


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")
    return path


def write_states_csv(path, states: np.ndarray, dt: float, max_paths: int | None = None) -> Path:
    """``path, step, t, x_1..x_N`` for the first ``max_paths`` paths (all if None)."""
    path = Path(path)
    n_paths, n1, dim = states.shape
    keep = n_paths if max_paths is None else min(n_paths, max_paths)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "step", "t"] + [f"x_{i + 1}" for i in range(dim)])
        for p in range(keep):
            for k in range(n1):
                w.writerow([p, k, _f(k * dt)] + [_f(v) for v in states[p, k]])
    return path


def write_state_summary_csv(path, mean: np.ndarray, stderr: np.ndarray, dt: float) -> Path:
    """``step, t, mean_1..mean_N, stderr_1..stderr_N``."""
    path = Path(path)
    dim = mean.shape[1]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "t"] + [f"mean_{i + 1}" for i in range(dim)]
                   + [f"stderr_{i + 1}" for i in range(dim)])
        for k in range(mean.shape[0]):
            w.writerow([k, _f(k * dt)] + [_f(v) for v in mean[k]] + [_f(v) for v in stderr[k]])
    return path


def read_state_summary_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows = _read_rows(path)
    if not rows:
        return np.zeros(0), np.zeros((0, 0)), np.zeros((0, 0))
    head = list(rows[0].keys())
    dim = sum(h.startswith("mean_") for h in head)
    t = np.array([float(r["t"]) for r in rows])
    mean = np.array([[float(r[f"mean_{i + 1}"]) for i in range(dim)] for r in rows])
    se = np.array([[float(r[f"stderr_{i + 1}"]) for i in range(dim)] for r in rows])
    return t, mean, se


def write_control_csv(path, control: ControlProcess) -> Path:
    """``step, t, u_1..u_m``; one row per grid step."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "t"] + [f"u_{j + 1}" for j in range(control.dim)])
        for k in range(control.n_steps):
            w.writerow([k, _f(k * control.dt)] + [_f(v) for v in control.values[k]])
    return path


def read_control_csv(path, dt: float | None = None, radius: float = DEFAULT_RADIUS) -> ControlProcess:
    rows = _read_rows(path)
    if not rows:
        raise ConfigurationError(f"{path}: control CSV has no rows")
    m = sum(h.startswith("u_") for h in rows[0])
    values = np.array([[float(r[f"u_{j + 1}"]) for j in range(m)] for r in rows])
    steps = [int(r["step"]) for r in rows]
    if steps != list(range(len(rows))):
        raise ConfigurationError(f"{path}: steps must run 0..{len(rows) - 1} in order")
    if dt is None:
        dt = float(rows[1]["t"]) - float(rows[0]["t"]) if len(rows) > 1 else 1.0
    return ControlProcess(values, dt, radius)


TRACE_COLUMNS = ("iteration", "epsilon", "J", "J_reference", "J_eps", "lambda", "mu",
                 "constraint", "mp_residual", "inner_iterations", "noise_seed")


def write_trace_csv(path, rows: list[dict]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in rows:
            w.writerow([r[c] if isinstance(r[c], (int, np.integer)) else _f(r[c])
                        for c in TRACE_COLUMNS])
    return path


def read_trace_csv(path) -> list[dict]:
    out = []
    for r in _read_rows(path):
        out.append({c: (int(r[c]) if c in ("iteration", "inner_iterations", "noise_seed")
                        else float(r[c])) for c in TRACE_COLUMNS})
    return out


def _read_rows(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def save_adjoint(path, adj) -> Path:
    """Adjoint ensemble as ``.npz`` with arrays p, p_hat, q, r (same path/step indexing as states)."""
    path = Path(path)
    with path.open("wb") as fh:
        np.savez(fh, p=adj.p, p_hat=adj.p_hat, q=adj.q, r=adj.r,
                 multipliers=np.array([adj.multipliers.lam, adj.multipliers.mu]))
    return path


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def tool_version() -> str:
    from . import __version__
    return __version__


@dataclass
class RunManifest:
    """What was run, with which seeds, and which files it produced."""

    command: str
    config: dict
    seeds: dict
    sampling: dict
    artifacts: dict = field(default_factory=dict)
    version: str = field(default_factory=tool_version)
    started: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    finished: str | None = None
    extra: dict = field(default_factory=dict)

    def add(self, name: str, path, out_dir) -> None:
        path = Path(path)
        rel = os.path.relpath(path, out_dir)
        if name in self.artifacts:
            raise ConfigurationError(f"artifact {name!r} listed twice")
        self.artifacts[name] = {"file": rel, "sha256": sha256(path)}

    def to_dict(self) -> dict:
        return {"command": self.command, "version": self.version, "started": self.started,
                "finished": self.finished, "seeds": self.seeds, "sampling": self.sampling,
                "artifacts": self.artifacts, "extra": self.extra, "config": self.config}

    def write(self, out_dir) -> Path:
        self.finished = datetime.now(timezone.utc).isoformat()
        return write_json(Path(out_dir) / MANIFEST_NAME, self.to_dict())

    @classmethod
    def load(cls, path) -> "RunManifest":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(str(path))
        d = json.loads(path.read_text())
        return cls(command=d["command"], config=d["config"], seeds=d["seeds"],
                   sampling=d["sampling"], artifacts=d.get("artifacts", {}),
                   version=d.get("version", ""), started=d.get("started", ""),
                   finished=d.get("finished"), extra=d.get("extra", {}))

    def artifact_path(self, manifest_path, name: str) -> Path:
        if name not in self.artifacts:
            raise FileNotFoundError(f"manifest lists no artifact {name!r}")
        path = Path(manifest_path).parent / self.artifacts[name]["file"]
        if not path.exists():
            raise FileNotFoundError(str(path))
        return path
