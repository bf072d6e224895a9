"""SVG figures for ``spde-smp report``.

Four files, always: state-mode means with stderr bands, the control, the
optimizer trace, and the multiplier path against the unit circle.  A
missing input (say, no trace for a simulate run) gives a titled, empty
figure rather than an error.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import io as rio  # noqa: E402

# Fixed hash salt and no date stamp keep the SVG bytes reproducible.
_RC = {"svg.hashsalt": "spde-smp", "svg.fonttype": "none"}
_META = {"Date": None}
MAX_MODES = 4


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)
    return path


def _maybe(man, manifest_path, name):
    return man.artifact_path(manifest_path, name) if name in man.artifacts else None


def plot_states(path: Path, summary_csv) -> Path:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.set_title("state modes: ensemble mean ± stderr")
        ax.set_xlabel("t")
        if summary_csv is not None:
            t, mean, se = rio.read_state_summary_csv(summary_csv)
            for i in range(min(MAX_MODES, mean.shape[1] if mean.size else 0)):
                ax.plot(t, mean[:, i], label=f"x_{i + 1}")
                ax.fill_between(t, mean[:, i] - se[:, i], mean[:, i] + se[:, i], alpha=0.25)
            if mean.size:
                ax.legend(loc="best")
        return _save(fig, path)


def plot_control(path: Path, control_csv) -> Path:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.set_title("control")
        ax.set_xlabel("t")
        if control_csv is not None:
            u = rio.read_control_csv(control_csv)
            t = np.arange(u.n_steps) * u.dt
            for j in range(u.dim):
                ax.step(t, u.values[:, j], where="post", label=f"u_{j + 1}")
            ax.legend(loc="best")
        return _save(fig, path)


def plot_trace(path: Path, rows: list[dict]) -> Path:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.set_title("optimizer trace")
        ax.set_xlabel("outer iteration")
        if rows:
            it = [r["iteration"] for r in rows]
            for key, label in (("epsilon", "epsilon"), ("J_eps", "J_eps"),
                               ("constraint", "|constraint|"), ("mp_residual", "mp residual")):
                vals = np.abs([r[key] for r in rows])
                ax.semilogy(it, np.maximum(vals, 1e-300), marker="o", label=label)
            ax.legend(loc="best")
        return _save(fig, path)


def plot_multipliers(path: Path, rows: list[dict]) -> Path:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 5))
        ax.set_title("multipliers (lambda, mu)")
        ax.set_xlabel("lambda")
        ax.set_ylabel("mu")
        theta = np.linspace(0, 2 * np.pi, 361)
        ax.plot(np.cos(theta), np.sin(theta), color="0.7", lw=0.8)
        if rows:
            lam = [r["lambda"] for r in rows]
            mu = [r["mu"] for r in rows]
            ax.plot(lam, mu, marker="o")
        ax.set_aspect("equal")
        return _save(fig, path)


def render_report(man, manifest_path, out_dir) -> list[Path]:
    out = Path(out_dir)
    trace_csv = _maybe(man, manifest_path, "trace_csv")
    rows = rio.read_trace_csv(trace_csv) if trace_csv is not None else []
    return [
        plot_states(out / "states.svg", _maybe(man, manifest_path, "state_summary")),
        plot_control(out / "control.svg", _maybe(man, manifest_path, "control")),
        plot_trace(out / "trace.svg", rows),
        plot_multipliers(out / "multipliers.svg", rows),
    ]
