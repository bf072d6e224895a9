"""``spde-smp`` command line: simulate | adjoint | optimize | verify | report.

Exit codes: 0 ok, 1 a verification check failed, 2 configuration or input
error, 3 numerical failure (singular step, divergence, stalled line search).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io as rio
from ._parallel import ENV_THREADS
from .adjoint import Multipliers, RegressionSpec, duality_check, solve_adjoint
from .config import build, load_config
from .errors import ConfigurationError, NumericalError, PreconditionError, StallError
from .forward import apriori_check, evaluate_cost, simulate_forward
from .noise import sample_noise
from .optimizer import ekeland_optimize

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("spde_smp")


def _load(path: str) -> dict:
    """A config file, or the config snapshot inside a run manifest."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(str(p))
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError:
        raw = None
    if isinstance(raw, dict) and "command" in raw and "config" in raw:
        from .config import validate
        return validate(raw["config"])
    return load_config(p)


def _setup(args):
    cfg = _load(args.config)
    return build(cfg, seed=args.seed, n_paths=args.paths, n_steps=args.steps)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(command: str, setup) -> rio.RunManifest:
    return rio.RunManifest(
        command=command, config=setup.config,
        seeds={"seed": setup.seed},
        sampling={"horizon": setup.grid.horizon, "n_steps": setup.grid.n_steps,
                  "n_paths": setup.n_paths, "marks": setup.markspace.marks.tolist(),
                  "intensities": setup.markspace.intensities.tolist(),
                  "threads": os.environ.get(ENV_THREADS)})


def _control(args, setup):
    if getattr(args, "control", None):
        u = rio.read_control_csv(args.control, setup.grid.dt, setup.spec.radius)
        if u.values.shape != setup.initial_control.values.shape:
            raise ConfigurationError(
                f"{args.control}: control has shape {u.values.shape}, "
                f"expected {setup.initial_control.values.shape}")
        return u
    return setup.initial_control


def _write_paths(out: Path, manifest, paths, csv_paths: int) -> None:
    dt = paths.grid.dt
    manifest.add("states_csv", rio.write_states_csv(out / "states.csv", paths.states, dt,
                                                    csv_paths), out)
    np.save(out / "states.npy", paths.states)
    manifest.add("states_npy", out / "states.npy", out)
    manifest.add("state_summary", rio.write_state_summary_csv(
        out / "state_summary.csv", paths.mean_states(), paths.stderr_states(), dt), out)


def cmd_simulate(args) -> int:
    setup = _setup(args)
    out = _out_dir(args)
    man = _manifest("simulate", setup)
    control = _control(args, setup)
    noise = sample_noise(setup.grid, setup.markspace, setup.n_paths, setup.seed)
    paths = simulate_forward(setup.spec, setup.pair, setup.space, control, noise)
    cost = evaluate_cost(setup.spec, paths, control)
    _write_paths(out, man, paths, args.csv_paths)
    man.add("control", rio.write_control_csv(out / "control.csv", control), out)
    man.add("cost", rio.write_json(out / "cost.json", cost.to_dict()), out)
    man.add("apriori", rio.write_json(out / "apriori.json",
                                      apriori_check(paths, setup.spec, setup.space).to_dict()), out)
    if args.save_noise:
        noise.save(out / "noise.npz")
        man.add("noise", out / "noise.npz", out)
    man.write(out)
    print(json.dumps(cost.to_dict()))
    return EXIT_OK


def cmd_adjoint(args) -> int:
    setup = _setup(args)
    out = _out_dir(args)
    man = _manifest("adjoint", setup)
    control = _control(args, setup)
    mult = Multipliers(args.lam, args.mu)
    noise = sample_noise(setup.grid, setup.markspace, setup.n_paths, setup.seed)
    paths = simulate_forward(setup.spec, setup.pair, setup.space, control, noise)
    reg = RegressionSpec(setup.optimizer.regression_degree)
    adj = solve_adjoint(setup.spec, setup.pair, setup.space, paths, control, mult, reg)
    rng = np.random.default_rng([setup.seed, 1])
    other = control.with_values(control.values + args.perturbation
                                * rng.standard_normal(control.values.shape))
    paths_b = simulate_forward(setup.spec, setup.pair, setup.space, other, noise)
    rep = duality_check(setup.spec, setup.pair, paths, paths_b, adj, control, other)
    _write_paths(out, man, paths, args.csv_paths)
    man.add("control", rio.write_control_csv(out / "control.csv", control), out)
    man.add("adjoint", rio.save_adjoint(out / "adjoint.npz", adj), out)
    p_mean = np.mean(adj.p, axis=0)
    p_se = np.std(adj.p, axis=0, ddof=1) / np.sqrt(adj.p.shape[0]) if adj.p.shape[0] > 1 \
        else np.zeros_like(p_mean)
    man.add("adjoint_summary", rio.write_state_summary_csv(
        out / "adjoint_summary.csv", p_mean, p_se, setup.grid.dt), out)
    man.add("duality", rio.write_json(out / "duality.json",
                                      {**rep.to_dict(), "multipliers": mult.to_dict(),
                                       "perturbation": args.perturbation,
                                       "regression_warnings": adj.warnings}), out)
    man.write(out)
    print(rep.to_json())
    return EXIT_OK


def cmd_optimize(args) -> int:
    setup = _setup(args)
    out = _out_dir(args)
    opt = setup.optimizer
    if args.max_outer is not None:
        opt = opt.from_dict({**opt.to_dict(), "max_outer": args.max_outer})
    man = _manifest("optimize", setup)
    man.extra["optimizer"] = opt.to_dict()
    control = _control(args, setup)
    trace = ekeland_optimize(setup.spec, setup.pair, setup.space, opt, setup.grid,
                             setup.markspace, setup.n_paths, setup.seed, initial=control)
    man.seeds["per_outer"] = trace.seeds.get("per_outer", [])
    man.add("trace_json", rio.write_json(out / "trace.json", trace.to_dict()), out)
    man.add("trace_csv", rio.write_trace_csv(out / "trace.csv", trace.rows()), out)
    man.add("control", rio.write_control_csv(out / "control.csv", trace.control), out)
    noise = sample_noise(setup.grid, setup.markspace, setup.n_paths, setup.seed)
    paths = simulate_forward(setup.spec, setup.pair, setup.space, trace.control, noise)
    man.add("state_summary", rio.write_state_summary_csv(
        out / "state_summary.csv", paths.mean_states(), paths.stderr_states(),
        setup.grid.dt), out)
    man.extra["wall_clock_s"] = trace.wall_clock
    man.write(out)
    last = trace.rows()[-1] if trace.states else {}
    print(json.dumps({"converged": trace.converged, "outer_iterations": len(trace.states),
                      **{k: last[k] for k in ("J", "constraint", "mp_residual") if k in last}}))
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verification import run_battery
    cfg = _load(args.config)
    only = [s for s in args.only.split(",") if s] if args.only else None
    rep = run_battery(cfg, args.seed, only=only, mutation=args.mutate, n_paths=args.paths,
                      n_steps=args.steps)
    sys.stdout.write(rep.summary())
    if args.out:
        out = _out_dir(args)
        rio.write_json(out / "verify.json", rep.to_dict())
        (out / "verify.txt").write_text(rep.summary())
    return EXIT_OK if rep.passed else EXIT_CHECK


def cmd_report(args) -> int:
    from .plots import render_report
    manifest_path = Path(args.manifest)
    man = rio.RunManifest.load(manifest_path)
    for name in man.artifacts:
        man.artifact_path(manifest_path, name)   # raises naming the missing file
    out = _out_dir(args)
    files = render_report(man, manifest_path, out)
    for f in files:
        print(f)
    return EXIT_OK


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("config", help="problem config JSON (or a run manifest to replay)")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--paths", type=int, help="override noise.n_paths")
    p.add_argument("--steps", type=int, help="override noise.n_steps")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spde-smp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("--threads", type=int, help=f"worker threads (sets {ENV_THREADS})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="forward Monte-Carlo run, cost and constraint")
    _common(p)
    p.add_argument("--control", help="control CSV (default: config control/initial)")
    p.add_argument("--csv-paths", type=int, default=100,
                   help="paths written to states.csv (all paths go to states.npy)")
    p.add_argument("--save-noise", action="store_true", help="also write noise.npz")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("adjoint", help="adjoint solve plus duality check")
    _common(p)
    p.add_argument("--control", help="control CSV (default: config control/initial)")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--mu", type=float, default=0.0)
    p.add_argument("--perturbation", type=float, default=1e-2,
                   help="scale of the random control perturbation for the duality check")
    p.add_argument("--csv-paths", type=int, default=100)
    p.set_defaults(func=cmd_adjoint)

    p = sub.add_parser("optimize", help="penalised continuation optimizer")
    _common(p)
    p.add_argument("--control", help="initial control CSV")
    p.add_argument("--max-outer", type=int, help="override optimizer.max_outer")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("verify", help="run the verification battery")
    _common(p, out_required=False)
    p.add_argument("--only", help="comma-separated check names or groups")
    p.add_argument("--mutate", help="apply a documented coefficient mutation")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", help="SVG plots from a run manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        os.environ[ENV_THREADS] = str(args.threads)
    try:
        return args.func(args)
    except (ConfigurationError, PreconditionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: missing file {exc.filename or exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, StallError) as exc:
        extra = ""
        if getattr(exc, "path", None) is not None:
            extra += f" (path {exc.path})"
        if getattr(exc, "step", None) is not None:
            extra += f" (step {exc.step})"
        print(f"numerical failure: {exc}{extra}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
