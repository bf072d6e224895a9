"""Optimise the default constrained LQ fixture and compare with the mean-system KKT oracle.

    python3 demos/constrained_lq.py [--paths 4000]
"""
import argparse

from spde_smp import build, control_distance, ekeland_optimize
from spde_smp.fixtures import fixture
from spde_smp.oracles import kkt_control

ap = argparse.ArgumentParser()
ap.add_argument("--paths", type=int, default=4000)
args = ap.parse_args()

s = build(fixture("lq_constrained"), n_paths=args.paths)
trace = ekeland_optimize(s.spec, s.pair, s.space, s.optimizer, s.grid, s.markspace,
                         s.n_paths, s.seed)
print(f"{'it':>2} {'eps':>9} {'J':>10} {'E phi':>10} {'lambda':>7} {'mu':>7} {'mp':>9} inner")
for r in trace.rows():
    print(f"{r['iteration']:>2} {r['epsilon']:9.3g} {r['J']:10.6f} {r['constraint']:10.2e} "
          f"{r['lambda']:7.4f} {r['mu']:7.4f} {r['mp_residual']:9.2e} {r['inner_iterations']}")

oracle = kkt_control(s.spec, s.pair, s.grid)
print(f"converged={trace.converged}  wall={trace.wall_clock:.1f}s")
print(f"oracle: J={oracle.mean_cost:.6f}  multiplier={oracle.multiplier:.6f}")
print(f"L2 distance to oracle control: {control_distance(trace.control, oracle.control, s.grid):.2e}")
