"""Strong error of the forward scheme, and how the duality gap splits into bias and noise.

    python3 demos/scheme_orders.py
"""
import numpy as np

from spde_smp.fixtures import fixture
from spde_smp.verification import convergence_study

exact = [np.exp(-np.pi ** 2 * 0.1), 0.0, 0.0, 0.0]
heat = convergence_study(fixture("heat_decay"), [0.01, 0.005, 0.0025, 0.00125],
                         exact_terminal=exact, n_paths=4, duality=False)
print("heat equation, exact reference")
for row in heat["strong"]:
    print(f"  dt={row['dt']:<8g} error={row['strong_error']:.3e}")
print(f"  observed order {heat['observed_order']:.2f}\n")

# the configured grid is the coarsest; finer ones subdivide it
lq = convergence_study(fixture("lq_constrained", n_steps=10), [1 / 10, 1 / 20, 1 / 40, 1 / 160],
                       path_list=[500, 2000], n_paths=2000)
print(f"constrained LQ with jumps, reference {lq['reference']}")
for row in lq["strong"]:
    print(f"  dt={row['dt']:<8g} error={row['strong_error']:.3e}")
print(f"  observed order {lq['observed_order']:.2f}")
print("  duality gap:")
for row in lq["duality"]:
    print(f"    dt={row['dt']:<8g} paths={row['n_paths']:<5} gap={row['gap']:+.2e} "
          f"3se={row['noise_bound']:.2e} bias allowance={row['bias_bound']:.2e}")
