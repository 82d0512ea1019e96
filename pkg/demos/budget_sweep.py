"""How the per-step budget shapes the outbreak.

Starts a fire next to the city on the 20x20 landscape and compares a tight
budget with a generous one.  With little resource the risk keeps growing
until enough spreading rates have been pushed down, then turns; with a
large budget it drops from the first steps.  One minimum-resource value
Gamma_M serves every budget, so K scales as ceil(Gamma_M / budget).

    python demos/budget_sweep.py
"""
import math

import numpy as np

from spreadmpc import (MpcConfig, build_wildfire_network, compute_gamma_m, generate_landscape,
                       k_estimate, mpc_run, seed_outbreak)


def main():
    land = generate_landscape(20, 20, seeds=[(15, 5), (15, 6)])
    net = build_wildfire_network(land)
    gm = compute_gamma_m(net)
    print(f"Gamma_M = {gm:.1f}")
    for g in (10, 20, 30):
        print(f"  budget {g}: K = {k_estimate(net, g, gamma_m=gm)} = ceil({gm:.1f} / {g})")
        assert k_estimate(net, g, gamma_m=gm) == math.ceil(gm / g - 1e-9)

    for gamma_bar, steps in ((3.0, 80), (50.0, 10)):
        log = mpc_run(net, net.unmodified_rates(), seed_outbreak(land),
                      MpcConfig(gamma_bar=gamma_bar, steps=steps, compute_k=False))
        risk = log.series("risk")
        peak = int(np.argmax(risk))
        print(f"budget {gamma_bar:g}: risk {risk[0]:.4g} at k=0, peak {risk[peak]:.4g} at k={peak}, "
              f"{risk[-1]:.4g} at k={steps - 1}")


if __name__ == "__main__":
    main()
