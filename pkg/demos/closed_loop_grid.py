"""Closed-loop containment of a small wildfire.

Builds a 10x10 landscape, runs the receding-horizon controller for 60 steps
with a per-step budget of 10 and prints how the risk and its bound evolve.
The bound must fall at every step from the K estimate on; here it falls
from the start.

    python demos/closed_loop_grid.py [out_dir]
"""
import sys
from pathlib import Path

from spreadmpc import (MpcConfig, build_wildfire_network, generate_landscape, mpc_run,
                       seed_outbreak)


def main(out=None):
    land = generate_landscape(10, 10)
    net = build_wildfire_network(land)
    print("landscape (C city, E eucalyptus, G grass, D desert, W water):")
    for row in land.cells:
        print("   ", row)
    x0 = seed_outbreak(land)
    print(f"{net.n} cells, {net.n_edges} spread edges, {int(x0.sum())} burning")

    cfg = MpcConfig(L=1, gamma_bar=10.0, steps=60)
    log = mpc_run(net, net.unmodified_rates(), x0, cfg)
    print(f"Gamma_M = {log.gamma_m:.1f}, so K = {log.k_estimate}; "
          f"observed decrease from step {log.empirical_k()}")
    for e in log.entries[::10]:
        print(f"  k={e.k:3d}  risk={e.risk:9.4f}  bound={e.risk_bound:9.4f}  "
              f"spent={e.gamma_spent:5.2f}  allocations={e.nnz_alloc}")
    if out:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        log.write_csv(out / "run_log.csv")
        log.write_sidecar(out / "run_log.json")
        print(f"log written to {out}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else None)
