"""Command-line entry point: ``spreadmpc <command> ...``.

Every command that takes ``--out`` writes ``manifest.json`` next to its
outputs.  Exit codes: 0 success, 1 invalid input or violated assumption,
2 internal failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics import evaluate_risk, simulate, terminal_priority
from .errors import DomainError, SolverError
from .mpc import MpcConfig, k_estimate, mpc_run
from .network import (SpreadingNetwork, admissibility_margins, check_assumption1)
from .ocp import compute_gamma_m
from .scenario import (Landscape, WildfireParams, Wind, build_wildfire_network,
                       generate_landscape, seed_outbreak)

EXIT_OK, EXIT_DOMAIN, EXIT_INTERNAL = 0, 1, 2


# -- input helpers -----------------------------------------------------------

def _read_json(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DomainError(f"cannot read {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise DomainError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON ({exc.msg})") from None


def _config(args) -> dict:
    cfg = _read_json(args.config) if args.config else {}
    if not isinstance(cfg, dict):
        raise DomainError("config file must hold a JSON object")
    unknown = set(cfg) - {"params", "mpc"}
    if unknown:
        raise DomainError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _load_problem(path, args, validate: bool = True):
    """Network and default initial state from a landscape or a network file.

    Network files carry no state, so the returned state is ``None``.
    """
    d = _read_json(path)
    if not isinstance(d, dict):
        raise DomainError(f"{path}: expected a JSON object")
    if "cells" in d:
        land = Landscape.from_dict(d)
        params = WildfireParams().with_overrides(_config(args).get("params"))
        net = build_wildfire_network(land, params)
        return net, seed_outbreak(land, seed=args.seed), land
    return SpreadingNetwork.from_dict(d, validate=validate), None, None


def _load_state(path, n: int) -> np.ndarray:
    d = _read_json(path)
    x = np.asarray(d["x"] if isinstance(d, dict) else d, dtype=float)
    if x.shape != (n,):
        raise DomainError(f"{path}: state has {x.size} entries, expected {n}")
    return x


def _out_dir(args) -> Path | None:
    if args.out is None:
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(out: Path | None, args, inputs: dict, extra: dict | None = None) -> None:
    if out is None:
        return
    man = {
        "command": args.command,
        "argv": sys.argv[1:] if args.argv is None else args.argv,
        "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
        "config_overrides": _config(args),
        "output_dir": str(out),
        "seed": args.seed,
        "tolerances": {"tol_feas": args.tol_feas, "tol_opt": args.tol_opt,
                       "tail_tol": args.tail_tol},
        "version": __version__,
    }
    if extra:
        man.update(extra)
    (out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# -- commands --------------------------------------------------------------------

def cmd_validate(args) -> int:
    net, _, _ = _load_problem(args.network, args, validate=False)
    problems = net.problems()
    ok = not problems
    colsum = net.h * np.bincount(net.cols, weights=net.beta_upper, minlength=net.n)
    print(f"nodes {net.n}, edges {net.n_edges}, h {net.h:g}, alpha {net.alpha:.6g}")
    print(f"step size: max h * sum_i beta_upper = {colsum.max(initial=0):.6g}, "
          f"max h * delta_cap = {float((net.h * net.delta_cap).max()):.6g}")
    for p in problems:
        print(f"FAIL {p}")
    if ok:
        margin = check_assumption1(net)
        ok = margin > 0
        print(f"{'PASS' if ok else 'FAIL'} stability margin 1 - alpha * rho(A_upper) = {margin:.6g}")
        adm = admissibility_margins(net, net.unmodified_rates())
        print(f"admissibility of the unmodified rates: min margin {adm.min():.6g}, "
              f"{int((adm > 0).sum())}/{net.n} nodes satisfy the weighted cut condition")
    return EXIT_OK if ok else EXIT_DOMAIN


def cmd_simulate(args) -> int:
    net, x0, _ = _load_problem(args.network, args)
    if args.state is not None:
        x0 = _load_state(args.state, net.n)
    if x0 is None:
        raise DomainError("network files need --state")
    rates = net.unmodified_rates()
    traj = simulate(net, rates, x0, args.steps)
    p = terminal_priority(net, rates)
    disc = net.alpha ** np.arange(args.steps + 1)
    stage = disc * (traj @ net.cost)
    risks = [evaluate_risk(net, rates, x, tail_tol=args.tail_tol) for x in traj]
    risk = risks[0]
    print(f"risk {risk.value:.12g} (+ at most {risk.truncation_bound:.3g}, {risk.steps} steps), "
          f"bound {float(p @ traj[0]):.12g}")
    out = _out_dir(args)
    if out is not None:
        _write_rows(out / "trajectory.csv", ["step", "node", "x"],
                    [[k, i, repr(float(v))] for k, row in enumerate(traj) for i, v in enumerate(row)])
        _write_rows(out / "risk.csv",
                    ["step", "risk", "risk_bound", "truncation_bound", "discounted_cost"],
                    [[k, repr(r.value), repr(float(p @ x)), repr(r.truncation_bound), repr(float(s))]
                     for k, (r, x, s) in enumerate(zip(risks, traj, stage))])
        _manifest(out, args, {"network": args.network, "state": args.state},
                  {"steps": args.steps})
    return EXIT_OK


def _mpc_config(args) -> MpcConfig:
    over = dict(_config(args).get("mpc", {}))
    for key in ("L", "gamma_bar", "steps"):
        val = getattr(args, key)
        if val is not None:
            over[key] = val
    over.update(tail_tol=args.tail_tol, tol_feas=args.tol_feas, tol_opt=args.tol_opt)
    try:
        return MpcConfig(**over)
    except TypeError as exc:
        raise DomainError(f"bad mpc settings: {exc}") from None


def cmd_mpc(args) -> int:
    net, x0, _ = _load_problem(args.scenario, args)
    if args.state is not None:
        x0 = _load_state(args.state, net.n)
    if x0 is None:
        raise DomainError("network files need --state")
    cfg = _mpc_config(args)
    out = _out_dir(args)
    _manifest(out, args, {"scenario": args.scenario, "state": args.state},
              {"mpc": cfg.to_dict()})

    def report(e):
        if not args.quiet:
            print(f"k={e.k} risk={e.risk:.6g} bound={e.risk_bound:.6g} spent={e.gamma_spent:.6g} "
                  f"nnz={e.nnz_alloc} iters={e.solver_iters}", flush=True)

    try:
        log = mpc_run(net, net.unmodified_rates(), x0, cfg, progress=report)
    except SolverError as exc:
        if out is not None and exc.dump is not None:
            (out / "failed_program.json").write_text(json.dumps(exc.dump) + "\n")
        raise
    print(f"Gamma_M {log.gamma_m}, K estimate {log.k_estimate}, empirical K {log.empirical_k()}")
    if out is not None:
        log.write_csv(out / "run_log.csv")
        log.write_sidecar(out / "run_log.json")
        alloc = out / "allocations"
        alloc.mkdir(exist_ok=True)
        for e in log.entries:
            _write_rows(alloc / f"step_{e.k:05d}.csv", ["i", "j", "U", "WU"],
                        [[i, j, repr(u), repr(wu)] for i, j, u, wu in e.allocation.triplets(net)
                         if u > 0])
    return EXIT_OK


def cmd_gamma_m(args) -> int:
    net, _, _ = _load_problem(args.network, args)
    gm = compute_gamma_m(net, args.epsilon2)
    table = {str(b): k_estimate(net, b, gamma_m=gm) for b in args.budgets}
    print(f"Gamma_M {gm:.10g}")
    for b, k in table.items():
        print(f"gamma_bar {b}: K = {k}")
    out = _out_dir(args)
    if out is not None:
        (out / "gamma_m.json").write_text(
            json.dumps({"Gamma_M": gm, "K": table, "epsilon2": args.epsilon2}, indent=2,
                       sort_keys=True) + "\n")
        _manifest(out, args, {"network": args.network})
    return EXIT_OK


def cmd_scenario_gen(args) -> int:
    wind = Wind(args.wind_speed, args.wind_bearing)
    land = generate_landscape(args.rows, args.cols, seed=args.seed, wind=wind,
                              seed_fraction=args.seed_fraction)
    params = _config(args).get("params")
    if params:
        land = Landscape(land.cells, land.wind, land.seeds, land.seed_fraction, dict(params))
    net = build_wildfire_network(land)
    out = _out_dir(args) or Path(".")
    land.save(out / "landscape.json")
    net.save(out / "network.json")
    x0 = seed_outbreak(land, seed=args.seed)
    (out / "state.json").write_text(json.dumps({"x": x0.tolist()}) + "\n")
    _write_rows(out / "landscape.csv", [f"c{c}" for c in range(land.cols)],
                [list(r) for r in land.cells])
    _write_rows(out / "initial_state.csv", [f"c{c}" for c in range(land.cols)],
                x0.reshape(land.rows, land.cols).astype(int).tolist())
    print(f"{land.rows}x{land.cols} landscape, {net.n_edges} edges, alpha {net.alpha:.6g}, "
          f"{int(x0.sum())} burning cells -> {out}")
    if args.out is not None:
        _manifest(out, args, {})
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Usage errors are input errors: exit 1, keeping 2 for internal failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_DOMAIN, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON with optional 'params' and 'mpc' sections")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--tol-feas", type=float, default=1e-8)
    common.add_argument("--tol-opt", type=float, default=1e-6)
    common.add_argument("--tail-tol", type=float, default=1e-9)

    p = _Parser(prog="spreadmpc",
                                description="Risk-bound MPC for networked spreading processes.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("validate", parents=[common], help="check a network or landscape")
    s.add_argument("network")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("simulate", parents=[common], help="uncontrolled trajectory and risk")
    s.add_argument("network")
    s.add_argument("--state", help="JSON list or {'x': [...]} (landscapes default to their seeds)")
    s.add_argument("--steps", type=int, default=100)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("mpc", parents=[common], help="closed-loop run")
    s.add_argument("scenario")
    s.add_argument("--state")
    s.add_argument("--gamma-bar", dest="gamma_bar", type=float)
    s.add_argument("--L", dest="L", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_mpc)

    s = sub.add_parser("gamma-m", parents=[common], help="minimum resource and K estimates")
    s.add_argument("network")
    s.add_argument("--budgets", type=float, nargs="+", default=[10.0, 20.0, 30.0])
    s.add_argument("--epsilon2", type=float, default=1e-8)
    s.set_defaults(func=cmd_gamma_m)

    s = sub.add_parser("scenario-gen", parents=[common], help="generate a wildfire landscape")
    s.add_argument("--rows", type=int, default=20)
    s.add_argument("--cols", type=int, default=20)
    s.add_argument("--wind-speed", type=float, default=4.0)
    s.add_argument("--wind-bearing", type=float, default=45.0,
                   help="direction the wind blows from, degrees clockwise from north")
    s.add_argument("--seed-fraction", type=float)
    s.set_defaults(func=cmd_scenario_gen)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = list(argv) if argv is not None else None
    for name in ("steps",):
        if getattr(args, name, None) is not None and getattr(args, name) < 0:
            parser.error(f"--{name} must be nonnegative")
    try:
        return args.func(args)
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except Exception as exc:  # noqa: BLE001 - top-level guard maps to exit code 2
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
