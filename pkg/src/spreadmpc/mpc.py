"""Receding-horizon closed loop on top of the relaxed optimal-control problem.

At every step the relaxed problem is solved at the current rates and state,
the first-stage allocation is applied, and the nonlinear plant advances one
step under the new rates.  The previous solution, shifted by one stage,
is checked for feasibility against the next program and blended with a
strictly interior point to warm-start the solver.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .conic import SolverSettings
from .dynamics import evaluate_risk, step_nonlinear
from .errors import AssumptionViolation, ConsistencyError, DomainError
from .network import RateState, SpreadingNetwork, build_system_matrix, rate_bound_violation
from .ocp import (OCP_TOL_GAP, Layout, OcpInstance, OcpSolution, build_relaxed_ocp, compute_gamma_m,
                  extract_solution, initial_point, regularized_bound)
from .conic import solve
from .resource import Allocation, resource_cost

LOG_COLUMNS = ("k", "risk", "risk_bound", "gamma_spent", "nnz_alloc", "solver_iters")


@dataclass
class MpcConfig:
    """Closed-loop settings.

    ``gamma_bar = 0`` is accepted and leaves the rates untouched.
    ``shift_tol`` bounds the constraint violation tolerated when the
    shifted previous solution is substituted into the next program.
    """

    L: int = 1
    gamma_bar: float = 10.0
    steps: int = 100
    tail_tol: float = 1e-9
    tol_feas: float = 1e-8
    tol_opt: float = 1e-6
    epsilon: float | None = None
    epsilon2: float = 1e-8
    max_iter: int = 500
    shift_tol: float = 1e-7
    budget_tol: float = 1e-6
    nnz_threshold: float = 1e-6
    compute_k: bool = True
    warm_start: bool = True

    def __post_init__(self):
        if int(self.L) != self.L or self.L < 1:
            raise DomainError("horizon L must be a positive integer")
        if not self.gamma_bar >= 0:
            raise DomainError("gamma_bar must be nonnegative")
        if int(self.steps) != self.steps or self.steps < 0:
            raise DomainError("steps must be a nonnegative integer")
        if not (self.tail_tol > 0 and self.tol_feas > 0 and self.tol_opt > 0):
            raise DomainError("tolerances must be positive")
        self.L, self.steps = int(self.L), int(self.steps)

    def solver_settings(self) -> SolverSettings:
        return SolverSettings(tol_feas=self.tol_feas, tol_opt=self.tol_opt, tol_gap=OCP_TOL_GAP,
                              max_iter=self.max_iter)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepEntry:
    """Everything recorded for one closed-loop step ``k``."""

    k: int
    x: np.ndarray
    rates: RateState              # A(k-1), the rates the step starts from
    new_rates: RateState          # A*(0|k), applied to the plant
    risk: float                   # risk of x(k) with the rates frozen at A(k)
    risk_tail: float              # truncation bound on ``risk``
    risk_bound: float             # p*(0|k) x(k)
    gamma_spent: float
    nnz_alloc: int
    solver_iters: int
    allocation: Allocation
    certificate: float            # (1/alpha) [C - (1 - alpha) p*(0|k)] x(k)
    shift_violation: float | None


def k_estimate(network: SpreadingNetwork | None, gamma_bar: float, epsilon2: float = 1e-8,
               gamma_m: float | None = None) -> int:
    """Step count after which the risk bound must decrease: ``ceil(Gamma_M / gamma_bar)``.

    Pass ``gamma_m`` to reuse a value computed once for several budgets.
    """
    if not gamma_bar > 0:
        raise DomainError("k_estimate needs a positive per-step budget")
    if gamma_m is None:
        gamma_m = compute_gamma_m(network, epsilon2)
    if gamma_m <= 0:
        return 0
    # guard against ratios like 30.000000000004 caused by rounding
    return int(math.ceil(gamma_m / gamma_bar - 1e-9))


def _instance(network, rates, x, cfg: MpcConfig) -> OcpInstance:
    return OcpInstance(network, rates, x, L=cfg.L, gamma_bar=cfg.gamma_bar, epsilon=cfg.epsilon)


def warm_start_shift(prev: OcpSolution, inst: OcpInstance) -> np.ndarray:
    """Previous solution shifted by one stage, as a point of ``inst``'s program.

    Stage ``l`` takes the priorities and allocation of stage ``l + 1``; the
    last stage keeps the last priorities and spends nothing.  ``inst`` must
    start from the rates ``prev`` applied first.  The epigraph variable is
    set to the exact objective value of the shifted priorities.
    """
    net, L = inst.network, inst.L
    if len(prev.U_star) != L:
        raise DomainError("previous solution has a different horizon")
    lay = Layout(net.n, net.n_edges, L)
    z = np.zeros(lay.m)
    for ell in range(L):
        src = min(ell + 1, L - 1)
        z[lay.y_slice(ell)] = np.log(prev.p_star[src])
        if ell + 1 < L:
            z[lay.u_slice(ell)] = prev.U_star[ell + 1].vector
    z[Layout.r] = math.log(regularized_bound(prev.p_star[min(1, L - 1)], inst.x, inst.epsilon))
    return z


def _warm_point(program, shifted, inst: OcpInstance):
    """Blend the shifted candidate with a strictly interior point."""
    z_int = initial_point(inst, program)
    z = 0.5 * (shifted + z_int)
    if program.lse_values(z).max(initial=-1.0) < 0 and program.violation(z) == 0:
        return z
    return z_int


def mpc_step(network: SpreadingNetwork, rates: RateState, x, cfg: MpcConfig,
             warm: OcpSolution | None = None, k: int = 0):
    """Solve the relaxed problem at ``(rates, x)`` and apply the first allocation.

    Returns ``(new_rates, entry, solution)``; pass ``solution`` back as
    ``warm`` on the next call.  Solver failures raise
    :class:`~spreadmpc.errors.SolverError` carrying the program dump.
    """
    inst = _instance(network, rates, x, cfg)
    program = build_relaxed_ocp(inst)
    shift_violation = None
    start = None
    if warm is not None:
        shifted = warm_start_shift(warm, inst)
        shift_violation = program.violation(shifted)
        if cfg.warm_start:
            start = _warm_point(program, shifted, inst)
    if start is None:
        start = initial_point(inst, program)
    settings = cfg.solver_settings()
    sol = solve(program, settings.tol_feas, settings.tol_opt, x0=start, settings=settings)
    ocp = extract_solution(inst, program, sol, settings.tol_feas)

    new_rates = ocp.rates_star[0]
    alloc = ocp.U_star[0]
    spent = resource_cost(network, alloc)
    if spent > cfg.gamma_bar + cfg.budget_tol:
        raise ConsistencyError(f"step {k}: spent {spent:.9g} exceeds budget {cfg.gamma_bar:.9g}")
    if (np.any(new_rates.beta > rates.beta * (1 + 1e-12))
            or np.any(new_rates.delta < rates.delta - 1e-12)):
        raise ConsistencyError(f"step {k}: rates increased")
    if rate_bound_violation(network, new_rates) > cfg.tol_feas:
        raise ConsistencyError(f"step {k}: rates crossed their floors")

    # the bound covers the planned schedule; the logged risk freezes the applied rates
    planned = evaluate_risk(network, ocp.rates_star, inst.x, tail_tol=cfg.tail_tol)
    bound = ocp.bound_at(inst.x)
    if bound < planned.value - cfg.tail_tol - 1e-9 * max(1.0, planned.value):
        raise ConsistencyError(f"step {k}: risk bound {bound:.12g} below risk {planned.value:.12g}")
    risk = planned if inst.L == 1 else evaluate_risk(network, new_rates, inst.x, tail_tol=cfg.tail_tol)
    alpha = network.alpha
    cert = float((network.cost - (1 - alpha) * ocp.p_star[0]) @ inst.x) / alpha
    entry = StepEntry(k, inst.x.copy(), rates, new_rates, risk.value, risk.truncation_bound, bound,
                      spent, alloc.nnz(cfg.nnz_threshold), sol.iterations, alloc, cert,
                      shift_violation)
    return new_rates, entry, ocp


@dataclass
class MpcRunLog:
    """Closed-loop record; ``entries[k]`` belongs to step ``k``."""

    config: MpcConfig
    entries: list = field(default_factory=list)
    final_x: np.ndarray | None = None
    final_rates: RateState | None = None
    gamma_m: float | None = None
    k_estimate: int | None = None
    note: str = ""

    def series(self, name: str) -> np.ndarray:
        return np.array([getattr(e, name) for e in self.entries], dtype=float)

    @property
    def states(self) -> np.ndarray:
        xs = [e.x for e in self.entries]
        if self.final_x is not None:
            xs.append(self.final_x)
        return np.array(xs)

    def empirical_k(self) -> int | None:
        """First step after which the logged risk bound decreases for the rest of the run."""
        b = self.series("risk_bound")
        if len(b) < 2:
            return None
        up = np.flatnonzero(np.diff(b) >= 0)
        return 0 if up.size == 0 else int(up[-1] + 1)

    def decrease_violations(self, tol: float = 1e-6, start: int | None = None) -> list:
        """Steps ``k >= start`` where ``Rbar(x(k)) - Rbar(x(k+1))`` misses the certificate by more than ``tol``."""
        start = (self.k_estimate or 0) if start is None else start
        b = self.series("risk_bound")
        bad = []
        for k in range(max(start, 0), len(b) - 1):
            e = self.entries[k]
            if not np.any(e.x > 0):
                continue
            drop = b[k] - b[k + 1]
            if drop < e.certificate - tol or (k >= (self.k_estimate or 0) and drop <= 0):
                bad.append(k)
        return bad

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for e in self.entries:
                w.writerow([e.k, repr(e.risk), repr(e.risk_bound), repr(e.gamma_spent), e.nnz_alloc,
                            e.solver_iters])

    def sidecar(self) -> dict:
        return {
            "K_estimate": self.k_estimate,
            "Gamma_M": self.gamma_m,
            "K_empirical": self.empirical_k(),
            "config": self.config.to_dict(),
            "note": self.note,
            "risk_tail": [e.risk_tail for e in self.entries],
            "decrease_certificate": [e.certificate for e in self.entries],
            "shift_violation": [e.shift_violation for e in self.entries],
        }

    def write_sidecar(self, path) -> None:
        Path(path).write_text(json.dumps(self.sidecar(), indent=2, sort_keys=True) + "\n")


def mpc_run(network: SpreadingNetwork, rates0: RateState, x0, cfg: MpcConfig,
            progress=None) -> MpcRunLog:
    """Closed loop for ``cfg.steps`` steps with online invariant checks.

    Raises :class:`~spreadmpc.errors.ConsistencyError` if a shifted
    candidate fails substitution, the budget is overspent, rates increase,
    or the risk bound falls below the evaluated risk.
    """
    log = MpcRunLog(cfg)
    if cfg.compute_k and cfg.gamma_bar > 0:
        try:
            log.gamma_m = float(compute_gamma_m(network, cfg.epsilon2))
            log.k_estimate = k_estimate(network, cfg.gamma_bar, gamma_m=log.gamma_m)
        except AssumptionViolation as exc:
            log.note = str(exc)
    rates = rates0
    x = np.asarray(x0, dtype=float)
    warm = None
    for k in range(cfg.steps):
        new_rates, entry, warm = mpc_step(network, rates, x, cfg, warm, k)
        if entry.shift_violation is not None and entry.shift_violation > cfg.shift_tol:
            raise ConsistencyError(
                f"step {k}: shifted candidate violates the program by {entry.shift_violation:.3g}")
        log.entries.append(entry)
        x = step_nonlinear(build_system_matrix(network, new_rates), x)
        rates = new_rates
        if progress is not None:
            progress(entry)
    log.final_x = x
    log.final_rates = rates
    return log
