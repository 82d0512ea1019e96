"""Relaxed optimal-control problem and the minimum-resource (Gamma_M) program.

The relaxed problem chooses priority vectors and allocations over a horizon
of ``L`` stages to minimize the regularized risk bound
``p(0) x + eps * sum(p(0))``.  With ``y = log p`` and allocations in nats it
becomes a program with one log-sum-exp block for the objective epigraph and
one per node and stage for the Bellman inequality
``p_j(l) >= c_j + alpha * sum_i p_i(l+1) A_ij(l)``.

Variable layout: ``r``, then ``y[l, i]`` stage-major, then ``U[l, e]`` where
``e`` runs over the edges followed by the ``n`` diagonal (recovery) entries.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .conic import INFEASIBLE, ConvexProgram, Solution, SolverSettings, solve
from .dynamics import terminal_priority
from .errors import AssumptionViolation, ConsistencyError, DomainError, SolverError
from .network import (RateState, SpreadingNetwork, build_system_matrix, check_rates,
                      rate_bound_violation, spectral_radius)
from .resource import Allocation, apply_allocation, max_allocation, resource_cost

# remaining headroom below this is rounding noise; such entries sit at their floor
CAP_TOL = 1e-9
INFLATE = 1e-3
# nodes weighted only by epsilon carry tiny multipliers; a tight gap keeps their Bellman rows exact
OCP_TOL_GAP = 1e-12


def default_epsilon(network: SpreadingNetwork) -> float:
    return 1e-6 * float(network.cost.min())


@dataclass(frozen=True, eq=False)
class OcpInstance:
    """Data for one MPC step: current rates ``A(k-1)``, detected state ``x(k)``."""

    network: SpreadingNetwork
    rates: RateState
    x: np.ndarray
    L: int = 1
    gamma_bar: float = 1.0
    epsilon: float = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.shape != (self.network.n,) or np.any(x < 0) or np.any(x > 1):
            raise DomainError("x must be a state vector in [0, 1]^n")
        object.__setattr__(self, "x", x)
        if self.L < 1:
            raise DomainError("horizon L must be at least 1")
        if self.gamma_bar < 0:
            raise DomainError("per-step budget must be nonnegative")
        if self.epsilon is None:
            object.__setattr__(self, "epsilon", default_epsilon(self.network))
        if not self.epsilon > 0:
            raise DomainError("epsilon must be positive")
        check_rates(self.network, self.rates, tol=1e-12)


class Layout:
    """Index arithmetic for the relaxed-OCP variable vector."""

    def __init__(self, n: int, n_edges: int, L: int):
        self.n, self.n_edges, self.L = n, n_edges, L
        self.n_alloc = n_edges + n
        self.m = 1 + n * L + self.n_alloc * L

    r = 0

    def y(self, ell, i):
        return 1 + np.asarray(ell) * self.n + np.asarray(i)

    def u(self, ell, e):
        return 1 + self.n * self.L + np.asarray(ell) * self.n_alloc + np.asarray(e)

    def y_slice(self, ell):
        s = 1 + ell * self.n
        return slice(s, s + self.n)

    def u_slice(self, ell):
        s = 1 + self.n * self.L + ell * self.n_alloc
        return slice(s, s + self.n_alloc)


def _bellman_coefficients(network: SpreadingNetwork, rates: RateState):
    a = network.alpha
    h = network.h
    coef_edge = a * h * rates.beta
    coef_b = a * h * (network.delta_cap - rates.delta)
    coef_d = a * (1.0 - h * network.delta_cap)
    return coef_edge, coef_b, coef_d


def build_relaxed_ocp(inst: OcpInstance, check: bool = True) -> ConvexProgram:
    """Compile an :class:`OcpInstance` into a :class:`ConvexProgram`."""
    net, L, n, E = inst.network, inst.L, inst.network.n, inst.network.n_edges
    if check:
        rho = spectral_radius(build_system_matrix(net, inst.rates))
        if net.alpha * rho >= 1:
            raise AssumptionViolation(f"alpha * rho(A) = {net.alpha * rho:.6g} >= 1")
    lay = Layout(n, E, L)
    a_e, b, d = _bellman_coefficients(net, inst.rates)
    rows, cols, vals, offs, blocks = [], [], [], [], []
    nterm = 0

    def add_terms(block, offset, entries):
        # entries: list of (var_index_array, coef) aligned with block
        nonlocal nterm
        k = len(block)
        tid = np.arange(nterm, nterm + k)
        for var, cf in entries:
            rows.append(tid)
            cols.append(np.broadcast_to(var, (k,)))
            vals.append(np.full(k, cf, dtype=float))
        offs.append(np.broadcast_to(offset, (k,)).astype(float))
        blocks.append(np.asarray(block))
        nterm += k

    # objective epigraph: block 0
    idx = np.arange(n)
    add_terms(np.zeros(n, dtype=np.int64), np.log(inst.x + inst.epsilon),
              [(lay.y(0, idx), 1.0), (np.full(n, lay.r), -1.0)])
    has_b = b > 0
    has_d = d > 0
    er, ec = net.rows, net.cols
    for ell in range(L):
        nxt = min(ell + 1, L - 1)
        base = 1 + ell * n
        # spreading terms: block of the infecting node j = cols[e]
        entries = [(lay.y(nxt, er), 1.0), (lay.y(ell, ec), -1.0)]
        entries += [(lay.u(s, np.arange(E)), -1.0) for s in range(ell + 1)]
        add_terms(base + ec, np.log(a_e), entries)
        # recovery headroom term
        j = idx[has_b]
        entries = [(lay.y(nxt, j), 1.0), (lay.y(ell, j), -1.0)]
        entries += [(lay.u(s, E + j), -1.0) for s in range(ell + 1)]
        add_terms(base + j, np.log(b[has_b]), entries)
        # cost term
        add_terms(base + idx, np.log(net.cost), [(lay.y(ell, idx), -1.0)])
        # saturation part of the diagonal
        j = idx[has_d]
        add_terms(base + j, np.log(d[has_d]), [(lay.y(nxt, j), 1.0), (lay.y(ell, j), -1.0)])

    blocks = np.concatenate(blocks)
    order = np.argsort(blocks, kind="stable")
    new_id = np.empty_like(order)
    new_id[order] = np.arange(len(order))
    F = sp.csr_matrix(
        (np.concatenate(vals), (new_id[np.concatenate(rows)], np.concatenate(cols))),
        shape=(nterm, lay.m))
    F.sum_duplicates()
    F.eliminate_zeros()
    offset = np.concatenate(offs)[order]
    n_blocks = 1 + n * L
    ptr = np.concatenate([[0], np.cumsum(np.bincount(blocks, minlength=n_blocks))])

    lower = np.full(lay.m, -np.inf)
    upper = np.full(lay.m, np.inf)
    cap = max_allocation(net, inst.rates).vector
    cap = np.where(cap <= CAP_TOL, 0.0, cap)
    w = np.concatenate([net.edge_weight, net.node_weight])
    g_rows, g_cols, g_vals, g_rhs, labels = [], [], [], [], []
    for ell in range(L):
        sl = lay.u_slice(ell)
        lower[sl] = 0.0
        if inst.gamma_bar <= 0:
            upper[sl] = 0.0
            continue
        upper[sl] = np.where(cap == 0.0, 0.0, cap if L == 1 else np.inf)
    if inst.gamma_bar > 0:
        nrow = 0
        if L > 1:
            live = np.flatnonzero(cap > 0)
            for k, e in enumerate(live):
                g_rows.append(np.full(L, nrow + k))
                g_cols.append(lay.u(np.arange(L), e))
                g_vals.append(np.ones(L))
            g_rhs.append(cap[live])
            labels += [f"cap[{e}]" for e in live]
            nrow += len(live)
        for ell in range(L):
            live = np.flatnonzero(cap > 0)
            g_rows.append(np.full(len(live), nrow))
            g_cols.append(lay.u(ell, live))
            g_vals.append(w[live])
            g_rhs.append([inst.gamma_bar])
            labels.append(f"budget[{ell}]")
            nrow += 1
        G = sp.csr_matrix((np.concatenate(g_vals), (np.concatenate(g_rows), np.concatenate(g_cols))),
                          shape=(nrow, lay.m))
        g = np.concatenate([np.asarray(v, float) for v in g_rhs])
    else:
        G, g = None, None

    names = ["r"] + [f"y[{l},{i}]" for l in range(L) for i in range(n)]
    alloc_names = [f"U[{i},{j}]" for i, j in zip(er, ec)] + [f"U[{i},{i}]" for i in range(n)]
    names += [f"{nm}@{l}" for l in range(L) for nm in alloc_names]
    lse_labels = ["objective"] + [f"bellman[{l},{j}]" for l in range(L) for j in range(n)]
    c = np.zeros(lay.m)
    c[lay.r] = 1.0
    return ConvexProgram(objective=c, lower=lower, upper=upper, lse_matrix=F, lse_offset=offset,
                         lse_ptr=ptr, ineq_matrix=G, ineq_rhs=g, var_names=names,
                         lse_labels=lse_labels, ineq_labels=labels if G is not None else None)


def regularized_bound(p0, x, epsilon) -> float:
    return float(np.asarray(p0) @ (np.asarray(x) + epsilon))


def interior_allocation(inst: OcpInstance, program: ConvexProgram) -> np.ndarray:
    """Small strictly positive allocations inside both the caps and the budgets."""
    lay = Layout(inst.network.n, inst.network.n_edges, inst.L)
    z = np.zeros(lay.m)
    lo, up = program.lower, program.upper
    w = np.concatenate([inst.network.edge_weight, inst.network.node_weight])
    cap = max_allocation(inst.network, inst.rates).vector
    for ell in range(inst.L):
        sl = lay.u_slice(ell)
        free = up[sl] > lo[sl]
        nfree = max(int(free.sum()), 1)
        u = 0.5 * np.minimum(cap / inst.L, inst.gamma_bar / (nfree * w))
        z[sl] = np.where(free, u, 0.0)
    return z


def initial_point(inst: OcpInstance, program: ConvexProgram | None = None) -> np.ndarray:
    """Strictly feasible start: small interior allocations, inflated constant-rate priorities.

    Constant-rate priorities meet every Bellman block with equality when no
    resource is spent; scaling them by ``1 + 1e-3`` and spending a little
    only lowers each block's value, so every inequality holds strictly.
    """
    program = build_relaxed_ocp(inst, check=False) if program is None else program
    lay = Layout(inst.network.n, inst.network.n_edges, inst.L)
    z = interior_allocation(inst, program)
    p = terminal_priority(inst.network, inst.rates, check=False) * (1.0 + INFLATE)
    for ell in range(inst.L):
        z[lay.y_slice(ell)] = np.log(p)
    z[lay.r] = math.log(regularized_bound(p, inst.x, inst.epsilon)) + 0.1
    return z


@dataclass
class OcpSolution:
    p_star: np.ndarray            # (L + 1, n)
    U_star: list                  # L allocations
    rates_star: list              # L rate states
    objective: float              # p(0) (x + eps)
    log_objective: float          # solver's r
    solver_report: Solution
    program: ConvexProgram = field(default=None, repr=False)

    @property
    def risk_bound(self) -> float:
        return self.bound_at(self._x)

    def bound_at(self, x) -> float:
        return float(self.p_star[0] @ np.asarray(x, float))

    _x: np.ndarray = field(default=None, repr=False)


def unpack(inst: OcpInstance, z):
    """Split a program point into (p sequence, allocation list)."""
    net = inst.network
    lay = Layout(net.n, net.n_edges, inst.L)
    p = np.empty((inst.L + 1, net.n))
    U = []
    for ell in range(inst.L):
        p[ell] = np.exp(z[lay.y_slice(ell)])
        u = np.maximum(z[lay.u_slice(ell)], 0.0)
        U.append(Allocation(u[:net.n_edges], u[net.n_edges:]))
    p[inst.L] = p[inst.L - 1]
    return p, U


def fold_rates(network: SpreadingNetwork, rates: RateState, U) -> list:
    out = []
    for u in U:
        rates = apply_allocation(network, rates, u)
        out.append(rates)
    return out


def extract_solution(inst: OcpInstance, program: ConvexProgram, sol: Solution,
                     tol_feas: float = 1e-8) -> OcpSolution:
    if not sol.optimal:
        raise SolverError(f"solver status {sol.status}: {sol.message}", sol, program.to_dict())
    p, U = unpack(inst, sol.z)
    rates = fold_rates(inst.network, inst.rates, U)
    for ell, r in enumerate(rates):
        viol = rate_bound_violation(inst.network, r)
        if viol > tol_feas:
            raise ConsistencyError(f"stage {ell} rates leave the rate box by {viol:.3g}")
    obj = regularized_bound(p[0], inst.x, inst.epsilon)
    r = float(sol.z[Layout.r])
    if abs(obj - math.exp(r)) > 1e-6 * obj:
        raise ConsistencyError(f"objective {obj:.12g} disagrees with exp(r) = {math.exp(r):.12g}")
    out = OcpSolution(p, U, rates, obj, r, sol, program)
    out._x = inst.x
    return out


def solve_ocp(inst: OcpInstance, settings: SolverSettings | None = None,
              start=None) -> OcpSolution:
    """Build, solve and extract; ``start`` is an optional strictly feasible point."""
    settings = SolverSettings(tol_gap=OCP_TOL_GAP) if settings is None else settings
    program = build_relaxed_ocp(inst)
    z0 = initial_point(inst, program) if start is None else start
    sol = solve(program, settings.tol_feas, settings.tol_opt, x0=z0, settings=settings)
    if not sol.optimal:
        raise SolverError(f"relaxed OCP not solved: {sol.status} ({sol.message})", sol,
                          program.to_dict())
    return extract_solution(inst, program, sol, settings.tol_feas)


@dataclass
class OcpDiagnostics:
    bellman_residual: float
    bellman_relative: float
    floor_index: int
    rates_decreasing: bool
    priorities_decreasing: bool
    headroom: float
    spent: list
    all_in_gap: float | None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _A_entries(network: SpreadingNetwork, rates: RateState) -> np.ndarray:
    return np.concatenate([network.h * rates.beta, 1.0 - network.h * rates.delta])


def _strictly_above(a, b, slack) -> bool:
    """``a`` dominates ``b`` entry-wise (up to slack) and exceeds it somewhere by more than slack."""
    diff = np.asarray(a) - np.asarray(b)
    return bool(diff.min(initial=0.0) >= -slack and diff.max(initial=0.0) > slack)


def bellman_residual(network: SpreadingNetwork, p: np.ndarray, rates: list) -> float:
    res = 0.0
    for ell, r in enumerate(rates):
        A = build_system_matrix(network, r, check=False)
        rhs = network.cost + network.alpha * (A.T @ p[ell + 1])
        res = max(res, float(np.abs(p[ell] - rhs).max()))
    return res


def diagnose(inst: OcpInstance, sol: OcpSolution, slack: float = 1e-7) -> OcpDiagnostics:
    net = inst.network
    res = bellman_residual(net, sol.p_star, sol.rates_star)
    floor = _A_entries(net, net.floor_rates())
    seq = [_A_entries(net, inst.rates)] + [_A_entries(net, r) for r in sol.rates_star]
    # seq[l + 1] is A*(l); the floor index is the largest l with A*(l-1) strictly above the floor
    floor_index = 0
    for ell in range(inst.L + 1):
        if _strictly_above(seq[ell], floor, slack):
            floor_index = ell
    rates_dec = all(_strictly_above(seq[ell], seq[ell + 1], slack) for ell in range(floor_index))
    p = sol.p_star
    prio_dec = all(_strictly_above(p[ell - 1], p[ell], slack) for ell in range(1, floor_index))
    headroom = resource_cost(net, max_allocation(net, inst.rates))
    spent = [resource_cost(net, u) for u in sol.U_star]
    gap = abs(spent[0] - inst.gamma_bar) if headroom > inst.gamma_bar else None
    return OcpDiagnostics(res, res / float(np.abs(net.cost).max()), floor_index, rates_dec,
                          prio_dec, headroom, spent, gap)


# -- minimum resource to reach the admissible set ---------------------------

def build_gamma_m_program(network: SpreadingNetwork, epsilon2: float = 1e-8) -> ConvexProgram:
    """Cheapest allocation from the unmodified rates into the admissible set.

    Variables are the ``n_edges + n`` allocation entries (edges, then nodes).
    Node ``j`` gets the block
    ``log(sum_i c_i beta_ij e^{-U_ij} / (c_j D_j) + (D_j - delta_j) e^{-U_jj} / D_j + eps2) <= 0``
    with ``D`` the saturation rates, which forces the weighted cut condition.
    """
    n, E = network.n, network.n_edges
    m = E + n
    cap = max_allocation(network, network.unmodified_rates()).vector
    cap = np.where(cap <= CAP_TOL, 0.0, cap)
    er, ec = network.rows, network.cols
    c, D = network.cost, network.delta_cap
    idx = np.arange(n)
    blocks = np.concatenate([ec, idx, idx])
    offsets = np.concatenate([
        np.log(c[er] * network.beta_upper / (c[ec] * D[ec])),
        np.log((D - network.delta_lower) / D),
        np.full(n, math.log(epsilon2)),
    ])
    term_var = np.concatenate([np.arange(E), E + idx, np.full(n, -1)])
    order = np.argsort(blocks, kind="stable")
    blocks, offsets, term_var = blocks[order], offsets[order], term_var[order]
    has = term_var >= 0
    F = sp.csr_matrix((-np.ones(has.sum()), (np.flatnonzero(has), term_var[has])),
                      shape=(len(blocks), m))
    ptr = np.concatenate([[0], np.cumsum(np.bincount(blocks, minlength=n))])
    objective = np.concatenate([network.edge_weight, network.node_weight])
    names = [f"U[{i},{j}]" for i, j in zip(er, ec)] + [f"U[{i},{i}]" for i in range(n)]
    return ConvexProgram(objective=objective, lower=np.zeros(m), upper=cap, lse_matrix=F,
                         lse_offset=offsets, lse_ptr=ptr, var_names=names,
                         lse_labels=[f"admissible[{j}]" for j in range(n)])


def compute_gamma_m(network: SpreadingNetwork, epsilon2: float = 1e-8,
                    settings: SolverSettings | None = None, return_solution: bool = False):
    """Minimum weighted resource taking the unmodified rates into the admissible set."""
    program = build_gamma_m_program(network, epsilon2)
    if program.lse_values(np.zeros(program.m)).max() < 0:
        # already admissible without spending anything
        zero = np.zeros(program.m)
        return (0.0, zero) if return_solution else 0.0
    settings = SolverSettings(max_iter=2000) if settings is None else settings
    sol = solve(program, settings.tol_feas, settings.tol_opt, settings=settings)
    if sol.status == INFEASIBLE:
        raise AssumptionViolation(
            "admissible set unreachable: no rates inside the bounds satisfy the weighted cut condition")
    if not sol.optimal:
        raise SolverError(f"Gamma_M program not solved: {sol.status} ({sol.message})", sol,
                          program.to_dict())
    return (sol.objective_value, sol.z) if return_solution else sol.objective_value
