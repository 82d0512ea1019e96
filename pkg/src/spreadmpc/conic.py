"""Interior-point solver for linear objectives under log-sum-exp constraints.

Program form::

    minimize    c @ z
    subject to  log(sum_t exp(F_k z + f_k)_t) <= 0     for each lse block k
                G z <= g
                E z == e
                lower <= z <= upper

These are the smooth representation of the exponential-cone programs built
by :mod:`spreadmpc.ocp`.  The backend is a primal-dual interior-point
method.  Each lse block carries its own slack variable, so block curvature
appears as a consistency residual rather than truncating steps.  Steps stay
in a wide neighbourhood of the central path and must reduce the residual
norm.  Newton systems are sparse; constraint rows touching many variables
(budget rows, the objective epigraph) enter the KKT matrix as augmented
columns instead of being expanded into dense blocks.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import nnls

from .errors import DomainError

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max_iter"
NUMERICAL_FAILURE = "numerical_failure"

_DENSE_ROW = 48


def _csr(a, shape) -> sp.csr_matrix:
    if a is None:
        return sp.csr_matrix(shape)
    a = sp.csr_matrix(a, dtype=float)
    if a.shape != shape:
        raise DomainError(f"matrix has shape {a.shape}, expected {shape}")
    a.sum_duplicates()
    a.sort_indices()
    return a


@dataclass(eq=False)
class ConvexProgram:
    """Linear objective, log-sum-exp blocks, affine constraints and a box.

    Lse block ``k`` owns the term rows ``lse_ptr[k]:lse_ptr[k+1]`` of
    ``lse_matrix``/``lse_offset`` and encodes
    ``log sum exp(lse_matrix @ z + lse_offset) <= 0`` over those rows.
    """

    objective: np.ndarray
    lower: np.ndarray = None
    upper: np.ndarray = None
    lse_matrix: sp.csr_matrix = None
    lse_offset: np.ndarray = None
    lse_ptr: np.ndarray = None
    ineq_matrix: sp.csr_matrix = None
    ineq_rhs: np.ndarray = None
    eq_matrix: sp.csr_matrix = None
    eq_rhs: np.ndarray = None
    var_names: list = None
    lse_labels: list = None
    ineq_labels: list = None

    def __post_init__(self):
        self.objective = np.asarray(self.objective, dtype=float).ravel()
        m = self.m
        self.lower = np.full(m, -np.inf) if self.lower is None else np.asarray(self.lower, float)
        self.upper = np.full(m, np.inf) if self.upper is None else np.asarray(self.upper, float)
        if self.lower.shape != (m,) or self.upper.shape != (m,):
            raise DomainError("bounds must have one entry per variable")
        T = 0 if self.lse_offset is None else len(self.lse_offset)
        self.lse_offset = np.zeros(0) if self.lse_offset is None else np.asarray(self.lse_offset, float)
        self.lse_matrix = _csr(self.lse_matrix, (T, m))
        self.lse_ptr = np.zeros(1, dtype=np.int64) if self.lse_ptr is None else np.asarray(self.lse_ptr, np.int64)
        if self.lse_ptr[0] != 0 or self.lse_ptr[-1] != T or np.any(np.diff(self.lse_ptr) < 1):
            raise DomainError("lse_ptr must partition the term rows into non-empty blocks")
        p = 0 if self.ineq_rhs is None else len(self.ineq_rhs)
        self.ineq_rhs = np.zeros(0) if self.ineq_rhs is None else np.asarray(self.ineq_rhs, float)
        self.ineq_matrix = _csr(self.ineq_matrix, (p, m))
        q = 0 if self.eq_rhs is None else len(self.eq_rhs)
        self.eq_rhs = np.zeros(0) if self.eq_rhs is None else np.asarray(self.eq_rhs, float)
        self.eq_matrix = _csr(self.eq_matrix, (q, m))
        if not (np.all(np.isfinite(self.objective)) and np.all(np.isfinite(self.lse_offset))):
            raise DomainError("objective and lse offsets must be finite")

    @property
    def m(self) -> int:
        return len(self.objective)

    @property
    def n_lse(self) -> int:
        return len(self.lse_ptr) - 1

    def lse_values(self, z) -> np.ndarray:
        """Value of every lse block at ``z``, computed in max-shifted form."""
        v = self.lse_matrix @ np.asarray(z, float) + self.lse_offset
        return _lse_groups(v, self.lse_ptr)[0]

    def violation(self, z) -> float:
        """Largest constraint violation at ``z`` (0 when feasible)."""
        z = np.asarray(z, float)
        parts = [0.0]
        if self.n_lse:
            parts.append(self.lse_values(z).max())
        if len(self.ineq_rhs):
            parts.append((self.ineq_matrix @ z - self.ineq_rhs).max())
        if len(self.eq_rhs):
            parts.append(np.abs(self.eq_matrix @ z - self.eq_rhs).max())
        parts.append((self.lower - z).max(initial=-np.inf))
        parts.append((z - self.upper).max(initial=-np.inf))
        return float(max(parts))

    # -- debug dump ------------------------------------------------------
    def to_dict(self) -> dict:
        def coo(a):
            a = a.tocoo()
            return {"shape": list(a.shape), "row": a.row.tolist(), "col": a.col.tolist(),
                    "val": a.data.tolist()}

        def num(v):
            return [None if not np.isfinite(x) else float(x) for x in v]

        return {
            "format": "lse-program/1",
            "description": "min c.z s.t. logsumexp(F z + f) <= 0 per block, G z <= g, E z = e, lower <= z <= upper",
            "objective": self.objective.tolist(),
            "lower": num(self.lower), "upper": num(self.upper),
            "var_names": self.var_names,
            "lse": {"matrix": coo(self.lse_matrix), "offset": self.lse_offset.tolist(),
                    "ptr": self.lse_ptr.tolist(), "labels": self.lse_labels},
            "ineq": {"matrix": coo(self.ineq_matrix), "rhs": self.ineq_rhs.tolist(),
                     "labels": self.ineq_labels},
            "eq": {"matrix": coo(self.eq_matrix), "rhs": self.eq_rhs.tolist()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConvexProgram":
        def mat(x):
            return sp.csr_matrix((x["val"], (x["row"], x["col"])), shape=tuple(x["shape"]))

        def num(v, fill):
            return np.array([fill if x is None else x for x in v], float)

        return cls(
            objective=d["objective"],
            lower=num(d["lower"], -np.inf), upper=num(d["upper"], np.inf),
            lse_matrix=mat(d["lse"]["matrix"]), lse_offset=d["lse"]["offset"],
            lse_ptr=d["lse"]["ptr"],
            ineq_matrix=mat(d["ineq"]["matrix"]), ineq_rhs=d["ineq"]["rhs"],
            eq_matrix=mat(d["eq"]["matrix"]), eq_rhs=d["eq"]["rhs"],
            var_names=d.get("var_names"), lse_labels=d["lse"].get("labels"),
            ineq_labels=d["ineq"].get("labels"),
        )

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))


class ProgramBuilder:
    """Incremental construction of a :class:`ConvexProgram` from named pieces.

    Terms and rows are given as ``{variable_index: coefficient}`` mappings.
    """

    def __init__(self):
        self._lower, self._upper, self._names = [], [], []
        self._obj = {}
        self._lse = []          # (coefs, offset) per term
        self._lse_ptr = [0]
        self._lse_labels = []
        self._ineq, self._ineq_rhs, self._ineq_labels = [], [], []
        self._eq, self._eq_rhs = [], []

    def var(self, name=None, lower=-np.inf, upper=np.inf) -> int:
        self._lower.append(float(lower))
        self._upper.append(float(upper))
        self._names.append(name if name is not None else f"z{len(self._names)}")
        return len(self._lower) - 1

    def minimize(self, coefs: dict) -> None:
        self._obj = dict(coefs)

    def lse(self, terms, label=None) -> int:
        terms = list(terms)
        if not terms:
            raise DomainError("an lse constraint needs at least one term")
        for coefs, offset in terms:
            self._lse.append((dict(coefs), float(offset)))
        self._lse_ptr.append(len(self._lse))
        self._lse_labels.append(label)
        return len(self._lse_labels) - 1

    def le(self, coefs: dict, rhs: float, label=None) -> None:
        self._ineq.append(dict(coefs))
        self._ineq_rhs.append(float(rhs))
        self._ineq_labels.append(label)

    def eq(self, coefs: dict, rhs: float) -> None:
        self._eq.append(dict(coefs))
        self._eq_rhs.append(float(rhs))

    @staticmethod
    def _rows(rows, m):
        r, c, v = [], [], []
        for k, coefs in enumerate(rows):
            for j, a in coefs.items():
                if not 0 <= j < m:
                    raise DomainError(f"constraint references undeclared variable {j}")
                r.append(k)
                c.append(j)
                v.append(a)
        return sp.csr_matrix((v, (r, c)), shape=(len(rows), m))

    def build(self) -> ConvexProgram:
        m = len(self._lower)
        obj = np.zeros(m)
        for j, a in self._obj.items():
            obj[j] = a
        return ConvexProgram(
            objective=obj, lower=np.array(self._lower), upper=np.array(self._upper),
            lse_matrix=self._rows([t[0] for t in self._lse], m),
            lse_offset=np.array([t[1] for t in self._lse]),
            lse_ptr=np.array(self._lse_ptr),
            ineq_matrix=self._rows(self._ineq, m), ineq_rhs=np.array(self._ineq_rhs),
            eq_matrix=self._rows(self._eq, m), eq_rhs=np.array(self._eq_rhs),
            var_names=self._names, lse_labels=self._lse_labels, ineq_labels=self._ineq_labels,
        )


@dataclass
class KKTReport:
    feasibility: float
    stationarity: float
    complementarity: float

    def ok(self, tol_feas: float, tol_opt: float) -> bool:
        return self.feasibility <= tol_feas and self.stationarity <= tol_opt


@dataclass
class Multipliers:
    lse: np.ndarray
    ineq: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    eq: np.ndarray


@dataclass
class Solution:
    z: np.ndarray
    objective_value: float
    status: str
    kkt: KKTReport
    iterations: int = 0
    multipliers: Multipliers = None
    message: str = ""
    phase1_value: float = None

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


def _lse_groups(v, ptr):
    starts = ptr[:-1]
    if len(starts) == 0:
        return np.zeros(0), np.zeros(0)
    counts = np.diff(ptr)
    mx = np.maximum.reduceat(v, starts)
    ex = np.exp(v - np.repeat(mx, counts))
    s = np.add.reduceat(ex, starts)
    return mx + np.log(s), ex / np.repeat(s, counts)


def _stationarity(prog: ConvexProgram, z, mult: Multipliers) -> np.ndarray:
    grad = prog.objective.copy()
    if prog.n_lse:
        v = prog.lse_matrix @ z + prog.lse_offset
        _, pi = _lse_groups(v, prog.lse_ptr)
        counts = np.diff(prog.lse_ptr)
        grad += prog.lse_matrix.T @ (pi * np.repeat(mult.lse, counts))
    grad += prog.ineq_matrix.T @ mult.ineq
    grad += prog.eq_matrix.T @ mult.eq
    grad += mult.upper - mult.lower
    return grad


def kkt_residuals(program: ConvexProgram, z, multipliers: Multipliers | None = None,
                  active_tol: float = 1e-6) -> KKTReport:
    """Primal feasibility, dual stationarity and complementarity at ``z``.

    Without ``multipliers`` the best nonnegative multipliers supported on the
    constraints active within ``active_tol`` are fitted by NNLS, so a point
    away from every active constraint reports ``|c|`` as its stationarity.
    """
    z = np.asarray(z, float)
    prog = program
    feas = prog.violation(z)
    if multipliers is None:
        multipliers = _fit_multipliers(prog, z, active_tol)
    r = _stationarity(prog, z, multipliers)
    comp = 0.0
    if prog.n_lse:
        comp += float(np.abs(multipliers.lse * prog.lse_values(z)).sum())
    if len(prog.ineq_rhs):
        comp += float(np.abs(multipliers.ineq * (prog.ineq_rhs - prog.ineq_matrix @ z)).sum())
    fin_lo, fin_hi = np.isfinite(prog.lower), np.isfinite(prog.upper)
    comp += float(np.abs(multipliers.lower[fin_lo] * (z - prog.lower)[fin_lo]).sum())
    comp += float(np.abs(multipliers.upper[fin_hi] * (prog.upper - z)[fin_hi]).sum())
    return KKTReport(feas, float(np.abs(r).max(initial=0.0)), comp)


def _fit_multipliers(prog: ConvexProgram, z, active_tol) -> Multipliers:
    m = prog.m
    cols, kinds = [], []
    if prog.n_lse:
        g = prog.lse_values(z)
        v = prog.lse_matrix @ z + prog.lse_offset
        _, pi = _lse_groups(v, prog.lse_ptr)
        counts = np.diff(prog.lse_ptr)
        P = sp.csr_matrix((pi, (np.repeat(np.arange(prog.n_lse), counts), np.arange(len(v)))),
                          shape=(prog.n_lse, len(v)))
        J = (P @ prog.lse_matrix).toarray()
        for k in np.flatnonzero(g >= -active_tol):
            cols.append(J[k])
            kinds.append(("lse", k))
    if len(prog.ineq_rhs):
        s = prog.ineq_rhs - prog.ineq_matrix @ z
        G = prog.ineq_matrix.toarray()
        for k in np.flatnonzero(s <= active_tol):
            cols.append(G[k])
            kinds.append(("ineq", k))
    for j in np.flatnonzero(z - prog.lower <= active_tol):
        e = np.zeros(m)
        e[j] = -1.0
        cols.append(e)
        kinds.append(("lower", j))
    for j in np.flatnonzero(prog.upper - z <= active_tol):
        e = np.zeros(m)
        e[j] = 1.0
        cols.append(e)
        kinds.append(("upper", j))
    Eq = prog.eq_matrix.toarray()
    for k in range(len(prog.eq_rhs)):
        cols.append(Eq[k])
        kinds.append(("eq+", k))
        cols.append(-Eq[k])
        kinds.append(("eq-", k))
    mult = Multipliers(np.zeros(prog.n_lse), np.zeros(len(prog.ineq_rhs)), np.zeros(m),
                       np.zeros(m), np.zeros(len(prog.eq_rhs)))
    if cols:
        lam, _ = nnls(np.array(cols).T, -prog.objective, maxiter=50 * len(cols) + 100)
        for (kind, k), val in zip(kinds, lam):
            if kind == "eq+":
                mult.eq[k] += val
            elif kind == "eq-":
                mult.eq[k] -= val
            else:
                getattr(mult, kind)[k] = val
    return mult


class _Kernel:
    """Constraint evaluation and Newton systems for a program without fixed variables.

    Inequalities are stacked as: lse blocks, rows of ``G``, finite lower
    bounds, finite upper bounds, each written ``f_i(z) <= 0``.  Linear rows
    use their exact slack ``-f_i(z)``; lse blocks carry a separate slack
    ``s_i`` with ``f_i(z) + s_i = 0`` enforced as a residual, so block
    curvature shows up in that residual instead of truncating steps.
    """

    def __init__(self, prog: ConvexProgram):
        self.prog = prog
        self.c = prog.objective
        self.F = prog.lse_matrix
        self.FT = prog.lse_matrix.T.tocsr()
        self.f0 = prog.lse_offset
        self.ptr = prog.lse_ptr
        self.K = prog.n_lse
        self.counts = np.diff(self.ptr)
        self.grp = np.repeat(np.arange(self.K), self.counts)
        self.G = prog.ineq_matrix
        self.GT = prog.ineq_matrix.T.tocsr()
        self.g = prog.ineq_rhs
        self.E = prog.eq_matrix
        self.e = prog.eq_rhs
        self.lo_idx = np.flatnonzero(np.isfinite(prog.lower))
        self.hi_idx = np.flatnonzero(np.isfinite(prog.upper))
        self.lo = prog.lower[self.lo_idx]
        self.hi = prog.upper[self.hi_idx]
        nnz_G = np.diff(self.G.indptr)
        self.G_dense = np.flatnonzero(nnz_G > _DENSE_ROW)
        self.G_sparse = np.flatnonzero(nnz_G <= _DENSE_ROW)
        self.Gs = self.G[self.G_sparse]
        self.Gd = self.G[self.G_dense]
        sizes = [self.K, len(self.g), len(self.lo_idx), len(self.hi_idx)]
        self.cuts = np.cumsum([0] + sizes)
        self.n_ineq = int(self.cuts[-1])

    def split(self, v):
        return [v[self.cuts[i]:self.cuts[i + 1]] for i in range(4)]

    def lse(self, z):
        v = self.F @ z + self.f0
        return _lse_groups(v, self.ptr)

    def linear_slacks(self, z):
        return np.concatenate([self.g - self.G @ z, z[self.lo_idx] - self.lo,
                               self.hi - z[self.hi_idx]])

    def slacks(self, z):
        """Exact slacks ``-f(z)`` in stacked order and the lse softmax weights."""
        gl, pi = self.lse(z)
        return np.concatenate([-gl, self.linear_slacks(z)]), pi

    @staticmethod
    def strict(s) -> bool:
        return s.size == 0 or bool(s.min() > 0)

    def jac(self, dz, pi):
        """Directional derivatives ``grad f_i . dz`` in stacked order."""
        parts = [np.zeros(0)]
        if self.K:
            parts[0] = np.bincount(self.grp, weights=pi * (self.F @ dz), minlength=self.K)
        parts += [self.G @ dz, -dz[self.lo_idx], dz[self.hi_idx]]
        return np.concatenate(parts)

    def jac_t(self, lam, pi):
        """``sum_i lam_i grad f_i``."""
        l_lse, l_G, l_lo, l_hi = self.split(lam)
        out = np.zeros(len(self.c))
        if self.K:
            out += self.FT @ (pi * l_lse[self.grp])
        if len(l_G):
            out += self.GT @ l_G
        np.subtract.at(out, self.lo_idx, l_lo)
        np.add.at(out, self.hi_idx, l_hi)
        return out

    def state(self, z, s_lse):
        """Stacked slacks, softmax weights and the lse consistency residual ``f + s``."""
        gl, pi = self.lse(z)
        s = np.concatenate([s_lse, self.linear_slacks(z)])
        return s, pi, gl + s_lse

    def reset(self, z, s_lse, rel=0.5):
        """Snap lse slacks onto ``-f(z)`` where that moves them by at most ``rel``.

        Keeps curvature of inactive blocks from accumulating in the
        consistency residual, where Newton steps cannot remove it.
        """
        if not self.K:
            return s_lse
        exact = -self.lse(z)[0]
        snap = (exact > 0) & (np.abs(exact - s_lse) <= rel * s_lse)
        return np.where(snap, exact, s_lse)

    def residuals(self, z, lam, nu, mu, s, pi, rp):
        rd = self.c + self.jac_t(lam, pi)
        if len(nu):
            rd = rd + self.E.T @ nu
        return rd, lam * s - mu, rp, self.E @ z - self.e

    def newton(self, z, lam, mu, s, pi, rp):
        """Search direction ``(dz, ds_lse, dlam, nu_new)`` for the target ``lam * s = mu``."""
        m = len(z)
        l_lse, l_G, l_lo, l_hi = self.split(lam)
        s_lse, s_G, s_lo, s_hi = self.split(s)
        rp_full = np.concatenate([rp, np.zeros(self.n_ineq - self.K)])
        grad = self.c + self.jac_t(mu / s + lam * rp_full / s, pi)

        diag = np.zeros(m)
        np.add.at(diag, self.lo_idx, l_lo / s_lo)
        np.add.at(diag, self.hi_idx, l_hi / s_hi)
        H = sp.diags(diag, format="csr")
        aug_rows, aug_coef = [], []
        if self.K:
            H = H + self.FT @ sp.diags(pi * l_lse[self.grp]) @ self.F
            P = sp.csr_matrix((pi, (self.grp, np.arange(len(pi)))), shape=(self.K, len(pi)))
            J = (P @ self.F).tocsr()
            coef = l_lse / s_lse - l_lse
            nnzJ = np.diff(J.indptr)
            sparse_k = np.flatnonzero(nnzJ <= _DENSE_ROW)
            dense_k = np.flatnonzero(nnzJ > _DENSE_ROW)
            Js = J[sparse_k]
            H = H + Js.T @ sp.diags(coef[sparse_k]) @ Js
            if dense_k.size:
                aug_rows.append(J[dense_k])
                aug_coef.append(coef[dense_k])
        if len(self.g):
            dG = l_G / s_G
            if self.G_sparse.size:
                H = H + self.Gs.T @ sp.diags(dG[self.G_sparse]) @ self.Gs
            if self.G_dense.size:
                aug_rows.append(self.Gd)
                aug_coef.append(dG[self.G_dense])
        if aug_rows:
            Aug = sp.vstack(aug_rows).tocsr()
            coef = np.concatenate(aug_coef)
            keep = np.abs(coef) > 1e-300
            Aug, coef = Aug[keep], coef[keep]
        else:
            Aug, coef = sp.csr_matrix((0, m)), np.zeros(0)
        na, ne = Aug.shape[0], self.E.shape[0]
        if na or ne:
            KKT = sp.bmat([
                [H, Aug.T, self.E.T if ne else None],
                [Aug, sp.diags(-1.0 / coef) if na else None, None],
                [self.E if ne else None, None, None],
            ], format="csc")
        else:
            KKT = H.tocsc()
        rhs = np.concatenate([-grad, np.zeros(na), self.e - self.E @ z])
        sol = _kkt_solve(KKT, rhs, m)
        dz = sol[:m]
        nu_new = sol[m + na:]
        jd = self.jac(dz, pi)
        dlam = mu / s - lam + lam * (rp_full + jd) / s
        ds_lse = -rp - jd[:self.K]
        return dz, ds_lse, dlam, nu_new

    def max_step(self, dz, ds_lse, dlam, lam, s, frac):
        """Largest step keeping duals and slacks positive, shortened by ``frac``."""
        ds = np.concatenate([ds_lse, -(self.G @ dz), dz[self.lo_idx], -dz[self.hi_idx]])
        step = 1.0
        for v, d in ((lam, dlam), (s, ds)):
            neg = d < 0
            if neg.any():
                step = min(step, frac * np.min(-v[neg] / d[neg]))
        return step

    def multipliers(self, lam, nu) -> Multipliers:
        l_lse, l_G, l_lo, l_hi = self.split(lam)
        m = len(self.c)
        lower = np.zeros(m)
        upper = np.zeros(m)
        lower[self.lo_idx] = l_lo
        upper[self.hi_idx] = l_hi
        return Multipliers(l_lse.copy(), l_G.copy(), lower, upper,
                           np.asarray(nu, float).copy() if len(nu) else np.zeros(0))


def _kkt_solve(KKT, rhs, m):
    # A loose pivot threshold keeps the fill-reducing ordering intact; the
    # strict default makes the factor several times denser.
    opts = {"SymmetricMode": True, "DiagPivotThresh": 0.01}
    try:
        lu = spla.splu(KKT, permc_spec="MMD_AT_PLUS_A", options=opts)
    except RuntimeError:
        # singular: regularize the Hessian block slightly
        d = np.abs(KKT.diagonal()[:m])
        reg = 1e-12 * max(1.0, d.max(initial=0.0))
        n = KKT.shape[0]
        KKT = KKT + sp.diags(np.concatenate([np.full(m, reg), np.zeros(n - m)]), format="csc")
        lu = spla.splu(KKT, permc_spec="MMD_AT_PLUS_A")
    sol = lu.solve(rhs)
    # one step of iterative refinement
    sol += lu.solve(rhs - KKT @ sol)
    return sol


@dataclass
class SolverSettings:
    tol_feas: float = 1e-8
    tol_opt: float = 1e-6
    tol_gap: float = 1e-10
    # a stalled run still counts as optimal once its gap is below this
    tol_gap_accept: float = 1e-10
    stall_window: int = 10
    max_iter: int = 500
    mu0: float = 1.0
    mu_factor: float = 10.0
    armijo: float = 0.01
    backtrack: float = 0.5
    boundary_frac: float = 0.99
    neighbourhood: float = 1e-2
    trace: object = field(default=None, repr=False)


@dataclass
class _Run:
    z: np.ndarray
    lam: np.ndarray
    nu: np.ndarray
    iters: int
    status: str
    message: str = ""


def _norm(parts) -> float:
    return float(np.sqrt(sum(p @ p for p in parts)))


def _path(ker: _Kernel, z, settings: SolverSettings, budget: int, stop=None) -> _Run:
    """Primal-dual path following from a strictly feasible ``z``.

    Each iteration targets ``lam * s = sigma * eta / n_ineq`` with
    ``sigma = 1 / mu_factor`` after a full step, rising towards pure
    centring after short ones.  It backtracks until slacks and duals stay
    positive, every product ``lam_i s_i`` stays within a fixed fraction of
    the average, and the residual norm decreases.
    """
    s_full, _ = ker.slacks(z)
    s_lse = s_full[:ker.K].copy()
    s, pi, rp = ker.state(z, s_lse)
    lam = settings.mu0 / s
    nu = np.zeros(ker.E.shape[0])
    n_ineq = max(ker.n_ineq, 1)
    iters = 0
    history = []
    accepted = None
    last_step = 1.0
    while True:
        eta = float(s @ lam)
        # after a short step, recentre instead of pushing the barrier down
        sigma = max(1.0 / settings.mu_factor, (1.0 - last_step) ** 3)
        mu = sigma * eta / n_ineq
        rd, rc, rp, re = ker.residuals(z, lam, nu, mu, s, pi, rp)
        certified = (np.abs(rd).max(initial=0) <= settings.tol_opt
                     and np.abs(rp).max(initial=0) <= settings.tol_feas
                     and np.abs(re).max(initial=0) <= settings.tol_feas)
        if certified and eta <= settings.tol_gap:
            return _Run(z, lam, nu, iters, OPTIMAL)
        if certified and eta <= settings.tol_gap_accept:
            accepted = _Run(z, lam, nu, iters, OPTIMAL, f"gap target missed; stopped at {eta:.3g}")
        history.append(eta)
        w = settings.stall_window
        stalled = len(history) > w and eta > 0.5 * history[-1 - w]
        if accepted is not None and (stalled or iters >= budget):
            accepted.iters = iters
            return accepted
        if iters >= budget:
            return _Run(z, lam, nu, iters, MAX_ITER, "Newton iteration cap reached")
        try:
            dz, ds_lse, dlam, nu_new = ker.newton(z, lam, mu, s, pi, rp)
        except (RuntimeError, ValueError) as exc:
            return _Run(z, lam, nu, iters, NUMERICAL_FAILURE, f"linear solve failed: {exc}")
        if not (np.all(np.isfinite(dz)) and np.all(np.isfinite(dlam))):
            return _Run(z, lam, nu, iters, NUMERICAL_FAILURE, "non-finite Newton step")
        dnu = nu_new - nu
        step = ker.max_step(dz, ds_lse, dlam, lam, s, settings.boundary_frac)
        r0 = _norm((rd, rc, rp, re))
        iters += 1
        for _ in range(60):
            z_new = z + step * dz
            s_lse_new = ker.reset(z_new, s_lse + step * ds_lse)
            s_new, pi_new, rp_new = ker.state(z_new, s_lse_new)
            lam_new = lam + step * dlam
            nu_n = nu + step * dnu
            if ker.strict(s_new):
                res = ker.residuals(z_new, lam_new, nu_n, mu, s_new, pi_new, rp_new)
                prod = lam_new * s_new
                centred = prod.min() >= settings.neighbourhood * prod.mean()
                shrink = 1 - settings.armijo * step
                # once primal and dual residuals sit at rounding level only
                # the gap has to shrink; their noise would block every step
                tiny = (np.abs(res[0]).max(initial=0) <= 0.1 * settings.tol_opt
                        and np.abs(res[2]).max(initial=0) <= 0.1 * settings.tol_feas
                        and np.abs(res[3]).max(initial=0) <= 0.1 * settings.tol_feas)
                if centred and (_norm(res) <= shrink * r0
                                or (tiny and prod.sum() <= shrink * eta)):
                    break
            step *= settings.backtrack
        else:
            return _Run(z, lam, nu, iters, NUMERICAL_FAILURE, "line search failed")
        if settings.trace is not None:
            settings.trace(dict(iter=iters, eta=eta, step=step, rd=float(np.abs(rd).max(initial=0)),
                                rp=float(np.abs(rp).max(initial=0)), smin=float(s.min(initial=np.inf))))
        z, s_lse, lam, nu = z_new, s_lse_new, lam_new, nu_n
        last_step = step
        s, pi, rp = s_new, pi_new, rp_new
        if stop is not None and stop(z):
            return _Run(z, lam, nu, iters, OPTIMAL, "stopping criterion met")


def _reduce(prog: ConvexProgram, fixed_mask, fixed_val):
    """Eliminate fixed variables; returns the reduced program and a lifter."""
    free = np.flatnonzero(~fixed_mask)
    fix = np.flatnonzero(fixed_mask)

    def cut(A, rhs, sign):
        shift = A[:, fix] @ fixed_val if len(fix) else 0.0
        return A[:, free], rhs + sign * shift

    lse_A, lse_b = cut(prog.lse_matrix, prog.lse_offset, +1)
    G, g = cut(prog.ineq_matrix, prog.ineq_rhs, -1)
    E, e = cut(prog.eq_matrix, prog.eq_rhs, -1)
    red = ConvexProgram(
        objective=prog.objective[free], lower=prog.lower[free], upper=prog.upper[free],
        lse_matrix=lse_A, lse_offset=lse_b, lse_ptr=prog.lse_ptr,
        ineq_matrix=G, ineq_rhs=g, eq_matrix=E, eq_rhs=e,
    )
    const = float(prog.objective[fix] @ fixed_val) if len(fix) else 0.0

    def lift(zr):
        z = np.empty(prog.m)
        z[free] = zr
        z[fix] = fixed_val
        return z

    return red, lift, free, const


def _phase1(red: ConvexProgram, settings: SolverSettings, budget: int):
    """Find a strictly feasible point of ``red``; returns (z, iters, status, s*)."""
    m = red.m
    z0 = np.zeros(m)
    if red.eq_matrix.shape[0]:
        z0 = spla.lsqr(red.eq_matrix, red.eq_rhs, atol=1e-14, btol=1e-14)[0]
        if np.abs(red.eq_matrix @ z0 - red.eq_rhs).max() > 1e-9:
            return z0, 0, INFEASIBLE, np.inf
    both = np.isfinite(red.lower) & np.isfinite(red.upper)
    only_lo = np.isfinite(red.lower) & ~np.isfinite(red.upper)
    only_hi = ~np.isfinite(red.lower) & np.isfinite(red.upper)
    if not red.eq_matrix.shape[0]:
        z0[both] = 0.5 * (red.lower[both] + red.upper[both])
        z0[only_lo] = red.lower[only_lo] + 1.0
        z0[only_hi] = red.upper[only_hi] - 1.0
    # constraint rows with a shared slack variable s (last column)
    lo_idx = np.flatnonzero(np.isfinite(red.lower))
    hi_idx = np.flatnonzero(np.isfinite(red.upper))
    eye = sp.identity(m, format="csr")
    G = sp.vstack([red.ineq_matrix, -eye[lo_idx], eye[hi_idx]]).tocsr()
    g = np.concatenate([red.ineq_rhs, -red.lower[lo_idx], red.upper[hi_idx]])
    ones_G = sp.csr_matrix(-np.ones((G.shape[0], 1)))
    ones_F = sp.csr_matrix(-np.ones((red.lse_matrix.shape[0], 1)))
    viol = [1.0]
    if red.n_lse:
        viol.append(red.lse_values(z0).max() + 1.0)
    if G.shape[0]:
        viol.append((G @ z0 - g).max() + 1.0)
    s0 = max(viol)
    obj = np.zeros(m + 1)
    obj[-1] = 1.0
    lower = np.full(m + 1, -np.inf)
    lower[-1] = -1.0
    p1 = ConvexProgram(
        objective=obj, lower=lower, upper=None,
        lse_matrix=sp.hstack([red.lse_matrix, ones_F]).tocsr(), lse_offset=red.lse_offset,
        lse_ptr=red.lse_ptr,
        ineq_matrix=sp.hstack([G, ones_G]).tocsr(), ineq_rhs=g,
        eq_matrix=sp.hstack([red.eq_matrix, sp.csr_matrix((red.eq_matrix.shape[0], 1))]).tocsr(),
        eq_rhs=red.eq_rhs,
    )
    ker = _Kernel(p1)
    orig = _Kernel(red)

    def feasible(zs):
        return zs[-1] < -1e-6 and orig.strict(orig.slacks(zs[:-1])[0])

    run = _path(ker, np.append(z0, s0), settings, budget, stop=feasible)
    zs = run.z
    if feasible(zs):
        return zs[:-1], run.iters, OPTIMAL, zs[-1]
    if run.status == OPTIMAL:
        return zs[:-1], run.iters, INFEASIBLE, zs[-1]
    return zs[:-1], run.iters, run.status, zs[-1]


def solve(program: ConvexProgram, tol_feas: float = 1e-8, tol_opt: float = 1e-6,
          x0=None, settings: SolverSettings | None = None) -> Solution:
    """Minimize ``program``; ``x0`` must be strictly feasible if given.

    Without a usable ``x0`` a phase-I barrier problem (minimize a common slack
    on every inequality) supplies the start; a phase-I optimum that stays
    nonnegative is reported as ``infeasible``.
    """
    settings = SolverSettings() if settings is None else settings
    settings = SolverSettings(**{**settings.__dict__, "tol_feas": tol_feas, "tol_opt": tol_opt})
    prog = program
    if np.any(prog.lower > prog.upper):
        j = int(np.flatnonzero(prog.lower > prog.upper)[0])
        return _failed(prog, INFEASIBLE, f"empty box for variable {j}")
    scale = np.maximum(1.0, np.abs(np.where(np.isfinite(prog.lower), prog.lower, 0)))
    fixed_mask = (prog.upper - prog.lower) <= 1e-14 * scale
    fixed_val = prog.lower[fixed_mask]
    red, lift, free, const = _reduce(prog, fixed_mask, fixed_val)
    if red.m == 0:
        z = lift(np.zeros(0))
        viol = prog.violation(z)
        status = OPTIMAL if viol <= tol_feas else INFEASIBLE
        mult = Multipliers(np.zeros(prog.n_lse), np.zeros(len(prog.ineq_rhs)), np.zeros(prog.m),
                           np.zeros(prog.m), np.zeros(len(prog.eq_rhs)))
        return Solution(z, float(prog.objective @ z), status, kkt_residuals(prog, z), 0, mult)

    ker = _Kernel(red)
    iters = 0
    z = None
    phase1_value = None
    if x0 is not None:
        zr = np.asarray(x0, float)[free]
        ok = ker.strict(ker.slacks(zr)[0])
        if red.eq_matrix.shape[0]:
            ok = ok and np.abs(red.eq_matrix @ zr - red.eq_rhs).max() <= 1e-10
        z = zr if ok else None
    if z is None:
        z, iters, st, phase1_value = _phase1(red, settings, settings.max_iter)
        if st != OPTIMAL:
            zf = lift(z)
            msg = ("phase I optimum is nonnegative: no strictly feasible point"
                   if st == INFEASIBLE else "phase I did not finish")
            return Solution(zf, float(prog.objective @ zf), st, kkt_residuals(prog, zf, _zero_mult(prog)),
                            iters, None, msg, phase1_value)

    run = _path(ker, z, settings, settings.max_iter - iters)
    iters += run.iters
    zf = lift(run.z)
    mult_red = ker.multipliers(run.lam, run.nu)
    mult = _lift_mult(prog, free, mult_red)
    # equality multipliers re-fitted so that stationarity is measured fairly
    if len(prog.eq_rhs):
        base = _stationarity(prog, zf, Multipliers(mult.lse, mult.ineq, mult.lower, mult.upper,
                                                   np.zeros(len(prog.eq_rhs))))
        mult.eq = np.linalg.lstsq(prog.eq_matrix.toarray().T, -base, rcond=None)[0]
    mult = _polish(prog, zf, mult, free)
    fixed = np.flatnonzero(fixed_mask)
    if fixed.size:
        r = _stationarity(prog, zf, mult)[fixed]
        mult.lower[fixed] += np.maximum(r, 0.0)
        mult.upper[fixed] += np.maximum(-r, 0.0)
    report = kkt_residuals(prog, zf, mult)
    status = run.status
    if status == OPTIMAL and not report.ok(tol_feas, tol_opt):
        status = NUMERICAL_FAILURE
        run.message = (f"residuals above tolerance: feasibility {report.feasibility:.3g}, "
                       f"stationarity {report.stationarity:.3g}")
    return Solution(zf, float(prog.objective @ zf), status, report, iters, mult, run.message,
                    phase1_value)


def _polish(prog: ConvexProgram, z, mult: Multipliers, free, active_slack: float = 1e-7) -> Multipliers:
    """Refit multipliers of near-active constraints by sparse least squares.

    Barrier estimates ``1/(t * slack)`` lose relative accuracy once slacks
    approach rounding level; the refit restores stationarity to working
    precision and is kept only if it is nonnegative and improves the residual.
    """
    m = prog.m
    cols, where = [], []
    if prog.n_lse:
        g = prog.lse_values(z)
        v = prog.lse_matrix @ z + prog.lse_offset
        _, pi = _lse_groups(v, prog.lse_ptr)
        counts = np.diff(prog.lse_ptr)
        P = sp.csr_matrix((pi, (np.repeat(np.arange(prog.n_lse), counts), np.arange(len(v)))),
                          shape=(prog.n_lse, len(v)))
        act = np.flatnonzero(-g <= active_slack)
        if act.size:
            cols.append((P[act] @ prog.lse_matrix).T)
            where.append(("lse", act))
    if len(prog.ineq_rhs):
        act = np.flatnonzero(prog.ineq_rhs - prog.ineq_matrix @ z <= active_slack)
        if act.size:
            cols.append(prog.ineq_matrix[act].T)
            where.append(("ineq", act))
    eye = sp.identity(m, format="csc")
    act = free[(z - prog.lower)[free] <= active_slack]
    if act.size:
        cols.append(-eye[:, act])
        where.append(("lower", act))
    act = free[(prog.upper - z)[free] <= active_slack]
    if act.size:
        cols.append(eye[:, act])
        where.append(("upper", act))
    if len(prog.eq_rhs):
        cols.append(prog.eq_matrix.T)
        where.append(("eq", np.arange(len(prog.eq_rhs))))
    if not cols:
        return mult
    r0 = _stationarity(prog, z, mult)
    r0[~np.isin(np.arange(m), free)] = 0.0
    M = sp.hstack(cols).tocsr()
    M = M[free]
    delta = spla.lsqr(M, -r0[free], atol=1e-15, btol=1e-15, iter_lim=20 * M.shape[1] + 100)[0]
    new = Multipliers(mult.lse.copy(), mult.ineq.copy(), mult.lower.copy(), mult.upper.copy(),
                      mult.eq.copy())
    k = 0
    for kind, idx in where:
        arr = getattr(new, kind)
        arr[idx] += delta[k:k + len(idx)]
        k += len(idx)
    for kind in ("lse", "ineq", "lower", "upper"):
        arr = getattr(new, kind)
        np.maximum(arr, 0.0, out=arr)
    r1 = _stationarity(prog, z, new)[free]
    if np.abs(r1).max(initial=0) < np.abs(r0[free]).max(initial=0):
        return new
    return mult


def _zero_mult(prog):
    return Multipliers(np.zeros(prog.n_lse), np.zeros(len(prog.ineq_rhs)), np.zeros(prog.m),
                       np.zeros(prog.m), np.zeros(len(prog.eq_rhs)))


def _lift_mult(prog, free, mr: Multipliers) -> Multipliers:
    lower = np.zeros(prog.m)
    upper = np.zeros(prog.m)
    lower[free] = mr.lower
    upper[free] = mr.upper
    return Multipliers(mr.lse, mr.ineq, lower, upper, mr.eq)


def _failed(prog, status, msg):
    z = np.where(np.isfinite(prog.lower), prog.lower, 0.0)
    return Solution(z, float(prog.objective @ z), status,
                    KKTReport(prog.violation(z), np.inf, np.inf), 0, None, msg)
