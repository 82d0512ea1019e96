"""Problem instances for controlled SIS spreading on a directed graph.

An edge ``(i, j)`` means node ``j`` can infect node ``i``; its rate sits in
row ``i``, column ``j`` of the system matrix.  Edge data is kept as flat
arrays aligned with the edge list so that rate vectors, allocations and the
sparse system matrix all share one indexing.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import DomainError, NumericalError


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SpreadingNetwork:
    """Static instance: graph, rate bounds, node costs and resource weights.

    ``rows[e]``/``cols[e]`` are the endpoints ``(i, j)`` of edge ``e``.
    ``delta_cap`` is the saturation recovery rate that finite resources can
    approach but never reach.
    """

    n: int
    rows: np.ndarray
    cols: np.ndarray
    beta_lower: np.ndarray
    beta_upper: np.ndarray
    delta_lower: np.ndarray
    delta_upper: np.ndarray
    delta_cap: np.ndarray
    cost: np.ndarray
    edge_weight: np.ndarray
    node_weight: np.ndarray
    h: float
    alpha: float
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        n = int(self.n)
        object.__setattr__(self, "n", n)
        for name in ("rows", "cols"):
            object.__setattr__(self, name, _frozen(getattr(self, name), dtype=np.int64))
        for name in ("beta_lower", "beta_upper", "edge_weight"):
            arr = _frozen(getattr(self, name))
            if arr.shape != self.rows.shape:
                raise DomainError(f"{name} has shape {arr.shape}, expected {self.rows.shape}")
            object.__setattr__(self, name, arr)
        for name in ("delta_lower", "delta_upper", "delta_cap", "cost", "node_weight"):
            arr = _frozen(getattr(self, name))
            if arr.shape != (n,):
                raise DomainError(f"{name} has shape {arr.shape}, expected ({n},)")
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "h", float(self.h))
        object.__setattr__(self, "alpha", float(self.alpha))
        if self.validate:
            problems = self.problems()
            if problems:
                raise DomainError("invalid network: " + "; ".join(problems))

    @property
    def n_edges(self) -> int:
        return len(self.rows)

    @property
    def edges(self) -> list[tuple[int, int]]:
        return list(zip(self.rows.tolist(), self.cols.tolist()))

    def problems(self) -> list[str]:
        """Return human-readable violations of the standing assumptions."""
        out = []
        n, r, c = self.n, self.rows, self.cols
        if np.any((r < 0) | (r >= n) | (c < 0) | (c >= n)):
            out.append("edge endpoint out of range")
        if np.any(r == c):
            out.append("self-loop in edge list (diagonal entries come from recovery rates)")
        if len(set(zip(r.tolist(), c.tolist()))) != len(r):
            out.append("duplicate edge")
        bad = np.flatnonzero(~((self.beta_lower > 0) & (self.beta_lower <= self.beta_upper)))
        if bad.size:
            e = bad[0]
            out.append(f"need 0 < beta_lower <= beta_upper on edge ({r[e]}, {c[e]})")
        bad = np.flatnonzero(
            ~((self.delta_lower > 0) & (self.delta_lower <= self.delta_upper)
              & (self.delta_upper < self.delta_cap)))
        if bad.size:
            out.append(f"need 0 < delta_lower <= delta_upper < delta_cap at node {bad[0]}")
        if np.any(self.cost <= 0):
            out.append(f"cost must be positive (node {np.flatnonzero(self.cost <= 0)[0]})")
        if not (self.h > 0):
            out.append("h must be positive")
        if not (0 < self.alpha <= 1):
            out.append("alpha must lie in (0, 1]")
        if np.any(self.h * self.delta_upper > 1):
            out.append("h * delta_upper exceeds 1")
        if np.any(self.h * self.delta_cap > 1):
            out.append("h * delta_cap exceeds 1")
        colsum = self.h * np.bincount(c, weights=self.beta_upper, minlength=n)
        if colsum.size and colsum.max() >= 1:
            j = int(np.argmax(colsum))
            out.append(f"h * sum_i beta_upper[i, {j}] = {colsum[j]:.6g} is not < 1")
        if np.any(self.edge_weight <= 0) or np.any(self.node_weight <= 0):
            out.append("resource weights must be positive")
        return out

    # rate states at the two ends of the admissible box
    def unmodified_rates(self) -> "RateState":
        return RateState(self.beta_upper, self.delta_lower)

    def floor_rates(self) -> "RateState":
        return RateState(self.beta_lower, self.delta_upper)

    def with_alpha(self, alpha: float) -> "SpreadingNetwork":
        return SpreadingNetwork(**{**self._fields(), "alpha": alpha})

    def _fields(self) -> dict:
        return dict(n=self.n, rows=self.rows, cols=self.cols, beta_lower=self.beta_lower,
                    beta_upper=self.beta_upper, delta_lower=self.delta_lower,
                    delta_upper=self.delta_upper, delta_cap=self.delta_cap, cost=self.cost,
                    edge_weight=self.edge_weight, node_weight=self.node_weight,
                    h=self.h, alpha=self.alpha)

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "h": self.h,
            "alpha": self.alpha,
            "nodes": [
                {"delta_lower": float(a), "delta_upper": float(b), "delta_cap": float(c),
                 "cost": float(d)}
                for a, b, c, d in zip(self.delta_lower, self.delta_upper, self.delta_cap,
                                      self.cost)
            ],
            "edges": [
                {"i": int(i), "j": int(j), "beta_lower": float(lo), "beta_upper": float(hi),
                 "weight": float(w)}
                for i, j, lo, hi, w in zip(self.rows, self.cols, self.beta_lower,
                                           self.beta_upper, self.edge_weight)
            ],
            "node_weights": [float(w) for w in self.node_weight],
        }

    @classmethod
    def from_dict(cls, d: dict, validate: bool = True) -> "SpreadingNetwork":
        try:
            nodes, edges = d["nodes"], d["edges"]
            n = int(d["n"])
            if len(nodes) != n:
                raise DomainError(f"'nodes' has {len(nodes)} entries, expected n={n}")
            node_weights = d.get("node_weights", [1.0] * n)
            return cls(
                n=n,
                rows=[e["i"] for e in edges],
                cols=[e["j"] for e in edges],
                beta_lower=[e["beta_lower"] for e in edges],
                beta_upper=[e["beta_upper"] for e in edges],
                edge_weight=[e.get("weight", 1.0) for e in edges],
                delta_lower=[v["delta_lower"] for v in nodes],
                delta_upper=[v["delta_upper"] for v in nodes],
                delta_cap=[v["delta_cap"] for v in nodes],
                cost=[v["cost"] for v in nodes],
                node_weight=node_weights,
                h=d["h"],
                alpha=d["alpha"],
                validate=validate,
            )
        except KeyError as exc:
            raise DomainError(f"network file is missing field {exc}") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path, validate: bool = True) -> "SpreadingNetwork":
        return cls.from_dict(json.loads(Path(path).read_text()), validate=validate)


@dataclass(frozen=True, eq=False)
class RateState:
    """Spreading rates per edge and recovery rates per node at one time step."""

    beta: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "beta", _frozen(self.beta))
        object.__setattr__(self, "delta", _frozen(self.delta))

    def allclose(self, other: "RateState", rtol=1e-12, atol=0.0) -> bool:
        return (np.allclose(self.beta, other.beta, rtol=rtol, atol=atol)
                and np.allclose(self.delta, other.delta, rtol=rtol, atol=atol))


def rate_bound_violation(network: SpreadingNetwork, rates: RateState) -> float:
    """Largest amount by which ``rates`` leaves the box [floor, unmodified]."""
    viol = [
        network.beta_lower - rates.beta,
        rates.beta - network.beta_upper,
        network.delta_lower - rates.delta,
        rates.delta - network.delta_upper,
    ]
    return float(max([0.0] + [v.max() for v in viol if v.size]))


def check_rates(network: SpreadingNetwork, rates: RateState, tol: float = 0.0) -> None:
    if rates.beta.shape != (network.n_edges,) or rates.delta.shape != (network.n,):
        raise DomainError("rate vectors do not match the network dimensions")
    for name, lo, val, hi, labels in (
        ("beta", network.beta_lower, rates.beta, network.beta_upper, network.edges),
        ("delta", network.delta_lower, rates.delta, network.delta_upper, range(network.n)),
    ):
        bad = np.flatnonzero((val < lo - tol) | (val > hi + tol))
        if bad.size:
            k = bad[0]
            raise DomainError(
                f"{name}[{list(labels)[k]}] = {val[k]:.6g} outside [{lo[k]:.6g}, {hi[k]:.6g}]")


def build_system_matrix(network: SpreadingNetwork, rates: RateState,
                        check: bool = True) -> sp.csr_matrix:
    """Linearized system matrix: ``1 - h*delta`` on the diagonal, ``h*beta`` on edges."""
    if check:
        check_rates(network, rates)
    n = network.n
    idx = np.arange(n)
    A = sp.csr_matrix(
        (np.concatenate([network.h * rates.beta, 1.0 - network.h * rates.delta]),
         (np.concatenate([network.rows, idx]), np.concatenate([network.cols, idx]))),
        shape=(n, n),
    )
    A.sort_indices()
    return A


def bound_matrices(network: SpreadingNetwork) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """(lower, upper) system matrices from the floor and the unmodified rates."""
    return (build_system_matrix(network, network.floor_rates()),
            build_system_matrix(network, network.unmodified_rates()))


def _perron_root(B: sp.csr_matrix, tol: float, max_iter: int) -> float:
    # B irreducible and nonnegative; the unit shift makes it primitive so the
    # Collatz-Wielandt bounds pinch the Perron root.
    m = B.shape[0]
    if m == 1:
        return abs(float(B[0, 0]))
    S = (B + sp.identity(m, format="csr")).tocsr()
    v = np.ones(m)
    lo = hi = np.nan
    for _ in range(max_iter):
        w = S @ v
        ratio = w / v
        lo, hi = ratio.min(), ratio.max()
        if hi - lo <= tol * hi:
            return 0.5 * (lo + hi) - 1.0
        v = w / w.max()
        if v.min() < 1e-250:
            break
    if m <= 2000:
        # dense fallback for slowly mixing blocks
        return float(np.max(np.abs(np.linalg.eigvals(B.toarray()))))
    raise NumericalError(
        f"power iteration did not converge in {max_iter} iterations: "
        f"Collatz-Wielandt bracket [{lo - 1:.12g}, {hi - 1:.12g}]")


def spectral_radius(A, tol: float = 1e-10, max_iter: int = 10_000) -> float:
    """Spectral radius of a nonnegative square matrix.

    The matrix is split into strongly connected components; each irreducible
    block is handled by power iteration on ``B + I`` started from the all-ones
    vector, stopping once the Collatz-Wielandt upper and lower bounds agree to
    relative tolerance ``tol``.
    """
    A = sp.csr_matrix(A, dtype=float)
    if A.shape[0] != A.shape[1]:
        raise DomainError(f"matrix must be square, got {A.shape}")
    if A.nnz and A.data.min() < 0:
        raise DomainError("spectral_radius expects a nonnegative matrix")
    A.eliminate_zeros()
    ncomp, labels = connected_components(A, directed=True, connection="strong")
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(ncomp + 1))
    rho = 0.0
    for c in range(ncomp):
        idx = order[bounds[c]:bounds[c + 1]]
        block = A[idx][:, idx]
        if block.nnz == 0:
            continue
        rho = max(rho, _perron_root(block.tocsr(), tol, max_iter))
    return float(rho)


def check_assumption1(network: SpreadingNetwork) -> float:
    """Margin ``1 - alpha * rho(A_upper)``; positive iff the discounted series converges."""
    _, A_up = bound_matrices(network)
    return 1.0 - network.alpha * spectral_radius(A_up)


def admissibility_margins(network: SpreadingNetwork, rates: RateState) -> np.ndarray:
    """Per-node margin ``c_j delta_j - sum_i c_i beta_ij`` of the weighted cut condition."""
    outflow = np.bincount(network.cols, weights=network.cost[network.rows] * rates.beta,
                          minlength=network.n)
    return network.cost * rates.delta - outflow


def stability_certificate(network: SpreadingNetwork, rates: RateState) -> np.ndarray:
    """``C - (1 - alpha) C (I - alpha A)^{-1}``; all-positive certifies strict decrease."""
    from .dynamics import terminal_priority

    p = terminal_priority(network, rates)
    return network.cost - (1.0 - network.alpha) * p
