"""Logarithmic resource model.

Reducing a spreading rate by a factor ``e^-u`` costs ``u`` nats, and so does
closing a fraction ``1 - e^-u`` of the gap between a recovery rate and its
saturation value.  Neither a zero spreading rate nor the saturation rate is
reachable with finite resources.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import DomainError
from .network import RateState, SpreadingNetwork


@dataclass(frozen=True, eq=False)
class Allocation:
    """Resource in nats per edge (lowers beta) and per node (raises delta)."""

    edges: np.ndarray
    nodes: np.ndarray

    def __post_init__(self):
        for name in ("edges", "nodes"):
            a = np.array(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @classmethod
    def zeros(cls, network: SpreadingNetwork) -> "Allocation":
        return cls(np.zeros(network.n_edges), np.zeros(network.n))

    def __add__(self, other: "Allocation") -> "Allocation":
        return Allocation(self.edges + other.edges, self.nodes + other.nodes)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.edges, self.nodes])

    def nnz(self, threshold: float = 1e-6) -> int:
        return int(np.count_nonzero(self.vector > threshold))

    def matrix(self, network: SpreadingNetwork) -> sp.csr_matrix:
        idx = np.arange(network.n)
        return sp.csr_matrix(
            (self.vector, (np.concatenate([network.rows, idx]),
                           np.concatenate([network.cols, idx]))),
            shape=(network.n, network.n))

    def triplets(self, network: SpreadingNetwork):
        """Yield ``(i, j, U, W*U)`` for every entry, edges first then diagonal."""
        idx = np.arange(network.n)
        rows = np.concatenate([network.rows, idx])
        cols = np.concatenate([network.cols, idx])
        w = np.concatenate([network.edge_weight, network.node_weight])
        u = self.vector
        for k in range(len(u)):
            yield int(rows[k]), int(cols[k]), float(u[k]), float(w[k] * u[k])


def allocation_between(network: SpreadingNetwork, rates1: RateState,
                       rates2: RateState) -> Allocation:
    """Resource needed to move from ``rates1`` to the smaller system ``rates2``."""
    if np.any(rates2.beta > rates1.beta) or np.any(rates2.delta < rates1.delta):
        raise DomainError("allocation_between needs beta1 >= beta2 and delta1 <= delta2")
    if np.any(rates2.delta >= network.delta_cap):
        j = int(np.flatnonzero(rates2.delta >= network.delta_cap)[0])
        raise DomainError(f"delta[{j}] at saturation needs infinite resource")
    u_edges = np.log(rates1.beta / rates2.beta)
    u_nodes = np.log((network.delta_cap - rates1.delta) / (network.delta_cap - rates2.delta))
    return Allocation(u_edges, u_nodes)


def resource_cost(network: SpreadingNetwork, U: Allocation) -> float:
    return float(network.edge_weight @ U.edges + network.node_weight @ U.nodes)


def apply_allocation(network: SpreadingNetwork, rates1: RateState, U: Allocation) -> RateState:
    """Rates after spending ``U`` starting from ``rates1``.

    The result is not clamped to the network's rate box; use
    :func:`spreadmpc.network.rate_bound_violation` to check it.
    """
    if U.edges.shape != rates1.beta.shape or U.nodes.shape != rates1.delta.shape:
        raise DomainError("allocation shape does not match the rate vectors")
    keep = np.exp(-U.nodes)
    beta = rates1.beta * np.exp(-U.edges)
    delta = (1.0 - keep) * network.delta_cap + keep * rates1.delta
    return RateState(beta, delta)


def max_allocation(network: SpreadingNetwork, rates: RateState) -> Allocation:
    """Per-entry headroom: the allocation that takes ``rates`` to the floor rates."""
    return allocation_between(network, rates, network.floor_rates())
