"""Mean-field SIS dynamics, risk evaluation and priority-vector risk bounds."""
from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DomainError, NumericalError
from .network import RateState, SpreadingNetwork, build_system_matrix, spectral_radius

DRIFT_TOL = 1e-12


class RiskEstimate(NamedTuple):
    """Truncated discounted risk; the exact value lies in ``[value, value + truncation_bound]``."""

    value: float
    truncation_bound: float
    steps: int


def _as_state(x, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (n,):
        raise DomainError(f"state has shape {x.shape}, expected ({n},)")
    if np.any(x < -DRIFT_TOL) or np.any(x > 1 + DRIFT_TOL) or not np.all(np.isfinite(x)):
        raise DomainError("state must lie in [0, 1]^n")
    return np.clip(x, 0.0, 1.0)


def step_nonlinear(A: sp.spmatrix, x) -> np.ndarray:
    """One Euler step ``x+ = [A - B(x)] x`` with ``B_ij = h x_i beta_ij``.

    ``B(x) x`` equals ``x`` times the off-diagonal part of ``A x``, so ``A``
    alone determines the step.
    """
    x = _as_state(x, A.shape[0])
    diag = A.diagonal()
    infection = A @ x - diag * x
    out = diag * x + (1.0 - x) * infection
    if np.any(out < -DRIFT_TOL) or np.any(out > 1 + DRIFT_TOL):
        raise NumericalError("nonlinear step left [0, 1]^n; step-size assumptions violated?")
    return np.clip(out, 0.0, 1.0)


def step_linear(A: sp.spmatrix, xhat) -> np.ndarray:
    """Step of the linear envelope system ``xhat+ = A xhat``."""
    xhat = np.asarray(xhat, dtype=float)
    if xhat.shape != (A.shape[0],):
        raise DomainError(f"vector has shape {xhat.shape}, expected ({A.shape[0]},)")
    return A @ xhat


def simulate(network: SpreadingNetwork, rates: RateState, x0, steps: int,
             linear: bool = False) -> np.ndarray:
    """Trajectory of shape ``(steps + 1, n)`` under fixed rates."""
    A = build_system_matrix(network, rates)
    x = _as_state(x0, network.n) if not linear else np.asarray(x0, dtype=float)
    out = np.empty((steps + 1, network.n))
    out[0] = x
    step = step_linear if linear else step_nonlinear
    for k in range(steps):
        x = step(A, x)
        out[k + 1] = x
    return out


def _require_stable(network: SpreadingNetwork, A) -> None:
    rho = spectral_radius(A)
    if network.alpha * rho >= 1:
        raise DomainError(f"alpha * rho(A) = {network.alpha * rho:.6g} >= 1: discounted risk diverges")


def terminal_priority(network: SpreadingNetwork, rates: RateState, check: bool = True) -> np.ndarray:
    """Fixed point ``p = C + alpha p A``, i.e. ``C (I - alpha A)^{-1}``."""
    A = build_system_matrix(network, rates, check=False)
    if check:
        _require_stable(network, A)
    M = (sp.identity(network.n, format="csc") - network.alpha * A.T).tocsc()
    p = spla.spsolve(M, network.cost)
    p = np.atleast_1d(np.asarray(p, dtype=float))
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise DomainError("terminal priority is not nonnegative; alpha * rho(A) >= 1?")
    return p


def propagate_priorities(network: SpreadingNetwork,
                         rate_schedule: Sequence[RateState]) -> np.ndarray:
    """Priority vectors satisfying the Bellman recursion with equality.

    Returns an array of shape ``(L + 1, n)`` whose last two rows coincide.
    """
    L = len(rate_schedule)
    if L < 1:
        raise DomainError("rate schedule must contain at least one stage")
    p = np.empty((L + 1, network.n))
    p[L - 1] = terminal_priority(network, rate_schedule[-1])
    p[L] = p[L - 1]
    for ell in range(L - 2, -1, -1):
        A = build_system_matrix(network, rate_schedule[ell], check=False)
        p[ell] = network.cost + network.alpha * (A.T @ p[ell + 1])
    return p


def evaluate_risk_bound(p, x) -> float:
    """Risk bound ``p(0) x``; accepts a single vector or a priority sequence."""
    p = np.asarray(p, dtype=float)
    if p.ndim == 2:
        p = p[0]
    return float(p @ np.asarray(x, dtype=float))


def evaluate_risk(network: SpreadingNetwork, rate_schedule: Sequence[RateState] | RateState,
                  x0, tail_tol: float = 1e-9, max_steps: int = 1_000_000) -> RiskEstimate:
    """Discounted risk of the nonlinear dynamics from ``x0``.

    The schedule is held at its last element once exhausted.  Summation stops
    when the certified tail ``alpha^K p_term x(K)`` drops below ``tail_tol``,
    where ``p_term`` is the terminal priority of the final rates.
    """
    if isinstance(rate_schedule, RateState):
        rate_schedule = [rate_schedule]
    mats = [build_system_matrix(network, r) for r in rate_schedule]
    p_term = terminal_priority(network, rate_schedule[-1])
    x = _as_state(x0, network.n)
    alpha, C = network.alpha, network.cost
    total, disc = 0.0, 1.0
    last = len(mats) - 1
    for k in range(max_steps):
        if k >= last:
            tail = disc * float(p_term @ x)
            if tail < tail_tol:
                return RiskEstimate(total, tail, k)
        total += disc * float(C @ x)
        x = step_nonlinear(mats[min(k, last)], x)
        disc *= alpha
    tail = disc * float(p_term @ x)
    raise NumericalError(f"risk tail {tail:.3g} still above {tail_tol:.3g} after {max_steps} steps")
