"""Risk-bound model predictive control for networked spreading processes."""
from .conic import ConvexProgram, ProgramBuilder, Solution, SolverSettings, solve
from .dynamics import (RiskEstimate, evaluate_risk, evaluate_risk_bound, propagate_priorities,
                       simulate, step_linear, step_nonlinear, terminal_priority)
from .errors import (AssumptionViolation, ConsistencyError, DomainError, NumericalError,
                     SolverError, SpreadMPCError)
from .mpc import MpcConfig, MpcRunLog, k_estimate, mpc_run, mpc_step, warm_start_shift
from .network import (RateState, SpreadingNetwork, admissibility_margins, bound_matrices,
                      build_system_matrix, check_assumption1, check_rates, rate_bound_violation,
                      spectral_radius, stability_certificate)
from .ocp import (OcpInstance, OcpSolution, build_gamma_m_program, build_relaxed_ocp,
                  compute_gamma_m, diagnose, solve_ocp)
from .resource import (Allocation, allocation_between, apply_allocation, max_allocation,
                       resource_cost)
from .scenario import (Landscape, WildfireParams, Wind, build_wildfire_network,
                       generate_landscape, seed_outbreak)

__version__ = "0.1.0"

__all__ = [
    "Allocation",
    "AssumptionViolation",
    "ConsistencyError",
    "ConvexProgram",
    "DomainError",
    "Landscape",
    "MpcConfig",
    "MpcRunLog",
    "NumericalError",
    "OcpInstance",
    "OcpSolution",
    "ProgramBuilder",
    "RateState",
    "RiskEstimate",
    "Solution",
    "SolverError",
    "SolverSettings",
    "SpreadMPCError",
    "SpreadingNetwork",
    "WildfireParams",
    "Wind",
    "admissibility_margins",
    "allocation_between",
    "apply_allocation",
    "bound_matrices",
    "build_gamma_m_program",
    "build_relaxed_ocp",
    "build_system_matrix",
    "build_wildfire_network",
    "check_assumption1",
    "check_rates",
    "compute_gamma_m",
    "diagnose",
    "evaluate_risk",
    "evaluate_risk_bound",
    "generate_landscape",
    "k_estimate",
    "max_allocation",
    "mpc_run",
    "mpc_step",
    "propagate_priorities",
    "rate_bound_violation",
    "resource_cost",
    "seed_outbreak",
    "simulate",
    "solve",
    "solve_ocp",
    "spectral_radius",
    "stability_certificate",
    "step_linear",
    "step_nonlinear",
    "terminal_priority",
    "warm_start_shift",
]
