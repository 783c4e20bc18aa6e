"""Risk-sensitive portfolio optimisation with jump-diffusion asset prices and
an affine Gaussian factor: model validation, the inner Hamiltonian optimiser,
a policy-iteration HJB solver, Monte Carlo estimators and a Kalman reduction
for unobserved factors."""
from .criterion import Criterion, big_g, effective_drift, g_value
from .hjb import Grid, SolverConfig, ValueField, boundary_value, policy_iteration, solve_linear_pde
from .model import JumpAtom, JumpMeasure, MarketModel, feasible_margin, validate_model
from .montecarlo import PathConfig, PathStats
from .optimizer import NewtonConfig, maximize_inner, zero_beta

__all__ = [
    "Criterion", "big_g", "effective_drift", "g_value",
    "Grid", "SolverConfig", "ValueField", "boundary_value", "policy_iteration", "solve_linear_pde",
    "JumpAtom", "JumpMeasure", "MarketModel", "feasible_margin", "validate_model",
    "PathConfig", "PathStats", "NewtonConfig", "maximize_inner", "zero_beta",
]
