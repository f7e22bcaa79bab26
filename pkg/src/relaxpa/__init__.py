"""Monte-Carlo engine for principal-agent problems with relaxed controls."""

__version__ = "0.1.0"

from .agent import HamiltonianSpec, agent_value, best_response, hamiltonian, verify_supermartingale_R
from .bsde import RegressionBasis, solve_bsde
from .config import ExperimentConfig, load_config
from .dynamics import ModelSpec, girsanov_density, simulate_state_controlled, simulate_state_p0
from .measure import TimeGrid, build_intensity_grid, pushforward, simulate_base_measure
from .models import brownian_model, lq_hamiltonian, lq_model
from .principal import PrincipalSpec, generate_contract, optimize_principal, simulate_contract_controlled
from .weakform import GeneratorSpec, generator_residual, orthogonality_residual, tightness_report

__all__ = [
    "ExperimentConfig",
    "GeneratorSpec",
    "HamiltonianSpec",
    "ModelSpec",
    "PrincipalSpec",
    "RegressionBasis",
    "TimeGrid",
    "agent_value",
    "best_response",
    "brownian_model",
    "build_intensity_grid",
    "generate_contract",
    "generator_residual",
    "girsanov_density",
    "hamiltonian",
    "load_config",
    "lq_hamiltonian",
    "lq_model",
    "optimize_principal",
    "orthogonality_residual",
    "pushforward",
    "simulate_base_measure",
    "simulate_contract_controlled",
    "simulate_state_controlled",
    "simulate_state_p0",
    "solve_bsde",
    "tightness_report",
    "verify_supermartingale_R",
]
