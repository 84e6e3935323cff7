"""EIT with the smoothened complete electrode model and contact projections."""

from .errors import (
    ConfigError,
    ContractError,
    DomainError,
    EITError,
    MeshParseError,
    NumericError,
    ResourceError,
    ValidationError,
)
from .forward import (
    ContactState,
    CurrentPatternSet,
    ForwardSolution,
    SystemHandle,
    assemble,
    contact_profile,
    forward_map,
    make_patterns,
    measure,
    solve,
)
from .mesh import ElectrodeLayout, ElectrodeSpec, Mesh, generate_cylinder_tank, load_mesh, save_mesh
from .projection import ProjectionOperator, build_projection, frobenius_discrepancy, principal_angles, signal_bundle
from .reconstruct import build_problem, lagged_diffusivity, objective, one_step
from .regularization import RegularizerState, epsilon_heuristic, make_regularizer, psi_value, theta_matrix
from .sampling import NoiseModel, RandomDrawConfig, draw_contacts, draw_lognormal_field, make_noise
from .sensitivity import JacobianBlock, jacobian_position, jacobian_sigma, jacobian_zeta

__version__ = "0.1.0"
