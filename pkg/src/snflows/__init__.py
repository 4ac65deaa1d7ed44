"""Sylvester normalizing flows for amortized variational inference."""

from .amortize import AmortizationConfig, FlowFamily, Hypernetwork, count_parameters
from .errors import (
    ConvergenceError,
    DimensionError,
    DivergenceError,
    FlowError,
    NonInvertibleError,
    NumericalError,
    SingularJacobianError,
    SpectralNormError,
)
from .flows import (
    Activation,
    FlowStack,
    GeneralSylvesterParams,
    IAFParams,
    MadeParams,
    Permutation,
    PlanarParams,
    SylvesterParams,
    Variant,
    flow_forward,
    stack_forward,
)
from .inversion import invert_flow, invert_planar, invert_stack, invert_sylvester
from .linalg import HouseholderChain, OrthonormalColumns, bjorck_orthogonalize
from .vi import DiagGaussian, estimate_nll, free_energy, log_q_K

__version__ = "0.1.0"

__all__ = [
    "Activation", "AmortizationConfig", "ConvergenceError", "DiagGaussian", "DimensionError",
    "DivergenceError", "FlowError", "FlowFamily", "FlowStack", "GeneralSylvesterParams",
    "HouseholderChain", "Hypernetwork", "IAFParams", "MadeParams", "NonInvertibleError",
    "NumericalError", "OrthonormalColumns", "Permutation", "PlanarParams", "SingularJacobianError",
    "SpectralNormError", "SylvesterParams", "Variant", "bjorck_orthogonalize", "count_parameters",
    "estimate_nll", "flow_forward", "free_energy", "invert_flow", "invert_planar", "invert_stack",
    "invert_sylvester", "log_q_K", "stack_forward",
]
