"""Gray-box system identification with LFR model augmentation.

A first-principles state-space model is augmented with a feedforward neural
network through a fully parametrized linear fractional representation (LFR).
Constraint-free parametrizations guarantee well-posedness of the algebraic
loop and, optionally, contraction (incremental exponential stability) of the
learned model. The training pipeline supports l1 structure discovery and
group-lasso model-order selection on top of an Adam + L-BFGS-B optimizer.
"""

import jax

# Double precision is mandatory: certificates and fixed-point tolerances in
# this package are far below float32 resolution.
jax.config.update("jax_enable_x64", True)

from .errors import (  # noqa: E402
    ConfigError,
    DataFormatError,
    DivergenceError,
    InvalidInputError,
    NonFiniteError,
    SingularMatrixError,
    WellPosednessError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataFormatError",
    "DivergenceError",
    "InvalidInputError",
    "NonFiniteError",
    "SingularMatrixError",
    "WellPosednessError",
    "__version__",
]
