"""Hidden conditional random fields that learn with privileged information."""

from .errors import (CapacityError, ConfigurationError, HcrfError, InvalidInputError,
                     NumericalFailureError, SchemaError, VersionError)
from .model import (FeatureDims, ModelParams, SequenceSample, energy, init_params,
                    pairwise_potential, params_as_vector, unary_potential, vector_as_params)

__version__ = "0.1.0"

__all__ = [
    "CapacityError", "ConfigurationError", "HcrfError", "InvalidInputError",
    "NumericalFailureError", "SchemaError", "VersionError",
    "FeatureDims", "ModelParams", "SequenceSample", "energy", "init_params",
    "pairwise_potential", "params_as_vector", "unary_potential", "vector_as_params",
]
