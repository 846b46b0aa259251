from core.errors import (AlignmentError, ConfigurationError, ContractError, DimensionError, EmptyInputError,
                         InputError, LoadError, MoATTSError, NonFiniteLossError, OracleError, OutputExistsError,
                         UndefinedMetricError)
from core.functional import conv1d, dropout, layer_norm, linear, mse_loss, softmax
from core.gradcheck import GradCheckReport, check_leaves, finite_diff_check
from core.tensor import Graph, Tensor, backward

__all__ = [
    "AlignmentError", "ConfigurationError", "ContractError", "DimensionError", "EmptyInputError", "InputError",
    "LoadError", "MoATTSError", "NonFiniteLossError", "OracleError", "OutputExistsError", "UndefinedMetricError",
    "conv1d", "dropout", "layer_norm", "linear", "mse_loss", "softmax",
    "GradCheckReport", "check_leaves", "finite_diff_check",
    "Graph", "Tensor", "backward",
]
