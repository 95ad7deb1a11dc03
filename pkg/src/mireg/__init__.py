"""mireg: deformable image registration trained with a neural MI estimator.

The public surface is the estimator plus the handful of pieces it is built
from: the transform operators, the similarity losses, synthetic data
generation, and the evaluation helpers. Everything else is reachable through
the submodules.
"""

from .errors import ConfigurationError, FormatError, NumericError
from .estimator import MineRegistration
from .evalkit import binned_mi, count_nonpositive_jacobian, dice
from .regnet import RegNet, RegNetConfig
from .similarity import LOSS_KINDS, LossConfig, StatNet, joint_response_map
from .synthdata import (LabelMap, Volume, gen_labeled_shape, gen_pair,
                        read_field, read_volume, write_volume)
from .transform import (grid_sample, integrate_velocity, jacobian_determinant,
                        warp_labels)

__version__ = "0.1.0"

__all__ = [
    "MineRegistration",
    "RegNet", "RegNetConfig", "StatNet",
    "LossConfig", "LOSS_KINDS", "joint_response_map",
    "grid_sample", "integrate_velocity", "jacobian_determinant", "warp_labels",
    "Volume", "LabelMap", "gen_labeled_shape", "gen_pair",
    "read_volume", "write_volume", "read_field",
    "dice", "binned_mi", "count_nonpositive_jacobian",
    "ConfigurationError", "FormatError", "NumericError",
    "__version__",
]
