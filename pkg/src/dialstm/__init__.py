"""Shared channel-attention workbench.

A single recurrent attention module, shared across every block of a network
stage, recalibrates feature maps through an LSTM-gated channel multiplier.
The package provides the module and its baselines (SE, ECA), residual
backbones with stability toggles, exact parameter accounting, a deterministic
training harness, and the diagnostic analyses (attention-map correlation,
hidden-state importance, gradient distributions).
"""

from .attention import (DiaState, DiaUnit, EcaModule, LightLstmCell,
                        LstmCellConfig, ModifiedLstmCell, SamConfig, SeModule,
                        StandardLstmCell, cell_weight_formula, dia_apply,
                        dia_lstm_step, make_cell)
from .backbone import (Model, NetworkConfig, StageSpec, build, build_named,
                       named_config)
from .data import (Dataset, augment_batch, load_cifar10_binary,
                   normalize_images, synth_generate, write_cifar10_binary)
from .errors import (ConfigError, DialstmError, FormatError, GraphError,
                     NumericOverflowError, ShapeError)
from .layers import (BatchNorm, Conv2d, ElementwiseAffine, FullyConnected,
                     GroupedLinear, ParamBudget, count_weights)
from .tensor import (Tensor, backward, finite_difference_grad, forward_op,
                     gradcheck_coordinates, no_grad)
from .training import SgdOptimizer, TrainConfig, TrainResult, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "BatchNorm", "ConfigError", "Conv2d", "Dataset", "DiaState", "DiaUnit",
    "DialstmError", "EcaModule", "ElementwiseAffine", "FormatError",
    "FullyConnected", "GraphError", "GroupedLinear", "LightLstmCell",
    "LstmCellConfig", "Model", "ModifiedLstmCell", "NetworkConfig",
    "NumericOverflowError", "ParamBudget", "SamConfig", "SeModule",
    "SgdOptimizer", "ShapeError", "StageSpec", "StandardLstmCell", "Tensor",
    "TrainConfig", "TrainResult", "augment_batch", "backward", "build",
    "build_named", "cell_weight_formula", "count_weights", "dia_apply",
    "dia_lstm_step", "evaluate", "finite_difference_grad", "forward_op",
    "gradcheck_coordinates", "load_cifar10_binary", "make_cell",
    "named_config", "no_grad", "normalize_images", "synth_generate", "train",
    "write_cifar10_binary",
]
