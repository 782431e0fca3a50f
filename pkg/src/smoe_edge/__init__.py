"""Explainable edge detection: a Sobel-gated mixture-of-experts U-Net with a
differentiable TSK fuzzy head, plus the boundary benchmark and the
explainability artifact emitters, all on a minimal float64 autodiff core.
"""

from .autodiff import Tensor, backward, finite_diff_gradcheck
from .errors import (CheckpointError, DataError, GraphError, NumericError,
                     ShapeError, SmoeEdgeError)
from .fuzzy import FuzzyRuleParams, tsk_forward
from .guidance import GuidanceMap, resize_bilinear, sobel_magnitude
from .losses import LossConfig, bce_with_logits, composite_loss, dice_loss, distill_mse
from .model import ForwardBundle, Model, ModelConfig, build_model, forward, predict_probability
from .smoe import GateMap, SmoeParams, smoe_forward
from .training import (AdamState, Sample, TrainConfig, adam_step, augment,
                       load_checkpoint, load_dataset, save_checkpoint, train)

__version__ = "0.1.0"

__all__ = [
    "AdamState", "CheckpointError", "DataError", "ForwardBundle", "FuzzyRuleParams",
    "GateMap", "GraphError", "GuidanceMap", "LossConfig", "Model", "ModelConfig",
    "NumericError", "Sample", "ShapeError", "SmoeEdgeError", "SmoeParams", "Tensor",
    "TrainConfig", "adam_step", "augment", "backward", "bce_with_logits",
    "build_model", "composite_loss", "dice_loss", "distill_mse",
    "finite_diff_gradcheck", "forward", "load_checkpoint", "load_dataset",
    "predict_probability", "resize_bilinear", "save_checkpoint", "smoe_forward",
    "sobel_magnitude", "train", "tsk_forward",
]
