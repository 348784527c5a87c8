"""MS-Twins: multi-scale Twins transformer for 2-D medical image segmentation."""

from .config import AugmentConfig, LossConfig, ModelConfig, RunConfig, TrainConfig
from .model import CascadeOutput, MsTwins, StagePyramid, ablate
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"
