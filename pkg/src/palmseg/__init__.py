"""U-Net with a Context Fusion Module for palm-line segmentation, built on a small numpy autodiff engine."""

from .cfm import CFMWeights, cfm_forward, context_modeling, transform_left, transform_right
from .data import AugmentConfig, ImageSample, augment_dataset, load_dataset, split
from .errors import PalmSegError
from .tensor import Tensor, no_grad, precision
from .train import MetricsReport, TrainConfig, bce_loss, metrics, mse_loss, predict, train
from .unet import Model, UNetConfig, build, forward, load, param_count, save

__version__ = "0.1.0"
