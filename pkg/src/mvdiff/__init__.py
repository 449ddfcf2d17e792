"""Desk-scale multi-view video diffusion with correlated noise, cross-frame
attention, and a failure-driven data augmentation loop, on a procedurally
generated driving corpus."""

from .bundle import load_bundle, save_bundle
from .rng import RngStream
from .schedule import NoiseSchedule, SharedNoise, make_linear_schedule, q_sample, sample_shared_noise
from .tensor import DimensionError, NumericError, Tensor, grad_check, no_grad, softmax

__version__ = "0.1.0"
