"""Diagonal state-space sequence models with sigmoid-gated kernels for energy-meter forecasting."""
from .core import ComplexVec, DiagonalSSMParams, Kernel, NumericalError, SequenceBatch, ValidationError
from .kernelgen import KernelVariant, s4convd_kernel, s4d_kernel, ssm_recurrence_impulse
from .metrics import rmse, rmsle
from .model import ModelConfig, ModelParams, forward, init_params, load_checkpoint, predict, save_checkpoint
from .training import OptimizerState, backward, sgd_step, train

__version__ = "0.1.0"

__all__ = [
    "ComplexVec", "DiagonalSSMParams", "Kernel", "NumericalError", "SequenceBatch", "ValidationError",
    "KernelVariant", "s4convd_kernel", "s4d_kernel", "ssm_recurrence_impulse",
    "rmse", "rmsle",
    "ModelConfig", "ModelParams", "forward", "init_params", "load_checkpoint", "predict", "save_checkpoint",
    "OptimizerState", "backward", "sgd_step", "train",
]
