"""Progressive depth stacking for dilated-convolution sequential recommenders."""

from .model import ModelConfig, ModelParams, forward, init_model
from .stacking import StackPlan, adjacent_stack, cross_stack, verify_stack
from .training import Schedule, TrainConfig, run_cl, run_tf, run_ts, train

__all__ = [
    "ModelConfig", "ModelParams", "Schedule", "StackPlan", "TrainConfig",
    "adjacent_stack", "cross_stack", "forward", "init_model", "run_cl", "run_tf",
    "run_ts", "train", "verify_stack",
]
__version__ = "0.1.0"
