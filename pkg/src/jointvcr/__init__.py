"""Joint answer/rationale prediction with differentiable discrete answer selection."""

from . import autodiff, data, model, relax, train
from .data import GenSpec, Instance, generate, load_jsonl, save_jsonl
from .model import ModelConfig, forward_joint, init_params
from .relax import (
    GumbelConfig,
    GumbelSoftmax,
    JointCE,
    ScoreFunction,
    ScoreFunctionConfig,
    Softmax,
)
from .train import MetricsRow, TrainConfig, evaluate, run_ablation, train_run

__version__ = "0.1.0"
