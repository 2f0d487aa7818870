"""Soft-prompt tuning on a small frozen encoder, built on a numpy autodiff engine."""

from .autodiff import Tape, Tensor, backpropagate
from .backbone import BackboneConfig, FrozenBackbone, init_backbone, load_backbone, save_backbone
from .harness import ExperimentConfig, RunResult, run_experiment
from .reparam import METHODS, init_prompt

__all__ = [
    "BackboneConfig", "ExperimentConfig", "FrozenBackbone", "METHODS", "RunResult", "Tape",
    "Tensor", "backpropagate", "init_backbone", "init_prompt", "load_backbone", "run_experiment",
    "save_backbone",
]

__version__ = "0.1.0"
