"""Discriminative particle filter reinforcement learning at desk scale.

Subpackages and modules:
  engine     reverse-mode autodiff, counter-based RNG, RMSProp
  filter     particle belief type and the differentiable update step
  models     encoders, gated cell, heads, checkpoints
  hike       the Mountain Hike environment with irrelevant-noise padding
  trainer    A2C loop, evaluation, full-pipeline gradient check
  config     TrainConfig and flat-file parsing
  summarize  per-cell curve statistics over finished runs
  cli        the `dpfrl` command
"""
from .config import TrainConfig, load_config
from .filter import BeliefFeatures, ParticleBelief
from .models import Params
from .trainer import evaluate, train

__all__ = [
    "BeliefFeatures",
    "Params",
    "ParticleBelief",
    "TrainConfig",
    "evaluate",
    "load_config",
    "train",
]

__version__ = "0.1.0"
