"""Masked-diffusion neural sampler for Ising and Potts lattices."""

from .lattice import MASK, ModelSpec, energy, reward
from .exact import build_exact
from .score import Arch, ScoreModel, init_model
from .masked import sample_trajectories
from .trainer import TrainConfig, train

__all__ = ["MASK", "ModelSpec", "energy", "reward", "build_exact", "Arch", "ScoreModel",
           "init_model", "sample_trajectories", "TrainConfig", "train"]
__version__ = "0.1.0"
