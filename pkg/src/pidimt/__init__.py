"""Diffusion planner with a DiMT backbone and port-Hamiltonian guidance."""
from .config import ModelConfig, RunConfig, SampleConfig, TrainConfig, desk_config, load_config
from .model import PiDiMT
from .planner import loss_terms, sample

__all__ = ["ModelConfig", "RunConfig", "SampleConfig", "TrainConfig", "desk_config", "load_config",
           "PiDiMT", "loss_terms", "sample"]
__version__ = "0.1.0"
