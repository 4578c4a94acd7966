"""Difficulty-aware aggregation of noisy crowd labels."""

__version__ = "0.1.0"

from .dataset import LabelSet, SynthConfig, generate_synthetic, parse_ground_truth, parse_labels
from .gibbs import Hyperparams
from .runner import METHODS, fit

__all__ = ["LabelSet", "SynthConfig", "generate_synthetic", "parse_labels", "parse_ground_truth",
           "Hyperparams", "METHODS", "fit"]
