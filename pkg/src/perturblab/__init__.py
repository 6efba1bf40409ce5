"""Desk-scale lab for comparing training-time perturbations in seq2seq models.

Implements a minimal float64 autodiff engine, a small transformer
encoder-decoder, the perturbation stack (token replacement, word dropout,
adversarial embedding offsets with a virtual-adversarial consistency loss),
and the training / evaluation / benchmarking machinery needed to compare
the strategies on synthetic tasks.
"""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor, backward, finite_difference_check, op_apply
from .model import ModelConfig, ModelParams, forward, greedy_decode, init_params
from .perturb import DecaySchedule, PerturbationStrategy, apply_strategy, decay_alpha
from .rng import RngStreams

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "finite_difference_check",
    "op_apply",
    "ModelConfig",
    "ModelParams",
    "forward",
    "greedy_decode",
    "init_params",
    "DecaySchedule",
    "PerturbationStrategy",
    "apply_strategy",
    "decay_alpha",
    "RngStreams",
]
