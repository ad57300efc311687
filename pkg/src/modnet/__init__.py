"""Modular networks whose per-input module composition is a latent variable.

Training options: hard-assignment EM with a sampled search step, score-based
policy gradients, noisy top-k mixture gating, and a static architecture
baseline.  Everything runs on a small float64 tape-based autodiff core.
"""

from modnet.autodiff import (
    Parameter,
    ShapeError,
    Tape,
    Tensor,
    grad_check,
)
from modnet.modular import Controller, ModularLayer, ModularNet, ModulePool

__all__ = [
    "Parameter",
    "ShapeError",
    "Tape",
    "Tensor",
    "grad_check",
    "Controller",
    "ModularLayer",
    "ModularNet",
    "ModulePool",
]

__version__ = "0.1.0"
