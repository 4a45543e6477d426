"""Semi-supervised variational recurrent sequence models.

A library and CLI for jointly modeling continuous observation sequences and
per-frame discrete labels with time-dependent priors, supporting flat,
hierarchical and multi-entity variants, trained end to end with a built-in
reverse-mode autodiff engine.
"""

__version__ = "0.1.0"

from .autodiff import Graph, Tensor, clip_gradients, grad_check
from .model import ModelSpec, cell_step, init_model, init_state
from .objectives import sequence_loss, step_loss, unlabeled_loss_exact
from .rng import NoiseSource

__all__ = [
    "Graph",
    "Tensor",
    "clip_gradients",
    "grad_check",
    "ModelSpec",
    "cell_step",
    "init_model",
    "init_state",
    "sequence_loss",
    "step_loss",
    "unlabeled_loss_exact",
    "NoiseSource",
    "__version__",
]
