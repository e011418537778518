"""florashot: a self-contained few-shot image classification laboratory.

Tape-based reverse-mode autodiff with higher-order gradients, MAML (exact
and first-order), a frozen-backbone transfer baseline, an augmentation and
episodic-sampling pipeline, classification metrics, and a synthetic flora
generator that makes everything reproducible offline.
"""

from .rng import Rng
from .tensor import Tape, Tensor, grad, no_grad

__all__ = ["Rng", "Tape", "Tensor", "grad", "no_grad"]
__version__ = "0.1.0"
