"""distinctnet: siamese correlation segmentation with self-supervised training.

A desk-scale implementation of a two-frame motion segmentation network
(shared-weight encoder, normalized global correlation, ASPP + decoder,
optional ConvLSTM memory) together with the procedural data generators,
two-stage training pipeline and evaluation harnesses that drive it.
"""
from . import autodiff
from .autodiff import DTensor, no_grad

__version__ = "0.1.0"
__all__ = ["autodiff", "DTensor", "no_grad", "__version__"]
