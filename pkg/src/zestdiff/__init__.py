"""zestdiff: desk-scale guided diffusion with attention-derived segmentation.

A from-scratch diffusion engine (numpy-backed autodiff, cross-attention
U-Net) that steers sampling toward user-supplied spatial layouts, plus the
attention-bias baseline and a synthetic shapes benchmark for evaluation.
"""

from .tensor import Tensor, backward, grad_check, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "grad_check", "no_grad", "__version__"]
