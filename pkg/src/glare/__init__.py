"""Low-light image enhancement with a normal-light codebook prior, a conditional latent flow, and adaptive feature fusion, on a small numpy autodiff core."""

from .tensor import Tensor, TensorError, no_grad, precision

__version__ = "0.1.0"

__all__ = ["Tensor", "TensorError", "no_grad", "precision", "__version__"]
