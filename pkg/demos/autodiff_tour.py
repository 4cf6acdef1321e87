"""
Title: A small reverse-mode autodiff in numpy
Description: Build a graph, call backward, and check it against finite differences.
"""

"""
## Setup

Everything in `glare` runs on a tiny tape-based autodiff. A `Tensor` wraps a
numpy array, and each op records how to push gradients back to its parents.
"""

import numpy as np

from glare import tensor as T
from glare.tensor import Tensor, TensorError, gradcheck, no_grad, precision

rng = np.random.default_rng(0)

"""
## A first graph

A 3x3 convolution, a SiLU, and a mean. `backward()` fills `.grad` on every
leaf that asked for it.
"""

x = Tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True)
w = Tensor(rng.normal(size=(4, 2, 3, 3)) * 0.3, requires_grad=True)
loss = T.mean(T.silu(T.conv2d(x, w, pad=1)))
loss.backward()
print("loss", float(loss.data))
print("grad shapes", x.grad.shape, w.grad.shape)

"""
## Checking gradients

Central differences are noisy in 32-bit, so gradchecks run inside
`precision(np.float64)`. The returned number is a relative max-norm error.
"""

with precision(np.float64):
    x = Tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 2, 3, 3)) * 0.3, requires_grad=True)
    err = gradcheck(lambda: T.mean(T.silu(T.conv2d(x, w, pad=1))), [x, w])
print(f"conv2d + silu relative error: {err:.2e}")

"""
## Guard rails

Non-finite values raise at the op that produced them, and `no_grad()` skips
building the tape entirely.
"""

try:
    T.log(Tensor(np.array([-1.0])))
except TensorError as e:
    print("caught:", e)

with no_grad():
    y = T.square(Tensor(np.ones(3), requires_grad=True))
print("requires_grad under no_grad:", y.requires_grad)
