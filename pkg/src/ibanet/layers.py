"""Parameter initialization and the shared fully-connected building block.

Weights draw from a seeded uniform Kaiming-style fan-in distribution,
U(-sqrt(6/fan_in), +sqrt(6/fan_in)); biases start at zero. Construction
order against a single rng stream is what makes whole-model builds
reproducible, so components must create their parameters in a fixed order.
"""

import numpy as np

from . import tensor as T


def uniform_fan_in(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    """Dense layer storing W as (in, out) so batches right-multiply."""

    def __init__(self, rng, in_dim, out_dim):
        self.w = T.Tensor(
            uniform_fan_in(rng, (in_dim, out_dim), in_dim), requires_grad=True
        )
        self.b = T.Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x):
        return T.add(T.matmul(x, self.w), self.b)

    def params(self, prefix):
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]


def conv_filter(rng, out_channels, in_channels, kernel):
    """Time-convolution weight (C_out, C_in, K) with matching fan-in."""
    return T.Tensor(
        uniform_fan_in(
            rng, (out_channels, in_channels, kernel), in_channels * kernel
        ),
        requires_grad=True,
    )


def conv_bias(out_channels):
    # stored broadcast-ready against (B, C, H, W) maps
    return T.Tensor(np.zeros((1, out_channels, 1, 1)), requires_grad=True)
