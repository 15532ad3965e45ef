"""Rate-specialized feature extraction with soft expert fusion.

One CNN encoder per sampling rate produces a feature map whose channel
means (global average pooling) give a fixed-length embedding regardless of
how short the decimated window is. A temperature-softmax router scores how
much each rate should contribute, every embedding passes through its own
hourglass projection expert, and the fused feature is the router-weighted
sum of the projections.
"""

import numpy as np

from . import tensor as T
from .errors import ParameterError
from .layers import Linear, conv_bias, conv_filter


class Encoder:
    """Stacked time convolutions, each halving the sample axis.

    Input maps are (B, 1, H, W) with H the sensor-axis count; every block is
    conv (kernel spanning time only) then ReLU, and H is preserved
    throughout. ``out_channels`` is the embedding width after pooling.
    """

    def __init__(self, rng, channels=(8, 16, 32), kernel=5, stride=2, pad=2,
                 in_channels=1):
        self.stride = stride
        self.pad = pad
        self.blocks = []
        prev = in_channels
        for c in channels:
            self.blocks.append((conv_filter(rng, c, prev, kernel), conv_bias(c)))
            prev = c
        self.out_channels = prev

    def __call__(self, x):
        for w, b in self.blocks:
            x = T.relu(T.add(T.conv2d_time(x, w, stride=self.stride, pad=self.pad), b))
        return x

    def params(self, prefix):
        out = []
        for i, (w, b) in enumerate(self.blocks):
            out.append((f"{prefix}.conv{i}.w", w))
            out.append((f"{prefix}.conv{i}.b", b))
        return out


def pool(feature_map):
    """Per-channel mean over the sensor and time axes: (B,C,H,W) -> (B,C)."""
    return T.global_avg_pool(feature_map)


class ExpertMLP:
    """Two-layer hourglass projection C -> floor(C/2) -> C, GELU after each."""

    def __init__(self, rng, width):
        hidden = width // 2
        if hidden < 1:
            raise ParameterError("hourglass bottleneck must be at least 1 wide")
        self.fc1 = Linear(rng, width, hidden)
        self.fc2 = Linear(rng, hidden, width)

    def __call__(self, e):
        return T.gelu(self.fc2(T.gelu(self.fc1(e))))

    def params(self, prefix):
        return self.fc1.params(f"{prefix}.fc1") + self.fc2.params(f"{prefix}.fc2")


class Router:
    """Two-layer scoring MLP over the mean embedding, one logit per rate."""

    def __init__(self, rng, width, n_rates):
        self.n_rates = n_rates
        self.fc1 = Linear(rng, width, width // 2)
        self.fc2 = Linear(rng, width // 2, n_rates)

    def logits(self, embeddings):
        acc = embeddings[0]
        for e in embeddings[1:]:
            acc = T.add(acc, e)
        mean = T.scale(acc, 1.0 / len(embeddings))
        return self.fc2(T.gelu(self.fc1(mean)))

    def __call__(self, embeddings, tau):
        if len(embeddings) != self.n_rates:
            raise ParameterError(
                f"router configured for {self.n_rates} rates, got {len(embeddings)}"
            )
        return T.softmax_with_temperature(self.logits(embeddings), tau)

    def params(self, prefix):
        return self.fc1.params(f"{prefix}.fc1") + self.fc2.params(f"{prefix}.fc2")


def route(embeddings, router, tau):
    """Contribution rates r with sum(r) = 1 along the rate axis."""
    return router(embeddings, tau)


def _rate_column(rates, index, n_rates):
    """Slice column ``index`` of (B, N) rates as (B, 1), within the op set."""
    one_hot = np.zeros(n_rates)
    one_hot[index] = 1.0
    picked = T.mul(rates, T.Tensor(one_hot))
    return T.reduce_sum(picked, axis=1, keepdims=True)


def fuse(embeddings, rates, experts):
    """Router-weighted sum of per-rate expert projections."""
    if len(embeddings) != len(experts):
        raise ParameterError("one projection expert per rate required")
    n = len(experts)
    acc = None
    for i, (e, expert) in enumerate(zip(embeddings, experts)):
        weighted = T.mul(expert(e), _rate_column(rates, i, n))
        acc = weighted if acc is None else T.add(acc, weighted)
    return acc


class FusionModule:
    """Encoders, experts, and router bundled in deterministic build order."""

    def __init__(self, rng, n_rates, channels=(8, 16, 32), kernel=5, stride=2,
                 pad=2):
        self.encoders = [
            Encoder(rng, channels=channels, kernel=kernel, stride=stride, pad=pad)
            for _ in range(n_rates)
        ]
        width = self.encoders[0].out_channels
        self.experts = [ExpertMLP(rng, width) for _ in range(n_rates)]
        self.router = Router(rng, width, n_rates)
        self.out_dim = width

    def embed(self, xs):
        return [pool(enc(x)) for enc, x in zip(self.encoders, xs)]

    def __call__(self, xs, tau):
        embeddings = self.embed(xs)
        rates = route(embeddings, self.router, tau)
        return fuse(embeddings, rates, self.experts), rates

    def params(self, prefix="fusion"):
        out = []
        for i, enc in enumerate(self.encoders):
            out.extend(enc.params(f"{prefix}.enc{i}"))
        for i, ex in enumerate(self.experts):
            out.extend(ex.params(f"{prefix}.expert{i}"))
        out.extend(self.router.params(f"{prefix}.router"))
        return out
