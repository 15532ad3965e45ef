"""Full model assembly: multi-rate fusion variants and single-rate baselines.

A model variant is one of:

- ``iba_net`` — per-rate encoders, soft-routed expert fusion, dual-branch head;
- ``fusion:<mode>`` — same components, but the projected per-rate features are
  combined by ``addition``, ``averaging``, ``multiplication``,
  ``concatenation``, or ``soft_weighted`` (the last is exactly ``iba_net``);
- ``single_rate:<hz>`` — one encoder over one decimated view, same head; the
  conventional fixed-rate baseline.

Components are always constructed in the same order from one rng stream, so
two variants sharing a component start from identical weights under the same
seed.
"""

import numpy as np

from . import tensor as T
from .classifier import DualBranchHead, generate_etf
from .errors import ParameterError
from .fusion import Encoder, FusionModule, pool

FUSION_MODES = (
    "soft_weighted",
    "addition",
    "averaging",
    "multiplication",
    "concatenation",
)


def parse_variant(text):
    """Split a variant string into (fusion_mode, baseline_rate_hz)."""
    if text == "iba_net":
        return "soft_weighted", None
    if text.startswith("fusion:"):
        mode = text.split(":", 1)[1]
        if mode not in FUSION_MODES:
            raise ParameterError(
                f"unknown fusion mode {mode!r}; expected one of {FUSION_MODES}"
            )
        return mode, None
    if text.startswith("single_rate:"):
        try:
            rate = float(text.split(":", 1)[1])
        except ValueError:
            raise ParameterError(f"bad rate in variant {text!r}") from None
        if rate <= 0:
            raise ParameterError("baseline rate must be positive")
        return "single", rate
    raise ParameterError(f"unknown model variant {text!r}")


class ActivityModel:
    """One configured network: forward pass plus its parameter registry."""

    def __init__(self, rng, n_rates, n_classes, fusion_mode="soft_weighted",
                 enc_channels=(8, 16, 32), kernel=5, stride=2, pad=2,
                 head_dim=None, k=0.3, etf_seed=0):
        self.fusion_mode = fusion_mode
        self.n_classes = n_classes
        if fusion_mode == "single":
            self.encoder = Encoder(
                rng, channels=enc_channels, kernel=kernel, stride=stride, pad=pad
            )
            self.fusion = None
            feat_dim = self.encoder.out_channels
        elif fusion_mode in FUSION_MODES:
            self.encoder = None
            self.fusion = FusionModule(
                rng, n_rates, channels=enc_channels, kernel=kernel,
                stride=stride, pad=pad
            )
            feat_dim = self.fusion.out_dim
            if fusion_mode == "concatenation":
                feat_dim *= n_rates
        else:
            raise ParameterError(f"unknown fusion mode {fusion_mode!r}")
        self.prototypes = generate_etf(
            n_classes, head_dim if head_dim else n_classes, seed=etf_seed
        )
        self.head = DualBranchHead(rng, feat_dim, self.prototypes, k)

    def fused_feature(self, xs, tau):
        """Feature entering the head, plus router rates when routing ran."""
        if self.fusion_mode == "single":
            if len(xs) != 1:
                raise ParameterError("single-rate model expects exactly one view")
            return pool(self.encoder(xs[0])), None
        if self.fusion_mode == "soft_weighted":
            feature, rates = self.fusion(xs, tau)
            return feature, rates
        embeddings = self.fusion.embed(xs)
        projected = [
            expert(e) for expert, e in zip(self.fusion.experts, embeddings)
        ]
        if self.fusion_mode == "concatenation":
            return T.concat(projected, axis=1), None
        acc = projected[0]
        for p in projected[1:]:
            if self.fusion_mode == "multiplication":
                acc = T.mul(acc, p)
            else:
                acc = T.add(acc, p)
        if self.fusion_mode == "averaging":
            acc = T.scale(acc, 1.0 / len(projected))
        return acc, None

    def forward(self, xs, tau):
        """Logits plus diagnostics (branch logits, router rates)."""
        feature, rates = self.fused_feature(xs, tau)
        logits, z_etf, z_fc = self.head(feature)
        return logits, {"rates": rates, "z_etf": z_etf, "z_fc": z_fc}

    def params(self):
        out = []
        if self.fusion is not None:
            out.extend(self.fusion.params("fusion"))
        if self.encoder is not None:
            out.extend(self.encoder.params("encoder"))
        out.extend(self.head.params("head"))
        return out

    def param_tensors(self):
        return [t for _, t in self.params()]

    def state_copy(self):
        return [t.data.copy() for t in self.param_tensors()]

    def load_state(self, state):
        for t, data in zip(self.param_tensors(), state):
            np.copyto(t.data, data)


def batch_views(batch, factors):
    """Decimated conv-ready views of a (B, channels, samples) batch.

    Each view is (B, 1, H, W_s): the sensor axes become the preserved map
    height and convolution runs along time.
    """
    views = []
    for s in factors:
        v = np.ascontiguousarray(batch[:, None, :, ::s])
        views.append(v)
    return views
