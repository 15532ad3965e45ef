"""Class-balanced focal loss (one-against-rest) and a cross-entropy baseline.

The balancing weight per class is the inverse effective number of samples,
alpha_y = (1-beta)/(1-beta^{n_y}), computed from training-split counts only.
Each sample is scored as M independent class-vs-rest sigmoid problems: the
true class keeps its logit sign, every other class's logit is negated, and
the focal factor (1-p)^gamma down-weights easy decisions. The class weight
multiplies the whole per-sample sum, and the batch reduction is the mean.
"""

import numpy as np

from . import tensor as T
from .errors import ContractError, ParameterError

PROB_FLOOR = 1e-12


def class_weights(counts, beta):
    """Per-class weights (1-beta)/(1-beta^n) from training-set counts."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 1):
        raise ParameterError("class counts must all be >= 1")
    if not 0.0 <= beta < 1.0:
        raise ParameterError(f"beta must lie in [0, 1), got {beta}")
    return (1.0 - beta) / (1.0 - beta**counts)


def _check_targets(logits, targets):
    z = logits.data
    y = np.asarray(targets)
    if z.ndim != 2:
        raise ContractError(f"expected (batch, classes) logits, got shape {z.shape}")
    if y.ndim != 1 or y.shape[0] != z.shape[0]:
        raise ContractError("one integer target per batch row required")
    if not np.issubdtype(y.dtype, np.integer):
        raise ContractError("targets must be integers")
    if np.any(y < 0) or np.any(y >= z.shape[1]):
        raise ContractError(
            f"target outside [0, {z.shape[1]}): {y[(y < 0) | (y >= z.shape[1])][0]}"
        )
    return y.astype(np.int64)


def one_hot(targets, n_classes):
    y = np.asarray(targets, dtype=np.int64)
    out = np.zeros((y.shape[0], n_classes))
    out[np.arange(y.shape[0]), y] = 1.0
    return out


def cb_focal(logits, targets, weights, gamma):
    """Scalar class-balanced focal loss over a batch of logits.

    ``weights`` holds one alpha per class (use ``class_weights``); passing
    ``None`` means unweighted (all ones). ``gamma=0`` reduces to the plain
    sum of one-vs-rest binary cross-entropies.
    """
    y = _check_targets(logits, targets)
    if gamma < 0:
        raise ParameterError(f"gamma must be >= 0, got {gamma}")
    n_classes = logits.data.shape[1]
    signs = 2.0 * one_hot(y, n_classes) - 1.0

    z_t = T.mul(logits, T.Tensor(signs))
    p_t = T.sigmoid(z_t)
    log_p = T.log(p_t, floor=PROB_FLOOR)
    if gamma == 0:
        weighted_terms = log_p
    else:
        ones = T.Tensor(np.ones_like(signs))
        focal = T.power(T.sub(ones, p_t), gamma)
        weighted_terms = T.mul(focal, log_p)
    per_sample = T.reduce_sum(weighted_terms, axis=1)

    alpha = np.ones(n_classes) if weights is None else np.asarray(weights)
    per_sample = T.mul(per_sample, T.Tensor(alpha[y]))
    return T.scale(T.reduce_mean(per_sample), -1.0)


def cross_entropy(logits, targets):
    """Mean negative log softmax probability of the true class."""
    y = _check_targets(logits, targets)
    n_classes = logits.data.shape[1]
    probs = T.softmax_with_temperature(logits, 1.0)
    log_p = T.log(probs, floor=PROB_FLOOR)
    picked = T.reduce_sum(T.mul(log_p, T.Tensor(one_hot(y, n_classes))), axis=1)
    return T.scale(T.reduce_mean(picked), -1.0)


def make_loss(kind, weights, gamma):
    """Bind a loss callable (logits, targets) -> scalar Tensor."""
    if kind == "cb_focal":
        return lambda z, y: cb_focal(z, y, weights, gamma)
    if kind == "cross_entropy":
        return lambda z, y: cross_entropy(z, y)
    raise ParameterError(f"unknown loss kind {kind!r}")
