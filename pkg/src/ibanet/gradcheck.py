"""Central finite-difference checking for tape gradients.

The numeric side only ever calls the model's forward pass, so it shares no
code with the reverse-mode path it is checking. ``build_loss`` must be a
zero-argument callable that reruns the forward computation against the
current parameter values and returns a scalar Tensor.
"""

import numpy as np

from .tensor import Tape


def numeric_gradient(build_loss, param, h=1e-5):
    """Elementwise central differences of the loss wrt one parameter."""
    grad = np.zeros_like(param.data)
    flat = param.data.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = build_loss().item()
        flat[i] = orig - h
        f_minus = build_loss().item()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def analytic_gradients(build_loss, params):
    """Tape gradients for ``params``, in order."""
    with Tape() as tape:
        for p in params:
            tape.watch(p)
        loss = build_loss()
    grad_map = tape.backward(loss)
    return [g.data for g in tape.gradients_for(params, grad_map)]


def max_relative_error(a, b, floor=1e-6):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def compare_gradients(build_loss, params, h=1e-5, floor=1e-6):
    """Worst relative error across all parameters, with per-parameter detail.

    Returns ``(max_error, errors)`` where ``errors[i]`` is the max relative
    error for ``params[i]``.
    """
    analytic = analytic_gradients(build_loss, params)
    errors = []
    for p, g_a in zip(params, analytic):
        g_n = numeric_gradient(build_loss, p, h=h)
        errors.append(max_relative_error(g_a, g_n, floor=floor))
    return (max(errors) if errors else 0.0), errors
