"""Adam with decoupled step-count bias correction and an L2 penalty term.

The weight decay is the classic coupled form: ``wd * param`` is added to the
raw gradient before the moment updates, so decay flows through the adaptive
scaling. Parameters update in place; the caller owns which tensors are
decayed (the fixed classifier geometry never is).
"""

import numpy as np


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params, lr, weight_decay=0.0, beta1=0.9, beta2=0.999,
                 eps=1e-8):
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(state, params, grads, lr=None, decay_mask=None):
    """One update over a parameter list.

    ``grads`` aligns with ``params``; ``decay_mask`` (same length, booleans)
    switches the L2 term per parameter, defaulting to decay-everything.
    ``lr`` overrides the stored rate for this step (epoch schedules).
    """
    rate = state.lr if lr is None else float(lr)
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        # ndarray.data is a memoryview, so duck-typing on .data would misfire
        grad = g if isinstance(g, np.ndarray) else g.data
        if state.weight_decay != 0.0 and (decay_mask is None or decay_mask[i]):
            grad = grad + state.weight_decay * p.data
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad * grad
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.data -= rate * m_hat / (np.sqrt(v_hat) + state.eps)


def lr_at_epoch(base_lr, epoch, drop_every=20, factor=0.1):
    """Step schedule: multiply by ``factor`` once per ``drop_every`` epochs."""
    return base_lr * factor ** (epoch // drop_every)
