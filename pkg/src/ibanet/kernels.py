"""Hot numeric kernels for the time-axis convolution.

The convolution forward/backward passes dominate CPU training time, so they
come in two interchangeable implementations:

* ``*_numba`` -- scalar loops compiled with ``numba.njit`` (single-threaded,
  cached to disk). This is the default path.
* ``*_numpy`` -- vectorized fallback built on ``sliding_window_view`` and
  ``einsum``.

Set ``IBANET_DISABLE_NUMBA=1`` to force the numpy path (or it is selected
automatically when numba is not importable). Both paths compute the same
quantities; they may differ in the last few ulps because summation order
differs. ``benchmarks/bench_kernels.py`` times one against the other.

Array conventions: input ``x`` is ``(B, C_in, H, W)``, weights are
``(C_out, C_in, K)`` with the kernel spanning the time axis W only, output is
``(B, C_out, H, W_out)`` with ``W_out = (W + 2*pad - K) // stride + 1``.
"""

import os

import numpy as np

HAS_NUMBA = False
if os.environ.get("IBANET_DISABLE_NUMBA", "0") not in ("1", "true", "yes"):
    try:
        from numba import njit

        HAS_NUMBA = True
    except ImportError:
        HAS_NUMBA = False


def _pad_time(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (0, 0), (pad, pad)))


def conv_out_width(width, kernel, stride, pad):
    return (width + 2 * pad - kernel) // stride + 1


# -- numpy path ---------------------------------------------------------------


def conv_forward_numpy(x, w, stride, pad):
    xp = _pad_time(x, pad)
    k = w.shape[2]
    # patches: (B, C_in, H, W_out, K)
    patches = np.lib.stride_tricks.sliding_window_view(xp, k, axis=3)[:, :, :, ::stride, :]
    return np.einsum("bihwk,oik->bohw", patches, w, optimize=True)


def conv_backward_numpy(x, w, g_out, stride, pad):
    xp = _pad_time(x, pad)
    k = w.shape[2]
    patches = np.lib.stride_tricks.sliding_window_view(xp, k, axis=3)[:, :, :, ::stride, :]
    g_w = np.einsum("bihwk,bohw->oik", patches, g_out, optimize=True)

    g_xp = np.zeros_like(xp)
    # scatter each kernel tap back onto the (strided) input positions
    spread = np.einsum("bohw,oik->bihwk", g_out, w, optimize=True)
    w_out = g_out.shape[3]
    for j in range(k):
        g_xp[:, :, :, j : j + (w_out - 1) * stride + 1 : stride] += spread[:, :, :, :, j]
    if pad:
        g_x = g_xp[:, :, :, pad:-pad]
    else:
        g_x = g_xp
    return g_x, g_w


# -- numba path ---------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _conv_forward_core(xp, w, stride, w_out):
        b_n, c_in, h_n, _ = xp.shape
        c_out, _, k = w.shape
        out = np.zeros((b_n, c_out, h_n, w_out))
        for b in range(b_n):
            for co in range(c_out):
                for ci in range(c_in):
                    for h in range(h_n):
                        for wo in range(w_out):
                            base = wo * stride
                            acc = 0.0
                            for j in range(k):
                                acc += xp[b, ci, h, base + j] * w[co, ci, j]
                            out[b, co, h, wo] += acc
        return out

    @njit(cache=True)
    def _conv_backward_core(xp, w, g_out, stride):
        b_n, c_in, h_n, _ = xp.shape
        c_out, _, k = w.shape
        w_out = g_out.shape[3]
        g_xp = np.zeros_like(xp)
        g_w = np.zeros_like(w)
        for b in range(b_n):
            for co in range(c_out):
                for ci in range(c_in):
                    for h in range(h_n):
                        for wo in range(w_out):
                            g = g_out[b, co, h, wo]
                            base = wo * stride
                            for j in range(k):
                                g_xp[b, ci, h, base + j] += g * w[co, ci, j]
                                g_w[co, ci, j] += g * xp[b, ci, h, base + j]
        return g_xp, g_w

    def conv_forward_numba(x, w, stride, pad):
        xp = np.ascontiguousarray(_pad_time(x, pad))
        w_out = conv_out_width(x.shape[3], w.shape[2], stride, pad)
        return _conv_forward_core(xp, np.ascontiguousarray(w), stride, w_out)

    def conv_backward_numba(x, w, g_out, stride, pad):
        xp = np.ascontiguousarray(_pad_time(x, pad))
        g_xp, g_w = _conv_backward_core(
            xp, np.ascontiguousarray(w), np.ascontiguousarray(g_out), stride
        )
        if pad:
            g_x = g_xp[:, :, :, pad:-pad]
        else:
            g_x = g_xp
        return g_x, g_w

    conv_forward = conv_forward_numba
    conv_backward = conv_backward_numba
    BACKEND = "numba"
else:
    conv_forward = conv_forward_numpy
    conv_backward = conv_backward_numpy
    BACKEND = "numpy"
