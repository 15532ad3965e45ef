"""Dense float64 tensors with tape-based reverse-mode differentiation.

The design is a flat tape rather than a closure graph: every primitive
application is recorded as one tape entry (op kind, input node ids, saved
arrays), and :meth:`Tape.backward` walks the entries once in reverse. Tensors
are value-like wrappers around contiguous float64 numpy arrays; a tensor
joins a tape lazily the first time it participates in a primitive while that
tape is active.

Only the primitives the model needs exist, and broadcasting is limited to
what those primitives require (bias adds, per-sample scaling). Convolution
forward/backward dispatch to :mod:`ibanet.kernels`.
"""

import math
import os

import numpy as np

from .errors import ContractError, ParameterError, ShapeError
from . import kernels

_DEBUG_FINITE = os.environ.get("IBANET_DEBUG_FINITE", "0") in ("1", "true", "yes")

_NORM_EPS = 1e-12
_degenerate_norm_count = 0


def set_debug_finite(enabled):
    """Toggle the per-primitive NaN/Inf output check (off by default)."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(enabled)


def degenerate_norm_count():
    """Number of near-zero-norm rows seen by ``l2_normalize`` so far."""
    return _degenerate_norm_count


def reset_degenerate_norm_count():
    global _degenerate_norm_count
    _degenerate_norm_count = 0


class Tensor:
    """A shaped block of float64 values, optionally tracked for gradients.

    ``node_id`` is the handle assigned by the tape the tensor last joined;
    it is ``None`` for tensors that never participated in a recorded
    primitive.
    """

    __slots__ = ("data", "requires_grad", "node_id", "_tape")

    def __init__(self, data, requires_grad=False):
        # asarray keeps 0-d scalars 0-d; ascontiguousarray would promote them
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.node_id = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


class _Record:
    __slots__ = ("kind", "in_ids", "out_id", "attrs", "saved")

    def __init__(self, kind, in_ids, out_id, attrs, saved):
        self.kind = kind
        self.in_ids = in_ids
        self.out_id = out_id
        self.attrs = attrs
        self.saved = saved


_TAPE_STACK = []


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Use as a context manager around the forward computation; primitives
    applied while the tape is active are recorded when any input is
    gradient-tracked. A tape is confined to a single training step and is
    not thread-safe.
    """

    def __init__(self):
        self._records = []
        self._next_id = 0
        self._node_of = {}
        self._registered = []
        self._leaves = {}

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def _register(self, tensor, leaf):
        nid = self._next_id
        self._next_id += 1
        self._node_of[id(tensor)] = nid
        self._registered.append(tensor)
        tensor.node_id = nid
        tensor._tape = self
        if leaf:
            self._leaves[nid] = tensor
        return nid

    def watch(self, tensor):
        """Register a gradient-tracked leaf ahead of its first use."""
        if not tensor.requires_grad:
            raise ContractError("watch() requires a tensor with requires_grad=True")
        if id(tensor) not in self._node_of:
            self._register(tensor, leaf=True)
        return tensor.node_id

    def _input_id(self, tensor):
        nid = self._node_of.get(id(tensor))
        if nid is None and tensor.requires_grad:
            nid = self._register(tensor, leaf=True)
        return nid

    def backward(self, loss):
        """Gradients of a scalar loss for every watched leaf.

        Returns a map ``node_id -> Tensor``. Leaves that do not participate
        in the loss get zero gradients.
        """
        if not isinstance(loss, Tensor) or loss.data.ndim != 0:
            raise ContractError("backward() expects a scalar (0-d) Tensor loss")
        loss_id = self._node_of.get(id(loss))
        if loss_id is None or loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")

        grads = {loss_id: np.ones((), dtype=np.float64)}
        for rec in reversed(self._records):
            g_out = grads.get(rec.out_id)
            if g_out is None:
                continue
            in_grads = _BACKWARD[rec.kind](rec.saved, rec.attrs, g_out)
            for nid, g_in in zip(rec.in_ids, in_grads):
                if nid is None or g_in is None:
                    continue
                acc = grads.get(nid)
                if acc is None:
                    grads[nid] = g_in
                else:
                    grads[nid] = acc + g_in

        out = {}
        for nid, leaf in self._leaves.items():
            g = grads.get(nid)
            if g is None:
                g = np.zeros_like(leaf.data)
            out[nid] = Tensor(g)
        return out

    def gradients_for(self, params, grad_map):
        """Align a backward() result with a parameter list (zeros if absent)."""
        out = []
        for p in params:
            nid = self._node_of.get(id(p))
            if nid is not None and nid in grad_map:
                out.append(grad_map[nid])
            else:
                out.append(Tensor(np.zeros_like(p.data)))
        return out


def backward(loss):
    """Module-level alias: run backward on the tape that recorded ``loss``."""
    if not isinstance(loss, Tensor) or loss._tape is None:
        raise ContractError("loss was not recorded on any tape")
    return loss._tape.backward(loss)


# -- shape helpers ------------------------------------------------------------


def _shape_error(kind, *shapes):
    listed = ", ".join(str(tuple(s)) for s in shapes)
    return ShapeError(f"{kind}: incompatible operand shapes {listed}")


def _unbroadcast(grad, shape):
    """Sum a broadcasted gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(kind, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(kind, a.shape, b.shape) from None


# -- primitive forward/backward pairs -----------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def _fw_add(datas, attrs):
    a, b = datas
    _check_broadcast("add", a, b)
    return a + b, {"sa": a.shape, "sb": b.shape}


def _bw_add(saved, attrs, g):
    return [_unbroadcast(g, saved["sa"]), _unbroadcast(g, saved["sb"])]


def _fw_sub(datas, attrs):
    a, b = datas
    _check_broadcast("sub", a, b)
    return a - b, {"sa": a.shape, "sb": b.shape}


def _bw_sub(saved, attrs, g):
    return [_unbroadcast(g, saved["sa"]), _unbroadcast(-g, saved["sb"])]


def _fw_mul(datas, attrs):
    a, b = datas
    _check_broadcast("mul_elementwise", a, b)
    return a * b, {"a": a, "b": b}


def _bw_mul(saved, attrs, g):
    a, b = saved["a"], saved["b"]
    return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


def _fw_scale(datas, attrs):
    (a,) = datas
    return a * attrs["factor"], {}


def _bw_scale(saved, attrs, g):
    return [g * attrs["factor"]]


def _fw_matmul(datas, attrs):
    a, b = datas
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    return a @ b, {"a": a, "b": b}


def _bw_matmul(saved, attrs, g):
    a, b = saved["a"], saved["b"]
    return [g @ b.T, a.T @ g]


def _fw_conv2d_time(datas, attrs):
    x, w = datas
    if x.ndim != 4 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise _shape_error("conv2d_time", x.shape, w.shape)
    stride, pad = attrs["stride"], attrs["pad"]
    if kernels.conv_out_width(x.shape[3], w.shape[2], stride, pad) < 1:
        raise ShapeError(
            f"conv2d_time: time extent {x.shape[3]} too short for kernel "
            f"{w.shape[2]} at stride {stride}, pad {pad}"
        )
    out = kernels.conv_forward(x, w, stride, pad)
    return out, {"x": x, "w": w}


def _bw_conv2d_time(saved, attrs, g):
    g_x, g_w = kernels.conv_backward(
        saved["x"], saved["w"], g, attrs["stride"], attrs["pad"]
    )
    return [g_x, g_w]


def _fw_gelu(datas, attrs):
    (x,) = datas
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), {"x": x, "t": t}


def _bw_gelu(saved, attrs, g):
    x, t = saved["x"], saved["t"]
    d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
    return [g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner)]


def _fw_relu(datas, attrs):
    (x,) = datas
    return np.maximum(x, 0.0), {"x": x}


def _bw_relu(saved, attrs, g):
    return [g * (saved["x"] > 0.0)]


def _fw_sigmoid(datas, attrs):
    (x,) = datas
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out, {"s": out}


def _bw_sigmoid(saved, attrs, g):
    s = saved["s"]
    return [g * s * (1.0 - s)]


def _fw_softmax_t(datas, attrs):
    (x,) = datas
    tau = attrs["tau"]
    if not tau > 0:
        raise ParameterError(f"softmax_with_temperature: tau must be > 0, got {tau}")
    z = x / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    return out, {"y": out}


def _bw_softmax_t(saved, attrs, g):
    y = saved["y"]
    dot = (g * y).sum(axis=-1, keepdims=True)
    return [y * (g - dot) / attrs["tau"]]


def _fw_l2_normalize(datas, attrs):
    global _degenerate_norm_count
    (x,) = datas
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    degenerate = norm < _NORM_EPS
    n_bad = int(degenerate.sum())
    if n_bad:
        _degenerate_norm_count += n_bad
    denom = np.where(degenerate, norm + _NORM_EPS, norm)
    return x / denom, {"x": x, "norm": norm, "denom": denom}


def _bw_l2_normalize(saved, attrs, g):
    x, norm = saved["x"], saved["norm"]
    dot = (x * g).sum(axis=-1, keepdims=True)
    # a guarded row has no usable direction, so its slope is dropped instead
    # of letting the projection term underflow into 0/0
    safe = np.maximum(norm, _NORM_EPS)
    full = g / safe - x * dot / safe**3
    return [np.where(norm < _NORM_EPS, 0.0, full)]


def _fw_log(datas, attrs):
    (x,) = datas
    floor = attrs.get("floor")
    if floor is None:
        return np.log(x), {"x": x, "mask": None}
    clipped = np.maximum(x, floor)
    return np.log(clipped), {"x": clipped, "mask": x > floor}


def _bw_log(saved, attrs, g):
    if saved["mask"] is None:
        return [g / saved["x"]]
    return [np.where(saved["mask"], g / saved["x"], 0.0)]


def _fw_pow(datas, attrs):
    (x,) = datas
    p = attrs["exponent"]
    return x**p, {"x": x}


def _bw_pow(saved, attrs, g):
    x, p = saved["x"], attrs["exponent"]
    if p == 1.0:
        return [np.copy(g)]
    # limit-guard: x == 0 with p < 1 would give an infinite slope
    with np.errstate(divide="ignore", invalid="ignore"):
        d = p * x ** (p - 1.0)
    d = np.where(np.isfinite(d), d, 0.0)
    return [g * d]


def _fw_sum(datas, attrs):
    (x,) = datas
    axis = attrs.get("axis")
    keepdims = attrs.get("keepdims", False)
    return x.sum(axis=axis, keepdims=keepdims), {"shape": x.shape}


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _bw_sum(saved, attrs, g):
    return [
        _expand_reduced(
            g, saved["shape"], attrs.get("axis"), attrs.get("keepdims", False)
        ).copy()
    ]


def _fw_mean(datas, attrs):
    (x,) = datas
    axis = attrs.get("axis")
    keepdims = attrs.get("keepdims", False)
    return x.mean(axis=axis, keepdims=keepdims), {"shape": x.shape}


def _bw_mean(saved, attrs, g):
    shape = saved["shape"]
    axis = attrs.get("axis")
    count = np.prod(shape) if axis is None else shape[axis]
    expanded = _expand_reduced(g, shape, axis, attrs.get("keepdims", False))
    return [expanded / count]


def _fw_global_avg_pool(datas, attrs):
    (x,) = datas
    if x.ndim < 3:
        raise _shape_error("global_avg_pool", x.shape)
    return x.mean(axis=(-2, -1)), {"shape": x.shape}


def _bw_global_avg_pool(saved, attrs, g):
    shape = saved["shape"]
    area = shape[-2] * shape[-1]
    return [np.broadcast_to(g[..., None, None], shape) / area]


def _fw_concat(datas, attrs):
    axis = attrs["axis"]
    ref = datas[0].shape
    for d in datas[1:]:
        if len(d.shape) != len(ref) or any(
            d.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)
        ):
            raise _shape_error("concat", *[d.shape for d in datas])
    return np.concatenate(datas, axis=axis), {
        "sizes": [d.shape[axis] for d in datas],
    }


def _bw_concat(saved, attrs, g):
    splits = np.cumsum(saved["sizes"])[:-1]
    return [p.copy() for p in np.split(g, splits, axis=attrs["axis"])]


_FORWARD = {
    "add": _fw_add,
    "sub": _fw_sub,
    "mul_elementwise": _fw_mul,
    "scale": _fw_scale,
    "matmul": _fw_matmul,
    "conv2d_time": _fw_conv2d_time,
    "gelu": _fw_gelu,
    "relu": _fw_relu,
    "sigmoid": _fw_sigmoid,
    "softmax_with_temperature": _fw_softmax_t,
    "l2_normalize": _fw_l2_normalize,
    "log": _fw_log,
    "pow": _fw_pow,
    "sum": _fw_sum,
    "mean": _fw_mean,
    "global_avg_pool": _fw_global_avg_pool,
    "concat": _fw_concat,
}

_BACKWARD = {
    "add": _bw_add,
    "sub": _bw_sub,
    "mul_elementwise": _bw_mul,
    "scale": _bw_scale,
    "matmul": _bw_matmul,
    "conv2d_time": _bw_conv2d_time,
    "gelu": _bw_gelu,
    "relu": _bw_relu,
    "sigmoid": _bw_sigmoid,
    "softmax_with_temperature": _bw_softmax_t,
    "l2_normalize": _bw_l2_normalize,
    "log": _bw_log,
    "pow": _bw_pow,
    "sum": _bw_sum,
    "mean": _bw_mean,
    "global_avg_pool": _bw_global_avg_pool,
    "concat": _bw_concat,
}


def forward_primitive(kind, inputs, attrs=None):
    """Apply one primitive and (when a tape is active) record it.

    The op is recorded only if at least one input is gradient-tracked on the
    active tape; the output then becomes a tracked intermediate.
    """
    if kind not in _FORWARD:
        raise ParameterError(f"unknown primitive kind {kind!r}")
    attrs = attrs or {}
    tensors = [as_tensor(t) for t in inputs]
    datas = [t.data for t in tensors]
    out_data, saved = _FORWARD[kind](datas, attrs)

    if _DEBUG_FINITE and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"{kind}: non-finite values in output")

    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None:
        in_ids = [tape._input_id(t) for t in tensors]
        if any(nid is not None for nid in in_ids):
            out.requires_grad = True
            out_id = tape._register(out, leaf=False)
            tape._records.append(_Record(kind, in_ids, out_id, attrs, saved))
    return out


# -- named wrappers -----------------------------------------------------------


def add(a, b):
    return forward_primitive("add", [a, b])


def sub(a, b):
    return forward_primitive("sub", [a, b])


def mul(a, b):
    return forward_primitive("mul_elementwise", [a, b])


def scale(a, factor):
    return forward_primitive("scale", [a], {"factor": float(factor)})


def matmul(a, b):
    return forward_primitive("matmul", [a, b])


def conv2d_time(x, w, stride=1, pad=0):
    return forward_primitive("conv2d_time", [x, w], {"stride": stride, "pad": pad})


def gelu(x):
    return forward_primitive("gelu", [x])


def relu(x):
    return forward_primitive("relu", [x])


def sigmoid(x):
    return forward_primitive("sigmoid", [x])


def softmax_with_temperature(x, tau):
    return forward_primitive("softmax_with_temperature", [x], {"tau": float(tau)})


def l2_normalize(x):
    return forward_primitive("l2_normalize", [x])


def log(x, floor=None):
    return forward_primitive("log", [x], {"floor": floor})


def power(x, exponent):
    return forward_primitive("pow", [x], {"exponent": float(exponent)})


def reduce_sum(x, axis=None, keepdims=False):
    return forward_primitive("sum", [x], {"axis": axis, "keepdims": keepdims})


def reduce_mean(x, axis=None, keepdims=False):
    return forward_primitive("mean", [x], {"axis": axis, "keepdims": keepdims})


def global_avg_pool(x):
    return forward_primitive("global_avg_pool", [x])


def concat(tensors, axis):
    return forward_primitive("concat", list(tensors), {"axis": axis})
