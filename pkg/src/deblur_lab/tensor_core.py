"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`DiffTensor`.  When any input requires a
gradient, the result records its parents and a closure mapping the output
gradient to the parents' gradients.  :meth:`DiffTensor.backward` walks the
recorded graph in reverse topological order.

Images and feature maps are laid out as ``[H, W, C]`` (batch size is always
one).  Convolution weights are ``[kh, kw, Cin, Cout]``; transpose-convolution
weights are ``[kh, kw, Cout, Cin]`` so that a ``conv2d`` and a
``conv2d_transpose`` sharing one weight array are exact adjoints.

Broadcasting is restricted to scalar-with-tensor and a 1-D vector over the
last axis (bias over channels).
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import ConfigurationError, DimensionError, GraphStateError

__all__ = [
    "DiffTensor", "ConvSpec", "AttentionSpec", "AdamState",
    "tensor", "parameter", "no_grad", "grad_enabled",
    "add", "sub", "mul", "div", "neg", "power", "exp", "log", "sqrt", "absolute",
    "square", "relu", "sigmoid", "gelu", "tensor_sum", "tensor_mean", "reshape",
    "transpose", "matmul", "linear", "softmax", "layer_norm", "dropout",
    "concat_channels", "conv2d", "conv2d_transpose", "separable_filter_valid",
    "multi_head_attention", "elementwise", "backward", "adam_step",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference only)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class DiffTensor:
    """An N-d float64 array with an optional gradient slot and graph node.

    ``values`` is read-only once the tensor exists.  ``grad`` is allocated
    lazily by :meth:`backward` and only for leaves that require a gradient.
    """

    __slots__ = ("values", "grad", "requires_grad", "op", "_parents", "_backward", "_consumed")
    __array_priority__ = 1000

    def __init__(self, values, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward_fn=None, _copy: bool = True):
        arr = np.array(values, dtype=np.float64) if _copy else values
        if any(d <= 0 for d in arr.shape):
            raise DimensionError(f"all dimensions must be positive, got shape {arr.shape}")
        arr.setflags(write=False)
        self.values = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = parents
        self._backward = backward_fn
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        if self.values.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "DiffTensor":
        return DiffTensor(self.values, requires_grad=False, _copy=False)

    def __repr__(self) -> str:
        return f"DiffTensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, other: matmul(self, other)
    __pow__ = lambda self, p: power(self, p)


def tensor(values, requires_grad: bool = False) -> DiffTensor:
    return DiffTensor(values, requires_grad=requires_grad)


def parameter(values) -> DiffTensor:
    return DiffTensor(values, requires_grad=True)


def _as_tensor(x) -> DiffTensor:
    return x if isinstance(x, DiffTensor) else DiffTensor(x)


def _result(values: np.ndarray, op: str, parents: tuple, backward_fn) -> DiffTensor:
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not track:
        return DiffTensor(values, op=op, _copy=False)
    return DiffTensor(values, requires_grad=True, op=op, parents=parents,
                      backward_fn=backward_fn, _copy=False)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: DiffTensor, retain_graph: bool = False) -> None:
    """Populate ``grad`` of every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate across calls; call ``zero_grad`` between steps.
    Unless ``retain_graph`` is set the graph is released afterwards and a
    second call raises :class:`GraphStateError`.
    """
    if loss.values.size != 1:
        raise DimensionError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphStateError("backward() already ran on this graph; rebuild the forward pass")
    if not loss.requires_grad:
        return

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads = {id(loss): np.ones_like(loss.values)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    if not retain_graph:
        for node in order:
            if node._backward is not None:
                node._consumed = True
                node._parents = ()
                node._backward = None


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def _check_binary(a: DiffTensor, b: DiffTensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 and a.ndim <= 1 or b.size == 1 and b.ndim <= 1:
        return
    if b.ndim == 1 and a.ndim >= 1 and sa[-1] == sb[0]:
        return
    if a.ndim == 1 and b.ndim >= 1 and sb[-1] == sa[0]:
        return
    raise DimensionError(f"incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return np.asarray(g.sum()).reshape(shape)
    return g.reshape(-1, shape[0]).sum(axis=0)


def add(a, b) -> DiffTensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b)
    out = a.values + b.values

    def _bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _result(out, "add", (a, b), _bw)


def sub(a, b) -> DiffTensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b)
    out = a.values - b.values

    def _bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _result(out, "sub", (a, b), _bw)


def mul(a, b) -> DiffTensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b)
    out = a.values * b.values

    def _bw(g):
        return (_unbroadcast(g * b.values, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.values, b.shape) if b.requires_grad else None)

    return _result(out, "mul", (a, b), _bw)


def div(a, b) -> DiffTensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b)
    out = a.values / b.values

    def _bw(g):
        ga = _unbroadcast(g / b.values, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.values, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, "div", (a, b), _bw)


def neg(x) -> DiffTensor:
    x = _as_tensor(x)
    return _result(-x.values, "neg", (x,), lambda g: (-g,))


def power(x, p: float) -> DiffTensor:
    x = _as_tensor(x)
    p = float(p)
    out = x.values ** p
    return _result(out, "power", (x,), lambda g: (g * p * x.values ** (p - 1.0),))


def exp(x) -> DiffTensor:
    x = _as_tensor(x)
    out = np.exp(x.values)
    return _result(out, "exp", (x,), lambda g: (g * out,))


def log(x) -> DiffTensor:
    x = _as_tensor(x)
    return _result(np.log(x.values), "log", (x,), lambda g: (g / x.values,))


def sqrt(x) -> DiffTensor:
    x = _as_tensor(x)
    out = np.sqrt(x.values)
    return _result(out, "sqrt", (x,), lambda g: (g * 0.5 / out,))


def absolute(x) -> DiffTensor:
    x = _as_tensor(x)
    return _result(np.abs(x.values), "abs", (x,), lambda g: (g * np.sign(x.values),))


def square(x) -> DiffTensor:
    x = _as_tensor(x)
    return _result(x.values * x.values, "square", (x,), lambda g: (2.0 * g * x.values,))


def relu(x) -> DiffTensor:
    x = _as_tensor(x)
    mask = x.values > 0
    return _result(np.where(mask, x.values, 0.0), "relu", (x,), lambda g: (g * mask,))


def sigmoid(x) -> DiffTensor:
    x = _as_tensor(x)
    v = x.values
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x) -> DiffTensor:
    """Exact (erf) GELU."""
    x = _as_tensor(x)
    v = x.values
    cdf = 0.5 * (1.0 + erf(v * _INV_SQRT2))
    out = v * cdf

    def _bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * v * v)
        return (g * (cdf + v * pdf),)

    return _result(out, "gelu", (x,), _bw)


def tensor_sum(x, axis=None) -> DiffTensor:
    x = _as_tensor(x)
    out = np.asarray(x.values.sum(axis=axis))

    def _bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _result(out, "sum", (x,), _bw)


def tensor_mean(x, axis=None) -> DiffTensor:
    x = _as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    out = np.asarray(x.values.mean(axis=axis))

    def _bw(g):
        if axis is None:
            return (np.full(x.shape, float(g) / n),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape) / n,)

    return _result(out, "mean", (x,), _bw)


def reshape(x, shape) -> DiffTensor:
    x = _as_tensor(x)
    out = x.values.reshape(shape)
    return _result(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes) -> DiffTensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.values.transpose(axes))
    return _result(out, "transpose", (x,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def matmul(a, b) -> DiffTensor:
    """``a @ b`` for 2-D operands or stacks with identical leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    out = a.values @ b.values

    def _bw(g):
        ga = g @ np.swapaxes(b.values, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.values, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _result(out, "matmul", (a, b), _bw)


def linear(x, weight, bias=None) -> DiffTensor:
    """Affine map over the last axis: ``x @ weight + bias``."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.values.reshape(-1, x.shape[-1])
    out = x2 @ weight.values
    if bias is not None:
        out = out + bias.values
    out = out.reshape(lead + (weight.shape[1],))

    def _bw(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.values.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, "linear", parents, _bw)


def softmax(x) -> DiffTensor:
    """Softmax over the last axis (max-shifted, so row-constant shifts cancel)."""
    x = _as_tensor(x)
    shifted = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, "softmax", (x,), _bw)


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> DiffTensor:
    """Normalize the last axis to zero mean, unit variance, then scale and shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine params must have shape ({d},)")
    mu = x.values.mean(axis=-1, keepdims=True)
    centered = x.values - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gamma.values + beta.values

    def _bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.values
            gx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).reshape(-1, d).sum(axis=0) if gamma.requires_grad else None
        gb = g.reshape(-1, d).sum(axis=0) if beta.requires_grad else None
        return gx, gg, gb

    return _result(out, "layer_norm", (x, gamma, beta), _bw)


def dropout(x, rate: float, seed: int | None = None, training: bool = True) -> DiffTensor:
    """Inverted dropout driven by an explicit seed; identity when not training."""
    x = _as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = np.random.default_rng(seed).random(x.shape) >= rate
    scale = keep / (1.0 - rate)
    return _result(x.values * scale, "dropout", (x,), lambda g: (g * scale,))


def concat_channels(tensors) -> DiffTensor:
    """Concatenate along the last axis; all leading dims must agree."""
    tensors = [_as_tensor(t) for t in tensors]
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise DimensionError(
                f"concat_channels needs equal spatial dims, got {[t.shape for t in tensors]}")
    out = np.concatenate([t.values for t in tensors], axis=-1)
    bounds = np.cumsum([0] + [t.shape[-1] for t in tensors])

    def _bw(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] if t.requires_grad else None
                     for i, t in enumerate(tensors))

    return _result(out, "concat", tuple(tensors), _bw)


# ---------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvSpec:
    kernel_height: int
    kernel_width: int
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: str = "same"

    def __post_init__(self):
        for name in ("kernel_height", "kernel_width"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ConfigurationError(f"{name} must be an odd positive int, got {k}")
        if self.stride < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ConfigurationError("stride and channel counts must be positive")
        if self.padding not in ("same", "valid"):
            raise ConfigurationError(f"padding must be 'same' or 'valid', got {self.padding!r}")

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        if self.padding == "same":
            return -(-h // self.stride), -(-w // self.stride)
        if h < self.kernel_height or w < self.kernel_width:
            raise DimensionError(f"input {h}x{w} smaller than kernel under 'valid' padding")
        return ((h - self.kernel_height) // self.stride + 1,
                (w - self.kernel_width) // self.stride + 1)

    def pads(self, h: int, w: int) -> tuple[int, int, int, int]:
        """(top, bottom, left, right) zero padding for a conv over an h x w input."""
        if self.padding == "valid":
            return 0, 0, 0, 0
        ho, wo = self.output_size(h, w)
        ph = max((ho - 1) * self.stride + self.kernel_height - h, 0)
        pw = max((wo - 1) * self.stride + self.kernel_width - w, 0)
        return ph // 2, ph - ph // 2, pw // 2, pw - pw // 2

    def transpose_output_size(self, h: int, w: int) -> tuple[int, int]:
        if self.padding == "same":
            return h * self.stride, w * self.stride
        return ((h - 1) * self.stride + self.kernel_height,
                (w - 1) * self.stride + self.kernel_width)


def _window(arr, i, j, s, ho, wo):
    return arr[i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :]


def _correlate(xp, w, s, ho, wo):
    kh, kw, cin, cout = w.shape
    out = np.zeros((ho * wo, cout))
    for i in range(kh):
        for j in range(kw):
            out += _window(xp, i, j, s, ho, wo).reshape(-1, cin) @ w[i, j]
    return out.reshape(ho, wo, cout)


def _correlate_adjoint(g, w, s, hp, wp):
    """Adjoint of :func:`_correlate` w.r.t. its padded input."""
    kh, kw, cin, cout = w.shape
    ho, wo = g.shape[:2]
    g2 = g.reshape(-1, cout)
    out = np.zeros((hp, wp, cin))
    for i in range(kh):
        for j in range(kw):
            _window(out, i, j, s, ho, wo)[...] += (g2 @ w[i, j].T).reshape(ho, wo, cin)
    return out


def _correlate_wgrad(xp, g, s, kh, kw):
    ho, wo, cout = g.shape
    cin = xp.shape[2]
    g2 = g.reshape(-1, cout)
    gw = np.empty((kh, kw, cin, cout))
    for i in range(kh):
        for j in range(kw):
            gw[i, j] = _window(xp, i, j, s, ho, wo).reshape(-1, cin).T @ g2
    return gw


def _check_conv(x, w, b, spec, transpose_op=False):
    name = "conv2d_transpose" if transpose_op else "conv2d"
    if x.ndim != 3:
        raise DimensionError(f"{name}: input must be [H, W, C], got {x.shape}")
    expect_w = ((spec.kernel_height, spec.kernel_width, spec.out_channels, spec.in_channels)
                if transpose_op else
                (spec.kernel_height, spec.kernel_width, spec.in_channels, spec.out_channels))
    if w.shape != expect_w:
        raise DimensionError(f"{name}: weight shape {w.shape} does not match spec {expect_w}")
    if x.shape[2] != spec.in_channels:
        raise DimensionError(
            f"{name}: input has {x.shape[2]} channels, spec expects {spec.in_channels}")
    if b is not None and b.shape != (spec.out_channels,):
        raise DimensionError(f"{name}: bias shape {b.shape} != ({spec.out_channels},)")


def conv2d(x, weight, bias, spec: ConvSpec) -> DiffTensor:
    """2-D cross-correlation of an ``[H, W, Cin]`` map with stride and zero padding."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    bias = None if bias is None else _as_tensor(bias)
    _check_conv(x, weight, bias, spec)
    h, w_ = x.shape[:2]
    ho, wo = spec.output_size(h, w_)
    top, bottom, left, right = spec.pads(h, w_)
    xp = np.pad(x.values, ((top, bottom), (left, right), (0, 0)))
    s = spec.stride
    out = _correlate(xp, weight.values, s, ho, wo)
    if bias is not None:
        out += bias.values

    def _bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = _correlate_adjoint(g, weight.values, s, *xp.shape[:2])
            gx = gxp[top:top + h, left:left + w_]
        if weight.requires_grad:
            gw = _correlate_wgrad(xp, g, s, spec.kernel_height, spec.kernel_width)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 1))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, "conv2d", parents, _bw)


def conv2d_transpose(x, weight, bias, spec: ConvSpec) -> DiffTensor:
    """Transpose convolution: the adjoint of ``conv2d`` with the same stride.

    ``spec.in_channels``/``out_channels`` describe this op (input ``Cin``,
    output ``Cout``); ``weight`` is ``[kh, kw, Cout, Cin]``.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    bias = None if bias is None else _as_tensor(bias)
    _check_conv(x, weight, bias, spec, transpose_op=True)
    h, w_ = x.shape[:2]
    s = spec.stride
    ho, wo = spec.transpose_output_size(h, w_)
    # padding of the forward conv that maps ho x wo back down to h x w
    if spec.padding == "same":
        ph = max((h - 1) * s + spec.kernel_height - ho, 0)
        pw = max((w_ - 1) * s + spec.kernel_width - wo, 0)
        top, left = ph // 2, pw // 2
    else:
        ph = pw = top = left = 0
    hp, wp = ho + ph, wo + pw
    # a conv with weight [kh, kw, Cout, Cin] maps Cout -> Cin; we apply its adjoint
    outp = _correlate_adjoint(x.values, weight.values, s, hp, wp)
    out = outp[top:top + ho, left:left + wo]
    if bias is not None:
        out = out + bias.values

    def _bw(g):
        gx = gw = gb = None
        gp = np.zeros((hp, wp, g.shape[2]))
        gp[top:top + ho, left:left + wo] = g
        if x.requires_grad:
            gx = _correlate(gp, weight.values, s, h, w_)
        if weight.requires_grad:
            gw = _correlate_wgrad(gp, x.values, s, spec.kernel_height, spec.kernel_width)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 1))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(np.ascontiguousarray(out), "conv2d_transpose", parents, _bw)


def _filter_axis_valid(arr: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    n = arr.shape[axis] - taps.size + 1
    out = None
    for k, t in enumerate(taps):
        part = t * np.take(arr, np.arange(k, k + n), axis=axis)
        out = part if out is None else out + part
    return out


def _filter_axis_valid_adjoint(g: np.ndarray, taps: np.ndarray, axis: int, full: int) -> np.ndarray:
    shape = list(g.shape)
    shape[axis] = full
    out = np.zeros(shape)
    n = g.shape[axis]
    for k, t in enumerate(taps):
        idx = [slice(None)] * g.ndim
        idx[axis] = slice(k, k + n)
        out[tuple(idx)] += t * g
    return out


def separable_filter_valid(x, taps) -> DiffTensor:
    """Correlate every channel with ``taps`` along H then W, 'valid' extent.

    The taps are fixed (not differentiated); used for Gaussian SSIM windows.
    """
    x = _as_tensor(x)
    taps = np.asarray(taps, dtype=np.float64)
    if x.shape[0] < taps.size or x.shape[1] < taps.size:
        raise DimensionError(f"input {x.shape[:2]} smaller than {taps.size}-tap window")
    rows = _filter_axis_valid(x.values, taps, 0)
    out = _filter_axis_valid(rows, taps, 1)

    def _bw(g):
        g_rows = _filter_axis_valid_adjoint(g, taps, 1, x.shape[1])
        return (_filter_axis_valid_adjoint(g_rows, taps, 0, x.shape[0]),)

    return _result(out, "separable_filter", (x,), _bw)


# ---------------------------------------------------------------------------
# attention


@dataclass(frozen=True)
class AttentionSpec:
    embed_dim: int
    num_heads: int
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.embed_dim < 1 or self.num_heads < 1:
            raise ConfigurationError("embed_dim and num_heads must be positive")
        if self.embed_dim % self.num_heads:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


ATTENTION_PARAM_NAMES = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


def multi_head_attention(tokens, spec: AttentionSpec, params: dict, training: bool = False,
                         seed: int | None = None, return_weights: bool = False):
    """Scaled dot-product self-attention over ``[N, D]`` tokens.

    ``params`` maps ``wq, bq, wk, bk, wv, bv, wo, bo`` to tensors with
    ``[D, D]`` weights and ``[D]`` biases.  With ``return_weights`` the
    ``[heads, N, N]`` attention matrix is returned as well.
    """
    tokens = _as_tensor(tokens)
    if tokens.ndim != 2 or tokens.shape[1] != spec.embed_dim:
        raise DimensionError(f"attention expects [N, {spec.embed_dim}] tokens, got {tokens.shape}")
    n = tokens.shape[0]
    h, hd = spec.num_heads, spec.head_dim

    def heads(t):
        return transpose(reshape(t, (n, h, hd)), (1, 0, 2))

    q = heads(linear(tokens, params["wq"], params["bq"]))
    k = heads(linear(tokens, params["wk"], params["bk"]))
    v = heads(linear(tokens, params["wv"], params["bv"]))
    logits = mul(matmul(q, transpose(k, (0, 2, 1))), 1.0 / math.sqrt(hd))
    weights = softmax(logits)
    attended = dropout(weights, spec.dropout_rate, seed=seed, training=training)
    merged = reshape(transpose(matmul(attended, v), (1, 0, 2)), (n, spec.embed_dim))
    out = linear(merged, params["wo"], params["bo"])
    return (out, weights) if return_weights else out


# ---------------------------------------------------------------------------
# dispatcher


_ELEMENTWISE = {
    "relu": relu,
    "sigmoid": sigmoid,
    "gelu": gelu,
    "add": add,
    "multiply": mul,
    "concat_channels": lambda *ts: concat_channels(ts),
    "layer_norm": layer_norm,
    "dropout": dropout,
    "linear": linear,
}


def elementwise(op: str, *args, **kwargs) -> DiffTensor:
    """Apply a named elementwise/shape op, e.g. ``elementwise("relu", x)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ConfigurationError(f"unknown op {op!r}; choose from {sorted(_ELEMENTWISE)}") from None
    return fn(*args, **kwargs)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-7):
    """One bias-corrected Adam update.

    Returns a new ``{name: DiffTensor}`` dict of leaf parameters and the new
    state; inputs are left untouched.  Missing or ``None`` gradients count
    as zero.
    """
    step = state.step + 1
    new_m, new_v, new_params = {}, {}, {}
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros(p.shape) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, param {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m, v = np.zeros(p.shape), np.zeros(p.shape)
        elif m.shape != p.shape or v.shape != p.shape:
            raise DimensionError(f"Adam moments for {name!r} do not match param shape {p.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_params[name] = DiffTensor(p.values - update, requires_grad=True, _copy=False)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(step=step, m=new_m, v=new_v)
