"""Minimal reverse-mode differentiation engine.

This module provides the :class:`Tensor` type that every learnable piece of
the package is built from, a registry of differentiable operations, the
:func:`backward` pass, a finite-difference gradient checker and the binary
parameter checkpoint format.

Graph model
-----------

Each operation result remembers the operation kind, its input tensors and a
small context of saved intermediates. Every tensor gets a strictly
increasing ``node_id`` when it is created, so sorting the reachable nodes by
``node_id`` reproduces the forward order exactly. :func:`backward` walks
that order in reverse.

Example
-------

.. code-block:: python

    from doda import diffmath as dm

    x = dm.Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    loss = dm.reduce_sum(dm.mul(x, x))
    dm.backward(loss)
    x.grad          # 2 * x

.. note::
    Broadcasting is deliberately limited to scalar-tensor arithmetic,
    :func:`add_bias` and the explicit :func:`expand` op. Everything else
    requires identical shapes, which keeps each gradient rule short enough
    to audit by eye.
"""

import contextlib
import itertools
import json
import logging
import struct
from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import expit

from doda.errors import GraphError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

#: dtype given to tensors built from Python data when none is requested.
DEFAULT_DTYPE = np.float64

#: Step and tolerance used by :func:`gradcheck`.
FD_STEP = 1e-5
FD_RTOL = 1e-4
FD_ATOL = 1e-7

_node_counter = itertools.count()
_grad_enabled = True


def set_default_dtype(dtype) -> None:
    """Set the dtype used for new tensors and parameters."""
    global DEFAULT_DTYPE
    DEFAULT_DTYPE = np.dtype(dtype).type


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the default dtype (``float64`` for checks, ``float32`` for runs)."""
    previous = DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    """Run operations without recording them in the graph."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """n-dimensional float array taking part in a differentiation graph.

    Args:
        data: Array-like values. Copied into a contiguous array.
        requires_grad: If ``True`` the tensor is a leaf that collects a
            gradient in :attr:`grad` during :func:`backward`.
        dtype: Optional dtype; defaults to :data:`DEFAULT_DTYPE` for Python
            data and keeps the dtype of numpy input otherwise.
    """

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_counter)
        self.op = None
        self.inputs = ()
        self.ctx = None

    @classmethod
    def _from_op(cls, data, kind, inputs, ctx):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.node_id = next(_node_counter)
        if _grad_enabled and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out.op = kind
            out.inputs = inputs
            out.ctx = ctx
        else:
            out.requires_grad = False
            out.op = None
            out.inputs = ()
            out.ctx = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


class Parameter(Tensor):
    """Learnable leaf tensor."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype or DEFAULT_DTYPE)


# ---------------------------------------------------------------------------
# Operation registry
# ---------------------------------------------------------------------------

class Function:
    """One differentiable operation kind.

    Subclasses set :attr:`kind` and implement :meth:`forward` on plain
    arrays and :meth:`backward`, which maps the output gradient to one
    gradient per input (``None`` for inputs that take no gradient).
    """

    kind = ""

    @staticmethod
    def forward(ctx, *arrays, **attrs):
        raise NotImplementedError

    @staticmethod
    def backward(ctx, grad):
        raise NotImplementedError


#: Registered operations by kind name.
OPS = {}


def register(cls):
    OPS[cls.kind] = cls
    return cls


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=DEFAULT_DTYPE))


def forward_op(kind: str, *inputs, **attrs) -> Tensor:
    """Apply a registered operation and append its node to the graph.

    Raises:
        ShapeError: If the inputs do not satisfy the op's shape rule.
        NonFiniteError: If the result contains NaN or Inf.
        KeyError: If ``kind`` is not a registered op.
    """
    fn = OPS[kind]
    tensors = tuple(_as_tensor(x) for x in inputs)
    ctx = SimpleNamespace(**attrs)
    out = fn.forward(ctx, *(t.data for t in tensors), **attrs)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"op '{kind}' produced non-finite values")
    return Tensor._from_op(out, kind, tensors, ctx)


def _is_scalar(arr) -> bool:
    return arr.ndim == 0 or arr.size == 1 and arr.ndim <= 1


def _same_or_scalar(kind, a, b):
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} differ")


def _reduce_to(grad, shape):
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


@register
class Add(Function):
    kind = "add"

    @staticmethod
    def forward(ctx, a, b):
        _same_or_scalar("add", a, b)
        ctx.shapes = (a.shape, b.shape)
        return a + b

    @staticmethod
    def backward(ctx, grad):
        return _reduce_to(grad, ctx.shapes[0]), _reduce_to(grad, ctx.shapes[1])


@register
class Sub(Function):
    kind = "sub"

    @staticmethod
    def forward(ctx, a, b):
        _same_or_scalar("sub", a, b)
        ctx.shapes = (a.shape, b.shape)
        return a - b

    @staticmethod
    def backward(ctx, grad):
        return _reduce_to(grad, ctx.shapes[0]), _reduce_to(-grad, ctx.shapes[1])


@register
class Mul(Function):
    kind = "mul"

    @staticmethod
    def forward(ctx, a, b):
        _same_or_scalar("mul", a, b)
        ctx.a, ctx.b = a, b
        return a * b

    @staticmethod
    def backward(ctx, grad):
        return _reduce_to(grad * ctx.b, ctx.a.shape), _reduce_to(grad * ctx.a, ctx.b.shape)


@register
class Scale(Function):
    kind = "scale"

    @staticmethod
    def forward(ctx, x, factor=1.0):
        return x * factor

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx.factor,)


@register
class MatMul(Function):
    """``(m,k)@(k,n)``, batched ``(B,m,k)@(B,k,n)`` or shared weight ``(B,m,k)@(k,n)``."""

    kind = "matmul"

    @staticmethod
    def forward(ctx, a, b):
        ok = (
            (a.ndim == 2 and b.ndim == 2)
            or (a.ndim == 3 and b.ndim == 3 and a.shape[0] == b.shape[0])
            or (a.ndim == 3 and b.ndim == 2)
        )
        if not ok or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
        ctx.a, ctx.b = a, b
        return np.matmul(a, b)

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx.a, ctx.b
        ga = np.matmul(grad, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), grad)
        if a.ndim == 3 and b.ndim == 2:
            gb = gb.sum(axis=0)
        return ga, gb


def _im2col(xp, kh, kw, stride):
    n, c, h, w = xp.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    sn, sc, sh, sw = xp.strides
    patches = as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return patches.reshape(n, c * kh * kw, ho * wo), ho, wo


def _col2im(cols, xp_shape, kh, kw, stride, ho, wo):
    n, c, h, w = xp_shape
    out = np.zeros(xp_shape, dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return out


@register
class Conv2d(Function):
    """Direct 2-D convolution (cross-correlation) with zero padding."""

    kind = "conv2d"

    @staticmethod
    def forward(ctx, x, w, stride=1, pad=0):
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv2d: input {x.shape} does not match kernel {w.shape}")
        kh, kw = w.shape[2:]
        if x.shape[2] + 2 * pad < kh or x.shape[3] + 2 * pad < kw:
            raise ShapeError(f"conv2d: kernel {w.shape[2:]} larger than padded input {x.shape[2:]}")
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        cols, ho, wo = _im2col(xp, kh, kw, stride)
        w2 = w.reshape(w.shape[0], -1)
        ctx.cols, ctx.w2, ctx.xp_shape, ctx.wshape, ctx.ho, ctx.wo = cols, w2, xp.shape, w.shape, ho, wo
        return np.matmul(w2, cols).reshape(x.shape[0], w.shape[0], ho, wo)

    @staticmethod
    def backward(ctx, grad):
        n = grad.shape[0]
        g2 = grad.reshape(n, grad.shape[1], -1)
        gw = np.matmul(g2, np.swapaxes(ctx.cols, 1, 2)).sum(axis=0).reshape(ctx.wshape)
        dcols = np.matmul(ctx.w2.T, g2)
        kh, kw = ctx.wshape[2:]
        gxp = _col2im(dcols, ctx.xp_shape, kh, kw, ctx.stride, ctx.ho, ctx.wo)
        p = ctx.pad
        gx = gxp[:, :, p:gxp.shape[2] - p, p:gxp.shape[3] - p] if p else gxp
        return gx, gw


@register
class Upsample2x(Function):
    kind = "upsample2x"

    @staticmethod
    def forward(ctx, x):
        if x.ndim != 4:
            raise ShapeError(f"upsample2x: expected NCHW, got {x.shape}")
        return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)

    @staticmethod
    def backward(ctx, grad):
        n, c, h, w = grad.shape
        return (grad.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)),)


@register
class AvgPool2x(Function):
    kind = "avgpool2x"

    @staticmethod
    def forward(ctx, x):
        if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f"avgpool2x: need NCHW with even H and W, got {x.shape}")
        n, c, h, w = x.shape
        return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    @staticmethod
    def backward(ctx, grad):
        return (np.repeat(np.repeat(grad, 2, axis=2), 2, axis=3) * 0.25,)


@register
class GroupNorm(Function):
    kind = "group_norm"

    @staticmethod
    def forward(ctx, x, gamma, beta, groups=8, eps=1e-6):
        if x.ndim != 4 or x.shape[1] % groups or gamma.shape != (x.shape[1],) or beta.shape != gamma.shape:
            raise ShapeError(
                f"group_norm: input {x.shape}, groups {groups}, gamma {gamma.shape}, beta {beta.shape}"
            )
        n, c = x.shape[:2]
        xg = x.reshape(n, groups, -1)
        mu = xg.mean(axis=-1, keepdims=True)
        var = xg.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xg - mu) * inv
        ctx.xhat, ctx.inv, ctx.gamma = xhat, inv, gamma
        xhat = xhat.reshape(x.shape)
        return xhat * gamma[None, :, None, None] + beta[None, :, None, None]

    @staticmethod
    def backward(ctx, grad):
        n, c = grad.shape[:2]
        xhat = ctx.xhat
        ggamma = (grad * xhat.reshape(grad.shape)).sum(axis=(0, 2, 3))
        gbeta = grad.sum(axis=(0, 2, 3))
        dxhat = (grad * ctx.gamma[None, :, None, None]).reshape(xhat.shape)
        m = xhat.shape[-1]
        gx = ctx.inv / m * (
            m * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx.reshape(grad.shape), ggamma, gbeta


@register
class SiLU(Function):
    kind = "silu"

    @staticmethod
    def forward(ctx, x):
        s = expit(x)
        ctx.x, ctx.s = x, s
        return x * s

    @staticmethod
    def backward(ctx, grad):
        s = ctx.s
        return (grad * s * (1.0 + ctx.x * (1.0 - s)),)


@register
class Sigmoid(Function):
    kind = "sigmoid"

    @staticmethod
    def forward(ctx, x):
        ctx.s = expit(x)
        return ctx.s

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx.s * (1.0 - ctx.s),)


@register
class Softmax(Function):
    """Softmax over the last axis."""

    kind = "softmax"

    @staticmethod
    def forward(ctx, x):
        z = np.exp(x - x.max(axis=-1, keepdims=True))
        s = z / z.sum(axis=-1, keepdims=True)
        ctx.s = s
        return s

    @staticmethod
    def backward(ctx, grad):
        s = ctx.s
        return (s * (grad - (grad * s).sum(axis=-1, keepdims=True)),)


@register
class Log(Function):
    kind = "log"

    @staticmethod
    def forward(ctx, x):
        if np.any(x <= 0):
            raise NonFiniteError("op 'log' received non-positive input")
        ctx.x = x
        return np.log(x)

    @staticmethod
    def backward(ctx, grad):
        return (grad / ctx.x,)


@register
class Exp(Function):
    kind = "exp"

    @staticmethod
    def forward(ctx, x):
        ctx.y = np.exp(x)
        return ctx.y

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx.y,)


@register
class Abs(Function):
    kind = "abs"

    @staticmethod
    def forward(ctx, x):
        ctx.sign = np.sign(x)
        return np.abs(x)

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx.sign,)


@register
class Clamp(Function):
    kind = "clamp"

    @staticmethod
    def forward(ctx, x, lo=-np.inf, hi=np.inf):
        ctx.mask = (x >= lo) & (x <= hi)
        return np.clip(x, lo, hi)

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx.mask,)


@register
class Sum(Function):
    kind = "sum"

    @staticmethod
    def forward(ctx, x, axis=None, keepdims=False):
        ctx.shape = x.shape
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    @staticmethod
    def backward(ctx, grad):
        if ctx.axis is not None and not ctx.keepdims:
            grad = np.expand_dims(grad, ctx.axis)
        return (np.broadcast_to(grad, ctx.shape).copy(),)


@register
class Mean(Function):
    kind = "mean"

    @staticmethod
    def forward(ctx, x, axis=None, keepdims=False):
        ctx.shape = x.shape
        out = np.asarray(x.mean(axis=axis, keepdims=keepdims))
        ctx.count = x.size // max(out.size, 1) if axis is not None else x.size
        return out

    @staticmethod
    def backward(ctx, grad):
        if ctx.axis is not None and not ctx.keepdims:
            grad = np.expand_dims(grad, ctx.axis)
        return (np.broadcast_to(grad, ctx.shape) / ctx.count,)


@register
class Reshape(Function):
    kind = "reshape"

    @staticmethod
    def forward(ctx, x, shape=()):
        ctx.in_shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError as exc:
            raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc

    @staticmethod
    def backward(ctx, grad):
        return (grad.reshape(ctx.in_shape),)


@register
class Transpose(Function):
    kind = "transpose"

    @staticmethod
    def forward(ctx, x, axes=None):
        axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
        if sorted(axes) != list(range(x.ndim)):
            raise ShapeError(f"transpose: axes {axes} invalid for {x.shape}")
        ctx.axes = axes
        return np.ascontiguousarray(np.transpose(x, axes))

    @staticmethod
    def backward(ctx, grad):
        return (np.transpose(grad, np.argsort(ctx.axes)),)


@register
class Concat(Function):
    """Concatenate along an axis (channels by default)."""

    kind = "concat"

    @staticmethod
    def forward(ctx, *arrays, axis=1):
        ref = arrays[0].shape
        for arr in arrays[1:]:
            if arr.ndim != len(ref) or any(
                d1 != d2 for k, (d1, d2) in enumerate(zip(ref, arr.shape)) if k != axis
            ):
                raise ShapeError(f"concat: {ref} and {arr.shape} differ off axis {axis}")
        ctx.sizes = [arr.shape[axis] for arr in arrays]
        return np.concatenate(arrays, axis=axis)

    @staticmethod
    def backward(ctx, grad):
        cuts = np.cumsum(ctx.sizes)[:-1]
        return tuple(np.split(grad, cuts, axis=ctx.axis))


@register
class Take(Function):
    """Basic (slice) indexing."""

    kind = "slice"

    @staticmethod
    def forward(ctx, x, index=()):
        ctx.shape = x.shape
        return np.ascontiguousarray(x[index])

    @staticmethod
    def backward(ctx, grad):
        out = np.zeros(ctx.shape, dtype=grad.dtype)
        out[ctx.index] = grad
        return (out,)


@register
class Expand(Function):
    """Explicit broadcast of ``x`` to ``shape``."""

    kind = "expand"

    @staticmethod
    def forward(ctx, x, shape=()):
        if x.ndim != len(shape):
            raise ShapeError(f"expand: rank of {x.shape} differs from target {shape}")
        try:
            out = np.broadcast_to(x, shape)
        except ValueError as exc:
            raise ShapeError(f"expand: cannot broadcast {x.shape} to {shape}") from exc
        ctx.axes = tuple(k for k, (a, b) in enumerate(zip(x.shape, shape)) if a != b)
        return np.ascontiguousarray(out)

    @staticmethod
    def backward(ctx, grad):
        return (grad.sum(axis=ctx.axes, keepdims=True),)


@register
class AddBias(Function):
    """Add a per-channel bias: axis 1 for NCHW input, last axis otherwise."""

    kind = "add_bias"

    @staticmethod
    def forward(ctx, x, b):
        axis = 1 if x.ndim == 4 else x.ndim - 1
        if b.ndim != 1 or b.shape[0] != x.shape[axis]:
            raise ShapeError(f"add_bias: bias {b.shape} does not match axis {axis} of {x.shape}")
        shape = [1] * x.ndim
        shape[axis] = -1
        ctx.axis = axis
        return x + b.reshape(shape)

    @staticmethod
    def backward(ctx, grad):
        axes = tuple(k for k in range(grad.ndim) if k != ctx.axis)
        return grad, grad.sum(axis=axes)


# ---------------------------------------------------------------------------
# Functional front end
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    return forward_op("add", a, b)


def sub(a, b) -> Tensor:
    return forward_op("sub", a, b)


def mul(a, b) -> Tensor:
    return forward_op("mul", a, b)


def scale(x, factor: float) -> Tensor:
    return forward_op("scale", x, factor=float(factor))


def matmul(a, b) -> Tensor:
    return forward_op("matmul", a, b)


def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    return forward_op("conv2d", x, w, stride=int(stride), pad=int(pad))


def upsample2x(x) -> Tensor:
    return forward_op("upsample2x", x)


def avgpool2x(x) -> Tensor:
    return forward_op("avgpool2x", x)


def group_norm(x, gamma, beta, groups: int = 8, eps: float = 1e-6) -> Tensor:
    return forward_op("group_norm", x, gamma, beta, groups=int(groups), eps=float(eps))


def silu(x) -> Tensor:
    return forward_op("silu", x)


def sigmoid(x) -> Tensor:
    return forward_op("sigmoid", x)


def softmax(x) -> Tensor:
    return forward_op("softmax", x)


def log(x) -> Tensor:
    return forward_op("log", x)


def exp(x) -> Tensor:
    return forward_op("exp", x)


def absolute(x) -> Tensor:
    return forward_op("abs", x)


def clamp(x, lo: float = -np.inf, hi: float = np.inf) -> Tensor:
    return forward_op("clamp", x, lo=float(lo), hi=float(hi))


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    return forward_op("sum", x, axis=axis, keepdims=keepdims)


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    return forward_op("mean", x, axis=axis, keepdims=keepdims)


def reshape(x, shape) -> Tensor:
    return forward_op("reshape", x, shape=tuple(shape))


def transpose(x, axes=None) -> Tensor:
    return forward_op("transpose", x, axes=axes)


def concat(tensors, axis: int = 1) -> Tensor:
    return forward_op("concat", *tensors, axis=axis)


def take(x, index) -> Tensor:
    if not isinstance(index, tuple):
        index = (index,)
    return forward_op("slice", x, index=index)


def expand(x, shape) -> Tensor:
    return forward_op("expand", x, shape=tuple(shape))


def add_bias(x, b) -> Tensor:
    return forward_op("add_bias", x, b)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def graph_nodes(loss: Tensor) -> list:
    """Return every node reachable from ``loss`` in forward (creation) order."""
    seen = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node.node_id in seen:
            continue
        seen[node.node_id] = node
        stack.extend(node.inputs)
    return [seen[k] for k in sorted(seen)]


def backward(loss: Tensor, params=None) -> None:
    """Accumulate ``d loss / d leaf`` into the ``grad`` of every reachable leaf.

    Args:
        loss: Scalar tensor at the end of the graph.
        params: Optional iterable of parameters. Any of them not reachable
            from ``loss`` receives a zero gradient.

    Raises:
        GraphError: If ``loss`` is not a scalar or a rule returns a gradient
            of the wrong shape.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(graph_nodes(loss)):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node.op is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        input_grads = OPS[node.op].backward(node.ctx, g)
        for inp, ig in zip(node.inputs, input_grads):
            if ig is None or not inp.requires_grad:
                continue
            if ig.shape != inp.shape:
                raise GraphError(
                    f"op '{node.op}' returned gradient {ig.shape} for input {inp.shape}"
                )
            prev = grads.get(inp.node_id)
            grads[inp.node_id] = ig if prev is None else prev + ig
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# Modules
# ---------------------------------------------------------------------------

class Module:
    """Container of parameters and sub-modules.

    Parameters are discovered from instance attributes in assignment order,
    which makes parameter naming (and therefore checkpoints) deterministic.
    """

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for k, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{k}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{k}", item

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict, strict: bool = True) -> list:
        """Copy matching arrays into the parameters.

        Returns:
            list: Names of parameters that were not present in ``state``.

        Raises:
            ShapeError: On a shape mismatch for a present name.
            KeyError: If ``strict`` and any parameter is missing.
        """
        missing = []
        for name, p in self.named_parameters():
            if name not in state:
                missing.append(name)
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name}: checkpoint {arr.shape} vs model {p.shape}")
            p.data = arr.astype(p.dtype).copy()
        if strict and missing:
            raise KeyError(f"checkpoint lacks parameters: {missing[:5]}")
        return missing


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_parameters(path, named, meta=None) -> None:
    """Write parameters as a JSON header followed by little-endian float32 data.

    File layout: 8-byte little-endian header length, UTF-8 JSON header
    ``{"meta": {...}, "parameters": [{"name", "shape", "offset"}, ...]}``
    (offsets in bytes from the end of the header), then the raw values.
    """
    if isinstance(named, Module):
        named = named.state_dict()
    entries, blobs, offset = [], [], 0
    for name, arr in named.items():
        arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr)
        blob = arr.astype("<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta or {}, "parameters": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_parameters(path, with_meta: bool = False):
    """Read a checkpoint written by :func:`save_parameters` into float32 arrays.

    Returns:
        dict: ``name -> array``, or ``(arrays, meta)`` when ``with_meta`` is set.
    """
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    out = {}
    for entry in header["parameters"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
        out[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    if with_meta:
        return out, header.get("meta", {})
    return out


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradcheckResult:
    kind: str
    passed: bool
    max_rel_error: float
    worst_input: int = -1
    details: dict = field(default_factory=dict)


def gradcheck(fn, inputs, kind: str = "", h: float = FD_STEP, rtol: float = FD_RTOL,
              atol: float = FD_ATOL, seed: int = 0) -> GradcheckResult:
    """Compare analytic gradients of ``fn`` with central finite differences.

    ``fn`` maps tensors to a tensor of any shape; it is reduced to a scalar
    by a fixed random weighting so every output element contributes.
    Everything is evaluated in float64.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    with default_dtype(np.float64):
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        out = fn(*tensors)
        weights = np.random.default_rng(seed).standard_normal(out.shape)
        loss = reduce_sum(mul(out, Tensor(weights)))
        backward(loss, params=tensors)

        def value(arrs):
            with no_grad():
                res = fn(*(Tensor(a) for a in arrs))
            return float(np.sum(res.data * weights))

        worst, worst_idx = 0.0, -1
        for k, arr in enumerate(arrays):
            analytic = tensors[k].grad
            numeric = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                plus = [a.copy() for a in arrays]
                minus = [a.copy() for a in arrays]
                plus[k][idx] += h
                minus[k][idx] -= h
                numeric[idx] = (value(plus) - value(minus)) / (2 * h)
            excess = np.abs(analytic - numeric) - atol
            scale_ = np.maximum(np.abs(analytic), np.abs(numeric))
            rel = np.max(np.where(excess > 0, excess / np.maximum(scale_, atol), 0.0)) if arr.size else 0.0
            if rel > worst:
                worst, worst_idx = float(rel), k
    return GradcheckResult(kind=kind, passed=worst <= rtol, max_rel_error=worst, worst_input=worst_idx)


def _gradcheck_cases(rng):
    """Small random inputs for every registered op, kept away from kinks."""
    def away_from_zero(shape):
        x = rng.uniform(0.2, 1.5, size=shape)
        return x * rng.choice([-1.0, 1.0], size=shape)

    return {
        "add": (lambda a, b: add(a, b), [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]),
        "sub": (lambda a, b: sub(a, b), [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]),
        "mul": (lambda a, b: mul(a, b), [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]),
        "scale": (lambda a: scale(a, 2.5), [rng.standard_normal((2, 3))]),
        "matmul": (lambda a, b: matmul(a, b), [rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))]),
        "conv2d": (
            lambda x, w: conv2d(x, w, stride=2, pad=1),
            [rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3))],
        ),
        "upsample2x": (lambda x: upsample2x(x), [rng.standard_normal((1, 2, 3, 3))]),
        "avgpool2x": (lambda x: avgpool2x(x), [rng.standard_normal((1, 2, 4, 4))]),
        "group_norm": (
            lambda x, g, b: group_norm(x, g, b, groups=2),
            [rng.standard_normal((2, 4, 3, 3)), rng.standard_normal(4), rng.standard_normal(4)],
        ),
        "silu": (lambda x: silu(x), [rng.standard_normal((3, 4))]),
        "sigmoid": (lambda x: sigmoid(x), [rng.standard_normal((3, 4))]),
        "softmax": (lambda x: softmax(x), [rng.standard_normal((3, 5))]),
        "log": (lambda x: log(x), [rng.uniform(0.5, 2.0, size=(3, 4))]),
        "exp": (lambda x: exp(x), [rng.standard_normal((3, 4))]),
        "abs": (lambda x: absolute(x), [away_from_zero((3, 4))]),
        "clamp": (lambda x: clamp(x, -0.1, 0.1), [away_from_zero((3, 4))]),
        "sum": (lambda x: reduce_sum(x, axis=1), [rng.standard_normal((3, 4))]),
        "mean": (lambda x: reduce_mean(x, axis=0, keepdims=True), [rng.standard_normal((3, 4))]),
        "reshape": (lambda x: reshape(x, (4, 3)), [rng.standard_normal((3, 4))]),
        "transpose": (lambda x: transpose(x, (1, 2, 0)), [rng.standard_normal((2, 3, 4))]),
        "concat": (lambda a, b: concat([a, b], axis=1), [rng.standard_normal((1, 2, 3, 3)), rng.standard_normal((1, 1, 3, 3))]),
        "slice": (lambda x: take(x, (slice(None), slice(1, 3))), [rng.standard_normal((3, 4))]),
        "expand": (lambda x: expand(x, (3, 4)), [rng.standard_normal((3, 1))]),
        "add_bias": (lambda x, b: add_bias(x, b), [rng.standard_normal((2, 3, 2, 2)), rng.standard_normal(3)]),
    }


def run_gradcheck_suite(seed: int = 0) -> dict:
    """Finite-difference check of every registered op.

    Returns:
        dict: ``kind -> GradcheckResult``. Ops without a case are reported
        as failed so a newly registered op cannot slip through unchecked.
    """
    cases = _gradcheck_cases(np.random.default_rng(seed))
    results = {}
    for kind in OPS:
        if kind not in cases:
            results[kind] = GradcheckResult(kind=kind, passed=False, max_rel_error=float("inf"))
            continue
        fn, inputs = cases[kind]
        results[kind] = gradcheck(fn, inputs, kind=kind, seed=seed)
        if not results[kind].passed:
            logger.warning("gradcheck failed for op '%s' (rel err %.3g)", kind, results[kind].max_rel_error)
    return results
