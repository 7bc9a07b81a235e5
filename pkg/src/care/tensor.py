"""Dense tensors with reverse-mode automatic differentiation.

Every primitive runs its forward pass eagerly on a numpy array and, when any
operand requires a gradient, records a graph node holding the closure that
maps the upstream gradient to operand gradients. ``Tensor.backward`` walks the
recorded graph in reverse topological order exactly once.
"""

from __future__ import annotations

import contextlib
import logging
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32

# largest float32 strictly below 1 and smallest positive normal float32
_SIGMOID_HI = float(np.nextafter(np.float32(1.0), np.float32(0.0)))
_SIGMOID_LO = float(np.finfo(np.float32).tiny)


class ShapeError(ValueError):
    """Operand shapes do not conform to the primitive."""


class NumericError(ArithmeticError):
    """A primitive produced NaN or Inf."""


class TapeError(RuntimeError):
    """Backward called on a non-scalar, detached, or already consumed graph."""


ArrayLike = Union[np.ndarray, float, int, Sequence]
Scalar = Union[float, int]


class _Node:
    __slots__ = ("kind", "parents", "backward_fn", "consumed")

    def __init__(self, kind: str, parents: Tuple["Tensor", ...], backward_fn: Callable):
        self.kind = kind
        self.parents = parents
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    """An N-dimensional float array that can participate in autodiff.

    Tensors are treated as immutable; only the optimizer replaces the array of
    a parameter between steps.
    """

    __slots__ = ("data", "requires_grad", "_node", "name")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype=None,
        name: Optional[str] = None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self._node: Optional[_Node] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operators -----------------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(scalar_mul(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def square(self):
        return square(self)

    def abs(self):
        return absolute(self)

    def mean(self, axis=None):
        return mean(self, axis=axis)

    def sum(self, axis=None):
        return tensor_sum(self, axis=axis)

    def clamp(self, lo: float, hi: float):
        return clamp(self, lo, hi)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> "GradMap":
        return backward(self)


GradMap = Dict[Tensor, Tensor]


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(kind: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{kind}: non-finite value in result (numeric overflow or NaN)")


def _make(kind: str, out: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    _check_finite(kind, out)
    result = Tensor(out, dtype=out.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        result.requires_grad = True
        result._node = _Node(kind, parents, backward_fn)
    return result


def _elementwise_shapes(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    # only scalar broadcasting is supported
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum(dtype=np.float64), dtype=grad.dtype).reshape(shape)


# elementwise ---------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _elementwise_shapes("add", a, b)

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _elementwise_shapes("sub", a, b)

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _elementwise_shapes("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return _reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)

    return _make("mul", ad * bd, (a, b), bw)


def scalar_mul(a: Tensor, k: Scalar) -> Tensor:
    k = float(k)
    return _make("scalar-mul", a.data * a.data.dtype.type(k), (a,), lambda g: (g * g.dtype.type(k),))


def add_scalar(a: Tensor, k: Scalar) -> Tensor:
    k = float(k)
    return _make("add-scalar", a.data + a.data.dtype.type(k), (a,), lambda g: (g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    s = (0.5 * (1.0 + np.tanh(0.5 * x))).astype(x.dtype)
    if x.dtype == np.float32:
        # keep outputs in the open interval (0, 1) after float32 saturation
        s = np.clip(s, _SIGMOID_LO, _SIGMOID_HI).astype(x.dtype)
    return _make("sigmoid", s, (a,), lambda g: (g * s * (1 - s),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return _make("exp", e, (a,), lambda g: (g * e,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _make("square", x * x, (a,), lambda g: (g * 2 * x,))


def absolute(a: Tensor) -> Tensor:
    x = a.data
    return _make("abs", np.abs(x), (a,), lambda g: (g * np.sign(x),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    if lo > hi:
        raise ValueError(f"clamp: lo={lo} exceeds hi={hi}")
    x = a.data
    inside = (x >= lo) & (x <= hi)
    out = np.clip(x, lo, hi).astype(x.dtype)
    return _make("clamp", out, (a,), lambda g: (g * inside,))


# reductions and shape ops -------------------------------------------------

def _normalize_axis(axis, ndim: int) -> Optional[Tuple[int, ...]]:
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(ax % ndim for ax in axes)


def tensor_sum(a: Tensor, axis=None) -> Tensor:
    axes = _normalize_axis(axis, a.ndim)
    out = np.asarray(a.data.sum(axis=axes, dtype=np.float64), dtype=a.dtype)
    shape = a.shape

    def bw(g):
        if axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).astype(g.dtype),)

    return _make("sum", out, (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _normalize_axis(axis, a.ndim)
    count = a.data.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))
    if count == 0:
        raise ShapeError(f"mean: empty reduction over shape {a.shape}")
    out = np.asarray(a.data.mean(axis=axes, dtype=np.float64), dtype=a.dtype)
    shape = a.shape

    def bw(g):
        if axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / g.dtype.type(count), shape).astype(g.dtype),)

    return _make("mean", out, (a,), bw)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from exc
    src = a.shape
    return _make("reshape", out, (a,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: no operands")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make("concat", out, tensors, bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return _make("matmul", ad @ bd, (a, b), bw)


# spatial ops ---------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation of ``x`` (B, C, H, W) with ``weight`` (O, C, k, k)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if C != Cw or kh != kw:
        raise ShapeError(f"conv2d: input {x.shape} does not match kernel {weight.shape}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match kernel {weight.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} padding={padding}")
    k = kh
    Ho = conv_output_size(H, k, stride, padding)
    Wo = conv_output_size(W, k, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: kernel {weight.shape} larger than padded input {x.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(B, C * k * k, Ho * Wo)
    wmat = weight.data.reshape(O, C * k * k)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = out.reshape(B, O, Ho, Wo)

    def bw(g):
        g2 = g.reshape(B, O, Ho * Wo)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape).astype(g.dtype)
        dcols = np.matmul(wmat.T, g2).reshape(B, C, k, k, Ho, Wo)
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[:, :, i, j]
        gx = dxp[:, :, padding : padding + H, padding : padding + W]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make("conv2d", out, parents, bw)


def maxpool2x(x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool2x: expected 4-D input with even spatial extents, got {x.shape}")
    B, C, H, W = x.shape
    blocks = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        return (gb.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W),)

    return _make("maxpool2x", out, (x,), bw)


def upsample2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"upsample2x: expected 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bw(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _make("upsample2x", out, (x,), bw)


# dispatch ------------------------------------------------------------------

PRIMITIVES: Dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar-mul": scalar_mul,
    "add-scalar": add_scalar,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "sigmoid": sigmoid,
    "exp": exp,
    "mean": mean,
    "sum": tensor_sum,
    "square": square,
    "abs": absolute,
    "concat": lambda *ts, axis=1: concat(ts, axis=axis),
    "upsample2x": upsample2x,
    "maxpool2x": maxpool2x,
    "clamp": clamp,
    "reshape": reshape,
}


def apply_primitive(kind: str, operands: Sequence, attrs: Optional[dict] = None) -> Tensor:
    """Apply primitive ``kind`` by name, e.g. ``apply_primitive("conv2d", [x, w], {"padding": 1})``."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*operands, **(attrs or {}))


# backward ------------------------------------------------------------------

def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in reversed(t._node.parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(output: Tensor) -> GradMap:
    """Gradients of scalar ``output`` w.r.t. every reachable leaf requiring grad.

    The graph is consumed: calling backward again through any of its nodes
    raises ``TapeError``.
    """
    if output.ndim != 0:
        raise TapeError(f"backward: output must be a scalar, got shape {output.shape}")
    if output._node is None:
        raise TapeError("backward: output is not on a live tape (no recorded operations)")
    order = _topological_order(output)
    for t in order:
        if t._node is not None and t._node.consumed:
            raise TapeError(f"backward: tape already consumed at {t._node.kind!r}")

    grads: Dict[int, np.ndarray] = {id(output): np.ones((), dtype=output.dtype)}
    leaves: GradMap = {}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        node = t._node
        if node is None:
            if g is None:
                g = np.zeros(t.shape, dtype=t.dtype)
            leaves[t] = Tensor(g, dtype=t.dtype)
            continue
        node.consumed = True
        if g is None:
            continue
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            pg = np.asarray(pg, dtype=p.dtype)
            if pg.shape != p.shape:
                raise ShapeError(f"{node.kind}: gradient shape {pg.shape} != operand shape {p.shape}")
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
        node.backward_fn = None
    return leaves


# optimizer -----------------------------------------------------------------

def sgd_step(
    params: Iterable[Tensor],
    grads: GradMap,
    lr: float,
    momentum: float = 0.0,
    buffers: Optional[Dict[int, np.ndarray]] = None,
) -> None:
    """In-place momentum SGD: ``v <- momentum*v + g``, ``p <- p - lr*v``.

    ``buffers`` holds velocity per parameter and persists across calls.
    """
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    params = list(params)
    if buffers is None:
        buffers = {}
    updates = []
    for p in params:
        g = grads.get(p)
        if g is None:
            raise KeyError(f"sgd_step: missing gradient for parameter {p.name or p!r}")
        v = buffers.get(id(p))
        gd = g.data.astype(p.dtype)
        v = gd if v is None or momentum == 0.0 else p.dtype.type(momentum) * v + gd
        with np.errstate(over="ignore", invalid="ignore"):
            new = p.data - p.dtype.type(lr) * v
        _check_finite(f"sgd_step[{p.name}]", new)
        updates.append((p, v, new))
    for p, v, new in updates:
        buffers[id(p)] = v
        p.data = new


class SGD:
    """Stateful momentum SGD over a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.buffers: Dict[int, np.ndarray] = {}

    def step(self, grads: GradMap) -> None:
        sgd_step(self.params, grads, self.lr, self.momentum, self.buffers)
