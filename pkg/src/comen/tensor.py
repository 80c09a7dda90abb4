"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: tensors wrap immutable numpy arrays, every
operation returns a fresh tensor, and the node id assigned at construction
doubles as a topological index for the reverse pass (inputs are always
created before their consumers). Everything runs in 64-bit so gradient
checks can be held to tight tolerances.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from .errors import (
    DetachedTensorError,
    DomainError,
    NonScalarLossError,
    ShapeError,
)

__all__ = [
    "OP_KINDS",
    "Tensor",
    "backward",
    "concat",
    "finite_difference_check",
    "forward_op",
    "topo_order",
]

_node_ids = itertools.count()

# Op kinds accepted by forward_op(). The Tensor class exposes a few more
# primitives (reshape, clamp_min, conv2d, avg_pool2d) used by the layers.
OP_KINDS = (
    "add", "sub", "mul", "div", "matmul", "exp", "log", "sqrt", "relu",
    "leaky_relu", "softmax", "sum", "mean", "concat", "slice", "broadcast",
    "transpose",
)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


class Tensor:
    """Immutable float64 array plus the graph record that produced it."""

    __slots__ = ("data", "requires_grad", "grad", "_nid", "_op", "_parents", "_back")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)  # private copy
        self.data = _freeze(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._nid = next(_node_ids)
        self._op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._back: Callable[[np.ndarray], tuple] | None = None

    @classmethod
    def _make(cls, arr: np.ndarray, parents: tuple["Tensor", ...],
              back: Callable[[np.ndarray], tuple], op: str) -> "Tensor":
        """Wrap a freshly computed array; records the graph only when needed."""
        out = cls.__new__(cls)
        out.data = _freeze(np.ascontiguousarray(arr, dtype=np.float64))
        out.grad = None
        out._nid = next(_node_ids)
        out._op = op
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._back = back
        else:
            out.requires_grad = False
            out._parents = ()
            out._back = None
        return out

    # -- basics -----------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # -- elementwise binary ops (numpy broadcasting) -----------------------

    def _binary(self, other, fn, op, dself, dother) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        try:
            out = fn(self.data, other.data)
        except ValueError as exc:
            raise ShapeError(
                f"{op}: shapes {self.data.shape} and {other.data.shape} do not broadcast"
            ) from exc

        a, b = self, other

        def back(g):
            return (
                _unbroadcast(dself(g, a.data, b.data), a.data.shape),
                _unbroadcast(dother(g, a.data, b.data), b.data.shape),
            )

        return Tensor._make(out, (a, b), back, op)

    def __add__(self, other):
        return self._binary(other, np.add, "add",
                            lambda g, a, b: g, lambda g, a, b: g)

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        return self._binary(other, np.subtract, "sub",
                            lambda g, a, b: g, lambda g, a, b: -g)

    def __rsub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return other.__sub__(self)

    def __mul__(self, other):
        return self._binary(other, np.multiply, "mul",
                            lambda g, a, b: g * b, lambda g, a, b: g * a)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        return self._binary(other, np.divide, "div",
                            lambda g, a, b: g / b,
                            lambda g, a, b: -g * a / (b * b))

    def __rtruediv__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return other.__truediv__(self)

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    # -- matmul ------------------------------------------------------------

    def matmul(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self.data, other.data
        if a.ndim == 0 or b.ndim == 0 or a.ndim > 2 or b.ndim > 2:
            raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
        a2 = a.reshape(1, -1) if a.ndim == 1 else a
        b2 = b.reshape(-1, 1) if b.ndim == 1 else b
        if a2.shape[1] != b2.shape[0]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
        out2 = a2 @ b2
        out_shape = out2.shape
        if a.ndim == 1:
            out_shape = out_shape[1:]
        if b.ndim == 1:
            out_shape = out_shape[:-1]
        sa, sb = a.shape, b.shape

        def back(g):
            g2 = g.reshape(out2.shape)
            ga = (g2 @ b2.T).reshape(sa)
            gb = (a2.T @ g2).reshape(sb)
            return ga, gb

        return Tensor._make(out2.reshape(out_shape), (self, other), back, "matmul")

    def __matmul__(self, other):
        return self.matmul(other)

    # -- elementwise unary ops ----------------------------------------------

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        if np.any(self.data <= 0.0):
            raise DomainError(f"log: non-positive input (min {self.data.min()})")
        x = self.data
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,), "log")

    def sqrt(self) -> "Tensor":
        if np.any(self.data < 0.0):
            raise DomainError(f"sqrt: negative input (min {self.data.min()})")
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,), "sqrt")

    def relu(self) -> "Tensor":
        x = self.data
        return Tensor._make(np.maximum(x, 0.0), (self,),
                            lambda g: (g * (x > 0.0),), "relu")

    def leaky_relu(self, slope: float = 0.2) -> "Tensor":
        x = self.data
        out = np.where(x > 0.0, x, slope * x)
        return Tensor._make(out, (self,),
                            lambda g: (g * np.where(x > 0.0, 1.0, slope),), "leaky_relu")

    def clamp_min(self, bound: float) -> "Tensor":
        x = self.data
        return Tensor._make(np.maximum(x, bound), (self,),
                            lambda g: (g * (x > bound),), "clamp_min")

    def softmax(self, axis: int) -> "Tensor":
        z = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        s = e / e.sum(axis=axis, keepdims=True)

        def back(g):
            return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

        return Tensor._make(s, (self,), back, "softmax")

    # -- reductions ----------------------------------------------------------

    def _expand_reduced(self, g: np.ndarray, axis, keepdims) -> np.ndarray:
        if axis is None:
            return np.broadcast_to(g.reshape((1,) * self.data.ndim), self.data.shape)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        if not keepdims:
            for ax in sorted(ax % self.data.ndim for ax in axes):
                g = np.expand_dims(g, ax)
        return np.broadcast_to(g, self.data.shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def back(g):
            return (self._expand_reduced(g, axis, keepdims).copy(),)

        return Tensor._make(np.asarray(out), (self,), back, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = self.data.mean(axis=axis, keepdims=keepdims)
        count = self.data.size / max(out.size, 1)

        def back(g):
            return (self._expand_reduced(g, axis, keepdims) / count,)

        return Tensor._make(np.asarray(out), (self,), back, "mean")

    # -- shape ops -------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        # views are safe to share: tensor data is immutable
        out = self.data.reshape(shape)
        return Tensor._make(out, (self,), lambda g: (g.reshape(old),), "reshape")

    def transpose(self, axes: Sequence[int] | None = None) -> "Tensor":
        out = np.transpose(self.data, axes)
        if axes is None:
            inv = None
        else:
            inv = tuple(np.argsort(axes))

        def back(g):
            return (np.ascontiguousarray(np.transpose(g, inv)),)

        return Tensor._make(out, (self,), back, "transpose")

    def broadcast_to(self, shape) -> "Tensor":
        shape = tuple(shape)
        try:
            out = np.broadcast_to(self.data, shape)
        except ValueError as exc:
            raise ShapeError(f"broadcast: {self.data.shape} to {shape}") from exc
        old = self.data.shape
        return Tensor._make(out.copy(), (self,),
                            lambda g: (_unbroadcast(g, old),), "broadcast")

    def __getitem__(self, index) -> "Tensor":
        _check_basic_index(index)
        out = self.data[index]
        src_shape = self.data.shape

        def back(g):
            gx = np.zeros(src_shape)
            gx[index] = g
            return (gx,)

        return Tensor._make(np.array(out), (self,), back, "slice")

    # -- structured ops for the encoder ----------------------------------------

    def conv2d(self, weight: "Tensor", bias: "Tensor | None", padding: int = 1) -> "Tensor":
        x = self.data
        if x.ndim != 4 or weight.data.ndim != 4:
            raise ShapeError(f"conv2d: need NCHW input and FCKK weight, got {x.shape} and {weight.data.shape}")
        B, C, H, W = x.shape
        F, Cw, kh, kw = weight.data.shape
        if Cw != C:
            raise ShapeError(f"conv2d: input channels {C} != weight channels {Cw}")
        p = padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        Ho, Wo = H + 2 * p - kh + 1, W + 2 * p - kw + 1
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        col = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
        wm = weight.data.reshape(F, C * kh * kw)
        out2 = col @ wm.T
        if bias is not None:
            out2 = out2 + bias.data
        out = out2.reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2)

        def back(g):
            g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, F)
            gw = (g2.T @ col).reshape(F, C, kh, kw)
            gcol = (g2 @ wm).reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + Ho, j:j + Wo] += gcol[:, :, :, :, i, j]
            gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
            grads = [gx.copy() if p else gx, gw]
            if bias is not None:
                grads.append(g2.sum(axis=0))
            return tuple(grads)

        parents = (self, weight) if bias is None else (self, weight, bias)
        return Tensor._make(out, parents, back, "conv2d")

    def avg_pool2d(self, k: int = 2) -> "Tensor":
        x = self.data
        if x.ndim != 4:
            raise ShapeError(f"avg_pool2d: need NCHW input, got {x.shape}")
        B, C, H, W = x.shape
        if H % k or W % k:
            raise ShapeError(f"avg_pool2d: spatial dims {H}x{W} not divisible by {k}")
        out = x.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5))

        def back(g):
            gx = np.broadcast_to(
                g[:, :, :, None, :, None] / (k * k), (B, C, H // k, k, W // k, k)
            )
            return (gx.reshape(B, C, H, W).copy(),)

        return Tensor._make(out, (self,), back, "avg_pool2d")


def _check_basic_index(index) -> None:
    parts = index if isinstance(index, tuple) else (index,)
    for part in parts:
        if not isinstance(part, (int, np.integer, slice)) and part is not Ellipsis:
            raise ShapeError(f"slice: only basic indexing is supported, got {part!r}")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate tensors along `axis`."""
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(
            f"concat: shapes {[t.data.shape for t in tensors]} on axis {axis}"
        ) from exc
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for i in range(len(sizes)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(slicer)].copy())
        return tuple(grads)

    return Tensor._make(out, tuple(tensors), back, "concat")


def forward_op(kind: str, inputs: Sequence[Tensor], **params) -> Tensor:
    """Uniform dispatch over the supported op kinds."""
    if kind == "add":
        return inputs[0] + inputs[1]
    if kind == "sub":
        return inputs[0] - inputs[1]
    if kind == "mul":
        return inputs[0] * inputs[1]
    if kind == "div":
        return inputs[0] / inputs[1]
    if kind == "matmul":
        return inputs[0].matmul(inputs[1])
    if kind == "exp":
        return inputs[0].exp()
    if kind == "log":
        return inputs[0].log()
    if kind == "sqrt":
        return inputs[0].sqrt()
    if kind == "relu":
        return inputs[0].relu()
    if kind == "leaky_relu":
        return inputs[0].leaky_relu(params.get("slope", 0.2))
    if kind == "softmax":
        return inputs[0].softmax(params["axis"])
    if kind == "sum":
        return inputs[0].sum(params.get("axis"), params.get("keepdims", False))
    if kind == "mean":
        return inputs[0].mean(params.get("axis"), params.get("keepdims", False))
    if kind == "concat":
        return concat(list(inputs), params.get("axis", 0))
    if kind == "slice":
        return inputs[0][params["index"]]
    if kind == "broadcast":
        return inputs[0].broadcast_to(params["shape"])
    if kind == "transpose":
        return inputs[0].transpose(params.get("axes"))
    raise ValueError(f"unknown op kind {kind!r}")


def backward(loss: Tensor) -> None:
    """Populate .grad with d(loss)/d(node) for every grad-requiring node."""
    if loss.data.size != 1:
        raise NonScalarLossError(f"backward: loss has shape {loss.data.shape}")
    if not loss.requires_grad:
        raise DetachedTensorError("backward: tensor carries no recorded graph")

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._nid in nodes:
            continue
        nodes[t._nid] = t
        for p in t._parents:
            if p.requires_grad and p._nid not in nodes:
                stack.append(p)

    grads: dict[int, np.ndarray] = {loss._nid: np.ones_like(loss.data)}
    for t in sorted(nodes.values(), key=lambda n: n._nid, reverse=True):
        g = grads.pop(t._nid, None)
        if g is None:
            continue
        t.grad = g
        if t._back is None:
            continue
        parent_grads = t._back(g)
        for p, pg in zip(t._parents, parent_grads):
            if not p.requires_grad:
                continue
            acc = grads.get(p._nid)
            grads[p._nid] = pg if acc is None else acc + pg


def topo_order(root: Tensor) -> list[tuple[int, str, tuple[int, ...]]]:
    """Operation records (node id, op kind, parent ids) reachable from `root`,
    in topological order."""
    nodes: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t._nid in nodes:
            continue
        nodes[t._nid] = t
        stack.extend(t._parents)
    return [(t._nid, t._op, tuple(p._nid for p in t._parents))
            for t in sorted(nodes.values(), key=lambda n: n._nid)]


def finite_difference_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Max relative gap between the analytic gradient of `fn` at `point` and
    central finite differences.

    Returns max over coordinates of |analytic - fd| / max(1, |analytic|).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base_data = point.data if isinstance(point, Tensor) else np.asarray(point, dtype=np.float64)
    base = Tensor(base_data, requires_grad=True)
    out = fn(base)
    if out.data.size != 1:
        raise NonScalarLossError(f"finite_difference_check: fn returned shape {out.data.shape}")
    if out.requires_grad:
        backward(out)
        analytic = base.grad if base.grad is not None else np.zeros_like(base.data)
    else:
        analytic = np.zeros_like(base.data)

    flat = base_data.ravel()
    fd = np.empty_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + step
        f_plus = fn(Tensor(bumped.reshape(base_data.shape))).item()
        bumped[i] = flat[i] - step
        f_minus = fn(Tensor(bumped.reshape(base_data.shape))).item()
        fd[i] = (f_plus - f_minus) / (2.0 * step)

    a = analytic.ravel()
    if a.size == 0:
        return 0.0
    rel = np.abs(a - fd) / np.maximum(1.0, np.abs(a))
    return float(rel.max())
