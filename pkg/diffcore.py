"""
Differentiation Core
Reverse-mode automatic differentiation over dense float64 numpy arrays.

Every operation records its parents and an adjoint function. backward() walks the
graph once in reverse topological order and sums the contributions each node
receives from its consumers.
"""

from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ShapeError

ArrayLike = Union["DiffValue", np.ndarray, float, int]


class DiffValue:
    """A node of the differentiation graph"""

    # numpy must hand mixed expressions back to our operators
    __array_ufunc__ = None

    def __init__(
        self,
        data,
        parents: Tuple["DiffValue", ...] = (),
        backward_fn: Optional[Callable] = None,
        op: str = "leaf",
        requires_grad: bool = False,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad
        self._grad = None

    # ---- basic properties -------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def grad(self) -> np.ndarray:
        """Accumulated gradient (zeros when nothing flowed here)"""
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    def zero_grad(self):
        self._grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"DiffValue(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    # ---- backward ----------------------------------------------------------

    def backward(self, grad: Optional[np.ndarray] = None):
        """
        Backpropagate from this node

        Args:
            grad: upstream gradient, defaults to 1 for scalar outputs
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward (implicit seed needs a scalar)", self.shape)
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ShapeError("backward seed", grad.shape, self.shape)

        order = _topological_order(self)
        pending = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node._grad = g if node._grad is None else node._grad + g
            if node.backward_fn is None:
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # ---- operator sugar ----------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root: DiffValue) -> List[DiffValue]:
    """Iterative post-order DFS; each node appears once"""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


# ---- construction helpers -----------------------------------------------------


def lift(x: ArrayLike) -> DiffValue:
    """Wrap constants; DiffValues pass through"""
    if isinstance(x, DiffValue):
        return x
    return DiffValue(x)


def variable(x) -> DiffValue:
    """A leaf that collects gradients"""
    return DiffValue(np.array(x, dtype=np.float64), requires_grad=True)


def constant(x) -> DiffValue:
    return DiffValue(np.array(x, dtype=np.float64))


def _node(data, parents: Sequence[DiffValue], backward_fn: Callable, op: str) -> DiffValue:
    requires = any(p.requires_grad for p in parents)
    if not requires:
        return DiffValue(data, op=op)
    return DiffValue(data, tuple(parents), backward_fn, op, requires_grad=True)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`"""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: DiffValue, b: DiffValue):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---- arithmetic -----------------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> DiffValue:
    a, b = lift(a), lift(b)
    _check_broadcast("add", a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a: ArrayLike, b: ArrayLike) -> DiffValue:
    a, b = lift(a), lift(b)
    _check_broadcast("sub", a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> DiffValue:
    a, b = lift(a), lift(b)
    _check_broadcast("mul", a, b)

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), backward, "mul")


def div(a: ArrayLike, b: ArrayLike) -> DiffValue:
    a, b = lift(a), lift(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def backward(g):
        return unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)

    return _node(out, (a, b), backward, "div")


def neg(a: ArrayLike) -> DiffValue:
    a = lift(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a: ArrayLike, b: ArrayLike) -> DiffValue:
    """Batched matrix product (both operands at least 2-D)"""
    a, b = lift(a), lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else unbroadcast(ga, a.shape),
            None if gb is None else unbroadcast(gb, b.shape),
        )

    return _node(out, (a, b), backward, "matmul")


# ---- elementwise ------------------------------------------------------------------


def exp(a: ArrayLike) -> DiffValue:
    a = lift(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: ArrayLike) -> DiffValue:
    a = lift(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def expm1(a: ArrayLike) -> DiffValue:
    """exp(a) - 1, accurate for small a"""
    a = lift(a)
    return _node(np.expm1(a.data), (a,), lambda g: (g * np.exp(a.data),), "expm1")


def log1p(a: ArrayLike) -> DiffValue:
    """log(1 + a), accurate for small a"""
    a = lift(a)
    return _node(np.log1p(a.data), (a,), lambda g: (g / (1.0 + a.data),), "log1p")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(a: ArrayLike) -> DiffValue:
    a = lift(a)
    out = _sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a: ArrayLike) -> DiffValue:
    a = lift(a)
    return _node(np.logaddexp(0.0, a.data), (a,), lambda g: (g * _sigmoid(a.data),), "softplus")


def relu(a: ArrayLike) -> DiffValue:
    a = lift(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def max_with_constant(a: ArrayLike, c: float) -> DiffValue:
    """max(a, c) elementwise; gradient passes where a > c"""
    a = lift(a)
    mask = a.data > c
    return _node(np.where(mask, a.data, c), (a,), lambda g: (g * mask,), "max_with_constant")


def clip(a: ArrayLike, lo: float, hi: float) -> DiffValue:
    """Hard clamp; zero gradient outside [lo, hi]"""
    a = lift(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,), "clip")


def clamp_soft(a: ArrayLike, lo: float, hi: float, sharpness: float = 10.0) -> DiffValue:
    """Smooth clamp lo + sp(k(x-lo))/k - sp(k(x-hi))/k"""
    a = lift(a)
    k = sharpness
    out = lo + np.logaddexp(0.0, k * (a.data - lo)) / k - np.logaddexp(0.0, k * (a.data - hi)) / k

    def backward(g):
        return (g * (_sigmoid(k * (a.data - lo)) - _sigmoid(k * (a.data - hi))),)

    return _node(out, (a,), backward, "clamp_soft")


def sqrt(a: ArrayLike) -> DiffValue:
    a = lift(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def square(a: ArrayLike) -> DiffValue:
    a = lift(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def abs_(a: ArrayLike) -> DiffValue:
    a = lift(a)
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def power(a: ArrayLike, p: float) -> DiffValue:
    a = lift(a)
    p = float(p)
    out = np.power(a.data, p)
    return _node(out, (a,), lambda g: (g * p * np.power(a.data, p - 1.0),), "power")


def where(mask: np.ndarray, a: ArrayLike, b: ArrayLike) -> DiffValue:
    """Select with a constant boolean mask"""
    a, b = lift(a), lift(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)

    def backward(g):
        return unbroadcast(np.where(mask, g, 0.0), a.shape), unbroadcast(np.where(mask, 0.0, g), b.shape)

    return _node(out, (a, b), backward, "where")


def stop_gradient(a: ArrayLike) -> DiffValue:
    """Forward value, no adjoint"""
    a = lift(a)
    return DiffValue(a.data.copy(), op="stop_gradient")


# ---- reductions -------------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a: ArrayLike, axis=None, keepdims: bool = False) -> DiffValue:
    a = lift(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        return (np.array(_expand_reduced(g, a.shape, axis, keepdims)),)

    return _node(out, (a,), backward, "sum")


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> DiffValue:
    a = lift(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.data.size / max(out.size, 1) if a.data.size else 1.0

    def backward(g):
        return (np.array(_expand_reduced(g, a.shape, axis, keepdims)) / count,)

    return _node(out, (a,), backward, "mean")


def min_(a: ArrayLike, axis: int) -> DiffValue:
    """Minimum along one axis; the adjoint goes to the first minimizer"""
    a = lift(a)
    arg = np.expand_dims(np.argmin(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, arg, axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, arg, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _node(out, (a,), backward, "min")


def softmax(a: ArrayLike, axis: int = -1, temperature: float = 1.0) -> DiffValue:
    a = lift(a)
    z = a.data / temperature
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot) / temperature,)

    return _node(out, (a,), backward, "softmax")


def normalize_l2(a: ArrayLike, axis: int = -1) -> DiffValue:
    a = lift(a)
    norm = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    out = a.data / norm

    def backward(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return ((g - out * dot) / norm,)

    return _node(out, (a,), backward, "normalize_l2")


def layernorm(a: ArrayLike, axis: int = -1, eps: float = 1e-5) -> DiffValue:
    """Zero-mean unit-variance normalization (no affine part)"""
    a = lift(a)
    mu = np.mean(a.data, axis=axis, keepdims=True)
    centered = a.data - mu
    var = np.mean(centered * centered, axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = centered * inv

    def backward(g):
        g_mean = np.mean(g, axis=axis, keepdims=True)
        gy_mean = np.mean(g * out, axis=axis, keepdims=True)
        return (inv * (g - g_mean - out * gy_mean),)

    return _node(out, (a,), backward, "layernorm")


# ---- shape plumbing -----------------------------------------------------------------


def reshape(a: ArrayLike, shape) -> DiffValue:
    a = lift(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: ArrayLike, axes: Sequence[int]) -> DiffValue:
    a = lift(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def broadcast_to(a: ArrayLike, shape) -> DiffValue:
    a = lift(a)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast", a.shape, tuple(shape)) from None
    return _node(out, (a,), lambda g: (unbroadcast(g, a.shape),), "broadcast")


def _is_basic_key(key) -> bool:
    """Slices, integers, Ellipsis and None never select an element twice"""
    parts = key if isinstance(key, tuple) else (key,)
    return all(p is Ellipsis or p is None or isinstance(p, (slice, int, np.integer)) for p in parts)


def index(a: ArrayLike, key) -> DiffValue:
    """Basic or fancy indexing; the adjoint scatter-adds"""
    a = lift(a)
    out = a.data[key]
    basic = _is_basic_key(key)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _node(np.array(out), (a,), backward, "index")


def concat(values: Sequence[ArrayLike], axis: int = 0) -> DiffValue:
    values = [lift(v) for v in values]
    try:
        out = np.concatenate([v.data for v in values], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[v.shape for v in values]) from None
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, values, backward, "concat")


def stack(values: Sequence[ArrayLike], axis: int = 0) -> DiffValue:
    values = [lift(v) for v in values]
    try:
        out = np.stack([v.data for v in values], axis=axis)
    except ValueError:
        raise ShapeError("stack", *[v.shape for v in values]) from None

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(values)))

    return _node(out, values, backward, "stack")


def cross(a: ArrayLike, b: ArrayLike) -> DiffValue:
    """Cross product along the last axis"""
    a, b = lift(a), lift(b)
    if a.shape[-1] != 3 or b.shape[-1] != 3:
        raise ShapeError("cross", a.shape, b.shape)
    _check_broadcast("cross", a, b)

    def backward(g):
        return unbroadcast(np.cross(b.data, g), a.shape), unbroadcast(np.cross(g, a.data), b.shape)

    return _node(np.cross(a.data, b.data), (a, b), backward, "cross")


def custom_op(inputs: Sequence[ArrayLike], data: np.ndarray, backward_fn: Callable, op: str) -> DiffValue:
    """
    Wrap an externally computed forward value

    Args:
        inputs: parents of the new node
        data: forward value
        backward_fn: maps the upstream gradient to a tuple of parent gradients
        op: name recorded on the node
    """
    inputs = [lift(v) for v in inputs]
    return _node(data, inputs, backward_fn, op)


# readable aliases for the reductions whose names shadow builtins
sum = sum_
abs = abs_
min = min_
