"""Dense float tensors with tape-based reverse-mode differentiation.

Every differentiable operation is a plain function that computes its forward
result with numpy and records a backward closure on the output tensor.
``backward`` linearises the recorded graph into a tape (topological order),
walks it once in reverse and accumulates gradients on leaf tensors.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence, Tuple

import numpy as np

DEFAULT_DTYPE = np.float32

_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""

    def __init__(self, op: str, phase: str = "forward"):
        super().__init__(f"non-finite values in {phase} of '{op}'")
        self.op = op
        self.phase = phase


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording for the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class _Node:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op: str, parents: Tuple["Tensor", ...], backward: Callable):
        self.op = op
        self.parents = parents
        self.backward = backward


class Tensor:
    """N-dimensional float array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def tensor_create(shape: Sequence[int], fill: Optional[float] = None, values=None,
                  requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    """Build a tensor of ``shape`` from a constant fill or a flat value list."""
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ShapeError(f"extents must be >= 1, got {shape}")
    if values is not None:
        flat = np.asarray(values, dtype=dtype).reshape(-1)
        if flat.size != int(np.prod(shape)):
            raise ShapeError(f"{flat.size} values cannot fill shape {shape}")
        data = flat.reshape(shape).copy()
    else:
        data = np.full(shape, 0.0 if fill is None else fill, dtype=dtype)
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _check_finite(arr: np.ndarray, op: str, phase: str = "forward") -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(op, phase)


def make_result(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: Callable,
                op: str) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and record the backward closure.

    ``backward_fn(grad_out)`` returns one gradient array (or None) per parent.
    """
    _check_finite(data, op)
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(op, parents, backward_fn)
    return out


def build_tape(root: Tensor) -> list:
    """Return the non-leaf tensors reachable from ``root`` in topological order."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if t._node is None:
            continue
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t._node.parents:
            if p._node is not None and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss._node is None:
        g = np.ones_like(loss.data)
        loss.grad = g if loss.grad is None else loss.grad + g
        return
    tape = build_tape(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        parent_grads = node.backward(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            _check_finite(pg, node.op, "backward")
            if pg.shape != p.shape:
                raise ShapeError(f"'{node.op}' produced gradient {pg.shape} for input {p.shape}")
            if p._node is None:
                p.grad = pg.copy() if p.grad is None else p.grad + pg
            else:
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
    if not retain_graph:
        for t in tape:
            t._node = None


# ---------------------------------------------------------------- elementwise

def _broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    # Only same-rank broadcasting of size-1 axes (per-channel / per-position masks).
    if a == b:
        return a
    if len(a) != len(b):
        raise ShapeError(f"incompatible shapes {a} and {b}")
    out = []
    for x, y in zip(a, b):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"incompatible shapes {a} and {b}")
        out.append(max(x, y))
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_result(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # Branch on sign so exp never overflows.
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return make_result(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def elementwise(op: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    binary = {"add": add, "sub": sub, "mul": mul}
    unary = {"relu": relu, "sigmoid": sigmoid}
    if op in binary:
        if b is None:
            raise ShapeError(f"'{op}' needs two operands")
        return binary[op](a, b)
    if op in unary:
        return unary[op](a)
    raise ValueError(f"unknown elementwise op '{op}'")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return make_result(a.data @ b.data, (a, b), bw, "matmul")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_result(s, (a,), bw, "softmax")


# ---------------------------------------------------------------- shape & reductions

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                       lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def gather(a: Tensor, index) -> Tensor:
    """Select rows of ``a`` along axis 0 (duplicates allowed)."""
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return make_result(a.data[index], (a,), bw, "gather")


def sum_all(a: Tensor) -> Tensor:
    return make_result(a.data.sum(keepdims=True).reshape(1), (a,),
                       lambda g: (np.broadcast_to(g.reshape(()), a.shape).copy(),), "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    return make_result((a.data.sum() / n).reshape(1).astype(a.dtype), (a,),
                       lambda g: (np.full(a.shape, g.reshape(()) / n, dtype=a.dtype),), "mean")


def mean_axes(a: Tensor, axes: Tuple[int, ...]) -> Tensor:
    """Mean over ``axes`` keeping them as size-1 dimensions."""
    n = int(np.prod([a.shape[i] for i in axes]))
    out = a.data.mean(axis=axes, keepdims=True)

    def bw(g):
        return (np.broadcast_to(g / n, a.shape).astype(a.dtype),)

    return make_result(out, (a,), bw, "mean_axes")


def max_axes(a: Tensor, axes: Tuple[int, ...]) -> Tensor:
    """Max over ``axes`` keeping dims; ties route gradient to the first index."""
    axes = tuple(sorted(axes))
    keep = [i for i in range(a.ndim) if i not in axes]
    perm = keep + list(axes)
    moved = a.data.transpose(perm)
    flat = moved.reshape(moved.shape[:len(keep)] + (-1,))
    arg = flat.argmax(axis=-1)
    out_shape = tuple(1 if i in axes else a.shape[i] for i in range(a.ndim))
    out = np.take_along_axis(flat, arg[..., None], axis=-1).reshape(out_shape)

    def bw(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, arg[..., None], g.reshape(arg.shape + (1,)), axis=-1)
        return (gf.reshape(moved.shape).transpose(np.argsort(perm)),)

    return make_result(out, (a,), bw, "max_axes")


# ---------------------------------------------------------------- gradient checking

def numeric_grad(f: Callable[[], Tensor], x: Tensor, h: float, coords: Iterable[int]) -> dict:
    flat = x.data.reshape(-1)
    out = {}
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data.sum())
            flat[i] = orig - h
            fm = float(f().data.sum())
            flat[i] = orig
            out[i] = (fp - fm) / (2 * h)
    return out


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, params: Sequence[Tensor] = (),
               h: float = 1e-5, max_coords: Optional[int] = None, seed: int = 0) -> float:
    """Largest relative disagreement between analytic and central-difference gradients.

    ``f`` maps ``x`` to a tensor of any shape; it is reduced to a scalar by a
    fixed random projection. Inputs near ReLU kinks are nudged by 0.1 first.
    ``params`` are extra leaves (e.g. module weights) checked alongside ``x``.
    ``max_coords`` caps the number of probed coordinates per tensor.
    """
    rng = np.random.default_rng(seed)
    near = np.abs(x.data) < 1e-3
    if near.any():
        x.data[near] += np.where(rng.random(near.sum()) < 0.5, -0.1, 0.1).astype(x.dtype)
    leaves = [x] + list(params)
    with no_grad():
        proj = rng.standard_normal(f(x).shape).astype(x.dtype)
    proj_t = Tensor(proj)

    def objective() -> Tensor:
        return sum_all(mul(f(x), proj_t))

    saved = [(t.requires_grad, t.grad) for t in leaves]
    for t in leaves:
        t.requires_grad = True
        t.grad = None
    objective().backward()
    worst = 0.0
    for t in leaves:
        analytic = t.grad.reshape(-1) if t.grad is not None else np.zeros(t.size)
        coords = range(t.size)
        if max_coords is not None and t.size > max_coords:
            coords = rng.choice(t.size, size=max_coords, replace=False)
        numeric = numeric_grad(objective, t, h, coords)
        for i, n in numeric.items():
            a = float(analytic[i])
            worst = max(worst, abs(a - n) / max(1.0, abs(a), abs(n)))
    for t, (rg, g) in zip(leaves, saved):
        t.requires_grad, t.grad = rg, g
    return worst
