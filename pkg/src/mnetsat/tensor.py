"""Dense tensors with tape-based reverse-mode automatic differentiation.

Feature maps use the N x H x W x C layout throughout. Operations are
``Function`` subclasses; when a :class:`Tape` is active on the current thread
and any input requires a gradient, the operation is appended to the tape.
Outside a tape nothing is recorded, which doubles as inference mode.
"""

from __future__ import annotations

import contextlib
import os
import threading
import weakref
from typing import Any, Iterable, Optional, Sequence, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]

_local = threading.local()
_default_dtype = np.float32
_check_finite = os.environ.get("MNETSAT_CHECK_FINITE", "0") not in ("", "0", "false")


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


def set_check_finite(enabled: bool) -> None:
    """Toggle the NaN/Inf guard run after every forward and backward op."""
    global _check_finite
    _check_finite = bool(enabled)


def check_finite_enabled() -> bool:
    return _check_finite


def default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    _default_dtype = np.dtype(dtype).type


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily switch the default float type (32 or 64 bit)."""
    if bits not in (32, 64):
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    old = _default_dtype
    set_default_dtype(np.float64 if bits == 64 else np.float32)
    try:
        yield
    finally:
        set_default_dtype(old)


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Append-only record of differentiable operations.

    Nodes are stored in execution order, so the list is already topologically
    sorted. Use as a context manager around the forward pass, then call
    :meth:`backward` on a scalar result.
    """

    def __init__(self):
        self.nodes: list[Function] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, fn: "Function") -> int:
        self.nodes.append(fn)
        return len(self.nodes) - 1

    def backward(self, root: "Tensor") -> dict["Tensor", np.ndarray]:
        return backward(root, self)

    def clear(self) -> None:
        self.nodes.clear()


class Tensor:
    """N-dimensional float array with optional gradient tracking."""

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _default_dtype
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        # (weakref to tape, node index); weak so tapes are freed without gc
        self._node: Optional[tuple[weakref.ref, int]] = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -----------------------------------------------------
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
        return Neg.apply(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)


def as_tensor(x: Any, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _ensure_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {where}")


class Function:
    """Base class for differentiable operations.

    ``forward`` receives raw arrays and keyword options and may stash whatever
    it needs on ``self``; ``backward`` receives the output gradient and returns
    one gradient (or None) per input.
    """

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        like = next((t for t in inputs if isinstance(t, Tensor)), None)
        tensors = tuple(as_tensor(t, like) for t in inputs)
        fn = cls(*tensors)
        out = Tensor(fn.forward(*(t.data for t in tensors), **kwargs))
        if _check_finite:
            _ensure_finite(out.data, cls.__name__)
        tape = current_tape()
        if tape is not None and any(t.requires_grad for t in tensors):
            out.requires_grad = True
            out._node = (weakref.ref(tape), tape.record(fn))
        return out


def backward(root: Tensor, tape: Optional[Tape] = None) -> dict[Tensor, np.ndarray]:
    """Propagate d(root)/d(leaf) to every gradient-requiring leaf.

    Leaf gradients are accumulated into ``leaf.grad`` and also returned as a
    mapping keyed by the leaf tensors.
    """
    if root.size != 1:
        raise TapeError(f"backward needs a scalar root, got shape {root.shape}")
    if root._node is None:
        raise TapeError("root was not recorded on any tape")
    root_tape, root_idx = root._node[0](), root._node[1]
    if root_tape is None:
        raise TapeError("the tape that recorded root has been released")
    if tape is None:
        tape = root_tape
    if root_tape is not tape:
        raise TapeError("root was recorded on a different tape")

    node_grads: dict[int, np.ndarray] = {root_idx: np.ones(root.shape, dtype=root.dtype)}
    leaf_grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    for idx in range(root_idx, -1, -1):
        grad = node_grads.pop(idx, None)
        if grad is None:
            continue
        fn = tape.nodes[idx]
        in_grads = fn.backward(grad)
        for inp, g in zip(fn.inputs, in_grads):
            if g is None or not inp.requires_grad:
                continue
            if g.shape != inp.shape:
                raise ShapeError(f"{type(fn).__name__} produced gradient of shape {g.shape} for input {inp.shape}")
            if _check_finite:
                _ensure_finite(g, f"{type(fn).__name__}.backward")
            if inp._node is None:
                key = id(inp)
                leaves[key] = inp
                leaf_grads[key] = g if key not in leaf_grads else leaf_grads[key] + g
            else:
                if inp._node[0]() is not tape:
                    raise TapeError("graph spans multiple tapes")
                j = inp._node[1]
                node_grads[j] = g if j not in node_grads else node_grads[j] + g

    result = {}
    for key, g in leaf_grads.items():
        leaf = leaves[key]
        g = g.astype(leaf.dtype, copy=False)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    return result


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over axes that were broadcast to reach its shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"shapes {a} and {b} are not broadcast-compatible") from None


# -- elementwise ---------------------------------------------------------

class Add(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        return a + b

    def backward(self, g):
        a, b = self.inputs
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)


class Sub(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        return a - b

    def backward(self, g):
        a, b = self.inputs
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)


class Mul(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        return a * b

    def backward(self, g):
        a, b = self.inputs
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb


class Div(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        return a / b

    def backward(self, g):
        a, b = self.inputs
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return (g * self.out,)


class Log(Function):
    def forward(self, a):
        # domain errors are reported by the finite guard, not as warnings
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(a)

    def backward(self, g):
        return (g / self.inputs[0].data,)


class Sqrt(Function):
    def forward(self, a):
        self.out = np.sqrt(a)
        return self.out

    def backward(self, g):
        return (g * 0.5 / self.out,)


class Relu(Function):
    def forward(self, a):
        self.mask = a > 0
        return a * self.mask

    def backward(self, g):
        return (g * self.mask,)


class Sigmoid(Function):
    def forward(self, a):
        self.out = 0.5 * (1.0 + np.tanh(0.5 * a))
        return self.out

    def backward(self, g):
        return (g * self.out * (1.0 - self.out),)


class Clip(Function):
    def forward(self, a, lo, hi):
        self.mask = (a >= lo) & (a <= hi)
        return np.clip(a, lo, hi)

    def backward(self, g):
        return (g * self.mask,)


class Softmax(Function):
    def forward(self, a, axis=-1):
        self.axis = axis
        e = np.exp(a - a.max(axis=axis, keepdims=True))
        self.out = e / e.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, g):
        y = self.out
        return (y * (g - (g * y).sum(axis=self.axis, keepdims=True)),)


def _binary(cls, a, b):
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    return cls.apply(as_tensor(a, like), as_tensor(b, like))


def add(a, b) -> Tensor:
    return _binary(Add, a, b)


def sub(a, b) -> Tensor:
    return _binary(Sub, a, b)


def mul(a, b) -> Tensor:
    return _binary(Mul, a, b)


def div(a, b) -> Tensor:
    return _binary(Div, a, b)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a, b) -> Tensor:
    """Binary elementwise op with numpy broadcasting; op in {add, sub, mul}."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


def exp(x: Tensor) -> Tensor:
    return Exp.apply(x)


def log(x: Tensor) -> Tensor:
    return Log.apply(x)


def sqrt(x: Tensor) -> Tensor:
    return Sqrt.apply(x)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _normalize_axes(axis, x.ndim)
    return Softmax.apply(x, axis=axis)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    return Clip.apply(x, lo=lo, hi=hi)


# -- linear algebra ------------------------------------------------------

class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
        return np.matmul(a, b)

    def backward(self, g):
        a, b = self.inputs
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb


def matmul(a, b) -> Tensor:
    return _binary(MatMul, a, b)


# -- reductions ----------------------------------------------------------

def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {tuple(axes)}")
    return tuple(sorted(out))


def _kept_shape(shape, axes):
    return tuple(1 if i in axes else n for i, n in enumerate(shape))


class Sum(Function):
    def forward(self, a, axes, keepdims):
        self.axes = axes
        return a.sum(axis=axes, keepdims=keepdims)

    def backward(self, g):
        x = self.inputs[0]
        g = g.reshape(_kept_shape(x.shape, self.axes))
        return (np.broadcast_to(g, x.shape).copy(),)


class Mean(Function):
    def forward(self, a, axes, keepdims):
        self.axes = axes
        self.count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
        return a.mean(axis=axes, keepdims=keepdims)

    def backward(self, g):
        x = self.inputs[0]
        g = g.reshape(_kept_shape(x.shape, self.axes)) / self.count
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)


class Max(Function):
    def forward(self, a, axes, keepdims):
        self.axes = axes
        rest = [i for i in range(a.ndim) if i not in axes]
        moved = np.transpose(a, rest + list(axes))
        flat = moved.reshape(moved.shape[: len(rest)] + (-1,))
        idx = flat.argmax(axis=-1)
        onehot = np.zeros_like(flat)
        np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
        self.mask = np.transpose(onehot.reshape(moved.shape), np.argsort(rest + list(axes)))
        return a.max(axis=axes, keepdims=keepdims)

    def backward(self, g):
        x = self.inputs[0]
        g = g.reshape(_kept_shape(x.shape, self.axes))
        return (self.mask * g,)


_REDUCERS = {"sum": Sum, "mean": Mean, "max": Max}


def reduce(op: str, x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Reduce over ``axes`` (all axes when None) with op in {sum, mean, max}."""
    try:
        cls = _REDUCERS[op]
    except KeyError:
        raise ValueError(f"unknown reduction {op!r}") from None
    x = as_tensor(x)
    return cls.apply(x, axes=_normalize_axes(axes, x.ndim), keepdims=keepdims)


# -- shape manipulation --------------------------------------------------

class Reshape(Function):
    def forward(self, a, shape):
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None

    def backward(self, g):
        return (g.reshape(self.inputs[0].shape),)


class Transpose(Function):
    def forward(self, a, axes):
        self.axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
        return np.transpose(a, self.axes)

    def backward(self, g):
        return (np.transpose(g, np.argsort(self.axes)),)


class Concat(Function):
    def forward(self, *arrays, axis):
        ref = arrays[0].shape
        ax = axis % len(ref)
        for arr in arrays[1:]:
            if arr.ndim != len(ref) or any(n != m for i, (n, m) in enumerate(zip(arr.shape, ref)) if i != ax):
                raise ShapeError(f"cannot concatenate {arr.shape} with {ref} along axis {axis}")
        self.axis = ax
        self.splits = np.cumsum([a.shape[ax] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=ax)

    def backward(self, g):
        return tuple(np.split(g, self.splits, axis=self.axis))


class GetItem(Function):
    def forward(self, a, index):
        self.index = index
        return a[index]

    def backward(self, g):
        x = self.inputs[0]
        out = np.zeros(x.shape, dtype=g.dtype)
        if _is_basic_index(self.index):
            out[self.index] = g
        else:
            np.add.at(out, self.index, g)
        return (out,)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, type(None))) or p is Ellipsis for p in parts)


class Pad(Function):
    """Spatial padding of an NHWC map, constant zeros or edge replication."""

    def forward(self, a, pads, mode):
        self.pads = pads
        self.mode = mode
        width = [(0, 0)] * a.ndim
        for ax, (lo, hi) in pads.items():
            width[ax] = (lo, hi)
        if mode == "constant":
            return np.pad(a, width)
        if mode == "edge":
            return np.pad(a, width, mode="edge")
        raise ValueError(f"unknown pad mode {mode!r}")

    def backward(self, g):
        shape = self.inputs[0].shape
        for ax, (lo, hi) in self.pads.items():
            n = shape[ax]
            core = np.take(g, np.arange(lo, lo + n), axis=ax)
            if self.mode == "edge":
                core = core.copy()
                first = [slice(None)] * g.ndim
                last = [slice(None)] * g.ndim
                first[ax] = slice(0, 1)
                last[ax] = slice(n - 1, n)
                if lo:
                    core[tuple(first)] += np.take(g, np.arange(lo), axis=ax).sum(axis=ax, keepdims=True)
                if hi:
                    core[tuple(last)] += np.take(g, np.arange(lo + n, lo + n + hi), axis=ax).sum(axis=ax, keepdims=True)
            g = core
        return (g,)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty list")
    return Concat.apply(*tensors, axis=axis)


def pad(x: Tensor, pads: dict[int, tuple[int, int]], mode: str = "constant") -> Tensor:
    return Pad.apply(x, pads=dict(pads), mode=mode)


def zeros(shape, dtype=None, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _default_dtype), requires_grad=requires_grad)


def ones(shape, dtype=None, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or _default_dtype), requires_grad=requires_grad)


def ones_like(x: Tensor) -> Tensor:
    return Tensor(np.ones_like(x.data))
