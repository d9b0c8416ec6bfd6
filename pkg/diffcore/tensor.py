"""
Tensor and Tape: the define-by-run reverse-mode engine.

A `Tape` is activated with a `with` block. Every primitive evaluated while a
tape is active and that touches a `requires_grad` tensor is appended to the
tape together with the values its vector-Jacobian product needs. Creation
order is a valid topological order, so `Tape.backward` replays the record in
reverse. Outside a tape nothing is recorded (inference mode).
"""
from contextvars import ContextVar
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ShapeError, TapeError

ArrayLike = Union[np.ndarray, float, int, Sequence[Any]]

_ACTIVE_TAPE: ContextVar[Optional["Tape"]] = ContextVar("mixcam_active_tape", default=None)


class Context:
    """Saved state of one primitive application."""

    def __init__(self):
        self.shapes: Tuple[Tuple[int, ...], ...] = ()
        self.attrs: Dict[str, Any] = {}

    def save(self, **values):
        self.__dict__.update(values)


class Tensor:
    """
    Dense float64 array participating in the gradient tape.

    `data` is always a C-contiguous float64 ndarray; `grad`, when set, has the
    same shape.
    """

    __array_priority__ = 1000  # numpy defers to our reflected operators

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.ascontiguousarray(np.array(data, dtype=np.float64))
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional["Tape"] = None

    # ==================== BASIC ACCESSORS ====================

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", [self.shape], "only single-element tensors convert to a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __len__(self):
        return self.shape[0]

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool = False) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor.data = np.ascontiguousarray(array, dtype=np.float64)
        tensor.requires_grad = requires_grad
        tensor.grad = None
        tensor.name = None
        tensor._tape = None
        return tensor

    # ==================== OPERATORS ====================

    def __add__(self, other):
        return forward_primitive("add", self, other)

    def __radd__(self, other):
        return forward_primitive("add", other, self)

    def __neg__(self):
        return forward_primitive("scale", self, factor=-1.0)

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        if _is_scalar(other):
            return forward_primitive("scale", self, factor=float(other))
        return forward_primitive("multiply", self, other)

    def __rmul__(self, other):
        if _is_scalar(other):
            return forward_primitive("scale", self, factor=float(other))
        return forward_primitive("multiply", other, self)

    def __truediv__(self, other):
        return forward_primitive("divide", self, other)

    def __rtruediv__(self, other):
        return forward_primitive("divide", other, self)

    def __pow__(self, exponent: float):
        return forward_primitive("power", self, exponent=float(exponent))

    def __matmul__(self, other):
        return forward_primitive("matmul", self, other)

    # ==================== METHOD FORMS ====================

    def relu(self):
        return forward_primitive("relu", self)

    def sigmoid(self):
        return forward_primitive("sigmoid", self)

    def softplus(self):
        return forward_primitive("softplus", self)

    def exp(self):
        return forward_primitive("exp", self)

    def log(self, floor: Optional[float] = None):
        return forward_primitive("log", self, floor=floor)

    def sum(self, axis=None, keepdims: bool = False):
        return forward_primitive("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return forward_primitive("mean", self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims: bool = False):
        return forward_primitive("max", self, axis=axis, keepdims=keepdims)

    def softmax(self, axis: int = -1):
        return forward_primitive("softmax", self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return forward_primitive("reshape", self, shape=tuple(shape))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return forward_primitive("transpose", self, axes=tuple(axes) if axes else None)

    def broadcast_to(self, shape):
        return forward_primitive("broadcast", self, shape=tuple(shape))


def _is_scalar(value) -> bool:
    return isinstance(value, (int, float, np.floating, np.integer)) and not isinstance(value, bool)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


# ==================== TAPE ====================

class Node:
    __slots__ = ("primitive", "inputs", "output", "ctx")

    def __init__(self, primitive, inputs: List[Tensor], output: Tensor, ctx: Context):
        self.primitive = primitive
        self.inputs = inputs
        self.output = output
        self.ctx = ctx


class Tape:
    """
    Ordered record of primitive applications.

    Usage:
        with Tape() as tape:
            loss = model_loss(...)
        tape.backward(loss)

    A tape can be replayed exactly once.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self.consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, node: Node):
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        self.nodes.append(node)

    def backward(self, root: Tensor):
        if root.size != 1:
            raise TapeError(f"backward needs a scalar root, got shape {root.shape}")
        if root._tape is not self:
            raise TapeError("root tensor was not produced on this tape")
        if self.consumed:
            raise TapeError("tape already consumed by a previous backward pass")

        grads: Dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        produced = {id(node.output) for node in self.nodes}
        touched: Dict[int, Tensor] = {id(root): root}

        for node in reversed(self.nodes):
            upstream = grads.get(id(node.output))
            if upstream is None:
                continue
            input_grads = node.primitive.backward(node.ctx, upstream)
            for tensor, grad in zip(node.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = grad
                    touched[key] = tensor

        for key, tensor in touched.items():
            grad = np.ascontiguousarray(grads[key], dtype=np.float64).reshape(tensor.shape)
            if key in produced:
                tensor.grad = grad
            elif tensor.grad is None:
                tensor.grad = grad
            else:
                # leaves accumulate across passes until zero_grad
                tensor.grad = tensor.grad + grad

        self.consumed = True
        self.nodes = []


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def backward(root: Tensor):
    """Replay the tape that produced `root` and populate grads."""
    tape = root._tape
    if tape is None:
        raise TapeError("root tensor was not produced on a tape")
    tape.backward(root)


class no_grad:
    """Suspend recording inside an active tape."""

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPE.reset(self._token)
        return False


# ==================== DISPATCH ====================

PRIMITIVES: Dict[str, Any] = {}


def register(kind: str):
    def wrap(cls):
        cls.kind = kind
        PRIMITIVES[kind] = cls()
        return cls
    return wrap


def forward_primitive(kind: str, *inputs, **attrs) -> Tensor:
    """Evaluate primitive `kind` and record it on the active tape."""
    primitive = PRIMITIVES.get(kind)
    if primitive is None:
        raise TapeError(f"unknown op-kind '{kind}'")

    tensors = [as_tensor(x) for x in inputs]
    ctx = Context()
    ctx.shapes = tuple(t.shape for t in tensors)
    ctx.attrs = attrs
    out_data = primitive.forward(ctx, *[t.data for t in tensors], **attrs)

    tape = _ACTIVE_TAPE.get()
    needs_grad = tape is not None and any(t.requires_grad for t in tensors)
    out = Tensor._wrap(out_data, requires_grad=needs_grad)
    if needs_grad:
        out._tape = tape
        tape.record(Node(primitive, tensors, out, ctx))
    return out
