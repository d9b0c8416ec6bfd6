"""
Primitive op-kinds and their vector-Jacobian products.

Each primitive implements `forward(ctx, *arrays, **attrs) -> ndarray` and
`backward(ctx, grad) -> tuple` with one entry per input (None for inputs that
never receive a gradient). Shape problems raise ShapeError naming the op-kind.
"""
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import ShapeError
from diffcore.tensor import Tensor, forward_primitive, register


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _normalize_axes(axis, ndim: int, kind: str, shape) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    normalized = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ShapeError(kind, [shape], f"axis {a} out of range")
        normalized.append(a % ndim)
    return tuple(sorted(set(normalized)))


def _broadcast_shape(kind: str, *shapes) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(kind, shapes, "not broadcast-compatible")


# ==================== ELEMENTWISE BINARY ====================

@register("add")
class Add:
    def forward(self, ctx, a, b):
        _broadcast_shape(self.kind, a.shape, b.shape)
        return a + b

    def backward(self, ctx, grad):
        sa, sb = ctx.shapes
        return unbroadcast(grad, sa), unbroadcast(grad, sb)


@register("multiply")
class Multiply:
    def forward(self, ctx, a, b):
        _broadcast_shape(self.kind, a.shape, b.shape)
        ctx.save(a=a, b=b)
        return a * b

    def backward(self, ctx, grad):
        sa, sb = ctx.shapes
        return unbroadcast(grad * ctx.b, sa), unbroadcast(grad * ctx.a, sb)


@register("divide")
class Divide:
    def forward(self, ctx, a, b):
        _broadcast_shape(self.kind, a.shape, b.shape)
        ctx.save(a=a, b=b)
        return a / b

    def backward(self, ctx, grad):
        sa, sb = ctx.shapes
        ga = grad / ctx.b
        return unbroadcast(ga, sa), unbroadcast(-ga * ctx.a / ctx.b, sb)


@register("matmul")
class MatMul:
    def forward(self, ctx, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(self.kind, [a.shape, b.shape], "inner extents differ")
        _broadcast_shape(self.kind, a.shape[:-2], b.shape[:-2])
        ctx.save(a=a, b=b)
        return np.matmul(a, b)

    def backward(self, ctx, grad):
        sa, sb = ctx.shapes
        ga = np.matmul(grad, np.swapaxes(ctx.b, -1, -2))
        gb = np.matmul(np.swapaxes(ctx.a, -1, -2), grad)
        return unbroadcast(ga, sa), unbroadcast(gb, sb)


# ==================== CONVOLUTION ====================

@register("conv2d")
class Conv2d:
    """Direct zero-padded 2-D cross-correlation, input N×C×H×W, kernel O×C×kh×kw."""

    def forward(self, ctx, x, w, stride: int = 1, padding: int = 0):
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError(self.kind, [x.shape, w.shape], "expected N×C×H×W input and O×C×kh×kw kernel")
        if stride < 1 or padding < 0:
            raise ShapeError(self.kind, [x.shape, w.shape], f"stride={stride} padding={padding}")
        kh, kw = w.shape[2:]
        hp, wp = x.shape[2] + 2 * padding, x.shape[3] + 2 * padding
        if hp < kh or wp < kw:
            raise ShapeError(self.kind, [x.shape, w.shape], "kernel larger than padded input")

        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, O
        ctx.save(windows=windows, w=w, padded_shape=xp.shape, stride=stride, padding=padding)
        return out.transpose(0, 3, 1, 2)

    def backward(self, ctx, grad):
        w, stride, padding = ctx.w, ctx.stride, ctx.padding
        kh, kw = w.shape[2:]
        ho, wo = grad.shape[2:]

        gw = np.tensordot(grad, ctx.windows, axes=([0, 2, 3], [0, 2, 3]))

        gxp = np.zeros(ctx.padded_shape)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(grad, w[:, :, i, j], axes=([1], [0]))  # N, Ho, Wo, C
                gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                    contrib.transpose(0, 3, 1, 2)
        h, wd = ctx.shapes[0][2:]
        gx = gxp[:, :, padding:padding + h, padding:padding + wd]
        return gx, gw


# ==================== ELEMENTWISE UNARY ====================

@register("relu")
class ReLU:
    def forward(self, ctx, x):
        ctx.save(mask=x > 0)
        return np.where(ctx.mask, x, 0.0)

    def backward(self, ctx, grad):
        return (grad * ctx.mask,)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@register("sigmoid")
class Sigmoid:
    def forward(self, ctx, x):
        out = _stable_sigmoid(x)
        ctx.save(out=out)
        return out

    def backward(self, ctx, grad):
        return (grad * ctx.out * (1.0 - ctx.out),)


@register("softplus")
class Softplus:
    def forward(self, ctx, x):
        ctx.save(x=x)
        return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward(self, ctx, grad):
        return (grad * _stable_sigmoid(ctx.x),)


@register("exp")
class Exp:
    def forward(self, ctx, x):
        out = np.exp(x)
        ctx.save(out=out)
        return out

    def backward(self, ctx, grad):
        return (grad * ctx.out,)


@register("log")
class Log:
    """Natural log; with `floor`, log(max(x, floor)) and zero gradient below the floor."""

    def forward(self, ctx, x, floor: Optional[float] = None):
        clamped = x if floor is None else np.maximum(x, floor)
        mask = None if floor is None else (x > floor)
        ctx.save(clamped=clamped, mask=mask)
        return np.log(clamped)

    def backward(self, ctx, grad):
        g = grad / ctx.clamped
        if ctx.mask is not None:
            g = g * ctx.mask
        return (g,)


@register("power")
class Power:
    def forward(self, ctx, x, exponent: float = 1.0):
        ctx.save(x=x, exponent=exponent)
        return np.power(x, exponent)

    def backward(self, ctx, grad):
        p = ctx.exponent
        return (grad * p * np.power(ctx.x, p - 1.0),)


@register("scale")
class Scale:
    def forward(self, ctx, x, factor: float = 1.0):
        ctx.save(factor=factor)
        return factor * x

    def backward(self, ctx, grad):
        return (ctx.factor * grad,)


# ==================== REDUCTIONS ====================

def _expand_reduced(grad: np.ndarray, axes: Tuple[int, ...], keepdims: bool, shape) -> np.ndarray:
    if not keepdims:
        grad = np.expand_dims(grad, axes)
    return np.broadcast_to(grad, shape)


@register("sum")
class Sum:
    def forward(self, ctx, x, axis=None, keepdims: bool = False):
        axes = _normalize_axes(axis, x.ndim, self.kind, x.shape)
        ctx.save(axes=axes, keepdims=keepdims)
        return np.sum(x, axis=axes, keepdims=keepdims)

    def backward(self, ctx, grad):
        return (_expand_reduced(grad, ctx.axes, ctx.keepdims, ctx.shapes[0]),)


@register("mean")
class Mean:
    def forward(self, ctx, x, axis=None, keepdims: bool = False):
        axes = _normalize_axes(axis, x.ndim, self.kind, x.shape)
        count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
        if count == 0:
            raise ShapeError(self.kind, [x.shape], "mean over an empty extent")
        ctx.save(axes=axes, keepdims=keepdims, count=count)
        return np.mean(x, axis=axes, keepdims=keepdims)

    def backward(self, ctx, grad):
        return (_expand_reduced(grad, ctx.axes, ctx.keepdims, ctx.shapes[0]) / ctx.count,)


@register("max")
class Max:
    """Max over axes; tied maxima share the gradient equally."""

    def forward(self, ctx, x, axis=None, keepdims: bool = False):
        axes = _normalize_axes(axis, x.ndim, self.kind, x.shape)
        if x.size == 0:
            raise ShapeError(self.kind, [x.shape], "max of an empty tensor")
        kept = np.max(x, axis=axes, keepdims=True)
        mask = (x == kept)
        ctx.save(axes=axes, keepdims=keepdims, weights=mask / mask.sum(axis=axes, keepdims=True))
        return kept if keepdims else np.squeeze(kept, axis=axes)

    def backward(self, ctx, grad):
        if not ctx.keepdims:
            grad = np.expand_dims(grad, ctx.axes)
        return (grad * ctx.weights,)


@register("softmax")
class Softmax:
    def forward(self, ctx, x, axis: int = -1):
        (axis,) = _normalize_axes(axis, x.ndim, self.kind, x.shape)
        shifted = x - np.max(x, axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / np.sum(e, axis=axis, keepdims=True)
        ctx.save(out=out, axis=axis)
        return out

    def backward(self, ctx, grad):
        out = ctx.out
        inner = np.sum(grad * out, axis=ctx.axis, keepdims=True)
        return (out * (grad - inner),)


@register("gap")
class GlobalAveragePool:
    """Mean over the two trailing (spatial) axes."""

    def forward(self, ctx, x):
        if x.ndim < 2 or x.shape[-1] * x.shape[-2] == 0:
            raise ShapeError(self.kind, [x.shape], "needs two non-empty trailing spatial axes")
        return x.mean(axis=(-2, -1))

    def backward(self, ctx, grad):
        shape = ctx.shapes[0]
        count = shape[-1] * shape[-2]
        return (np.broadcast_to(grad[..., None, None], shape) / count,)


# ==================== SHAPE MANIPULATION ====================

@register("broadcast")
class Broadcast:
    def forward(self, ctx, x, shape=()):
        try:
            out = np.broadcast_to(x, shape)
        except ValueError:
            raise ShapeError(self.kind, [x.shape, tuple(shape)], "cannot broadcast")
        return np.array(out)

    def backward(self, ctx, grad):
        return (unbroadcast(grad, ctx.shapes[0]),)


@register("reshape")
class Reshape:
    def forward(self, ctx, x, shape=()):
        try:
            return x.reshape(shape)
        except ValueError:
            raise ShapeError(self.kind, [x.shape, tuple(shape)], "element counts differ")

    def backward(self, ctx, grad):
        return (grad.reshape(ctx.shapes[0]),)


@register("transpose")
class Transpose:
    def forward(self, ctx, x, axes=None):
        axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
        if sorted(a % x.ndim for a in axes) != list(range(x.ndim)) or len(axes) != x.ndim:
            raise ShapeError(self.kind, [x.shape], f"invalid permutation {axes}")
        ctx.save(inverse=tuple(np.argsort([a % x.ndim for a in axes])))
        return np.transpose(x, axes)

    def backward(self, ctx, grad):
        return (np.transpose(grad, ctx.inverse),)


@register("concat")
class Concat:
    def forward(self, ctx, *arrays, axis: int = 0):
        if not arrays:
            raise ShapeError(self.kind, [], "nothing to concatenate")
        ndim = arrays[0].ndim
        shapes = [a.shape for a in arrays]
        if any(a.ndim != ndim for a in arrays):
            raise ShapeError(self.kind, shapes, "ranks differ")
        (axis,) = _normalize_axes(axis, ndim, self.kind, arrays[0].shape)
        for a in arrays[1:]:
            if a.shape[:axis] + a.shape[axis + 1:] != arrays[0].shape[:axis] + arrays[0].shape[axis + 1:]:
                raise ShapeError(self.kind, shapes, f"extents differ off axis {axis}")
        ctx.save(axis=axis, splits=np.cumsum([a.shape[axis] for a in arrays])[:-1])
        return np.concatenate(arrays, axis=axis)

    def backward(self, ctx, grad):
        return tuple(np.split(grad, ctx.splits, axis=ctx.axis))


# ==================== FUNCTIONAL FORMS ====================

def add(a, b) -> Tensor:
    return forward_primitive("add", a, b)


def multiply(a, b) -> Tensor:
    return forward_primitive("multiply", a, b)


def divide(a, b) -> Tensor:
    return forward_primitive("divide", a, b)


def matmul(a, b) -> Tensor:
    return forward_primitive("matmul", a, b)


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    return forward_primitive("conv2d", x, w, stride=stride, padding=padding)


def relu(x) -> Tensor:
    return forward_primitive("relu", x)


def sigmoid(x) -> Tensor:
    return forward_primitive("sigmoid", x)


def softplus(x) -> Tensor:
    return forward_primitive("softplus", x)


def softmax(x, axis: int = -1) -> Tensor:
    return forward_primitive("softmax", x, axis=axis)


def log(x, floor: Optional[float] = None) -> Tensor:
    return forward_primitive("log", x, floor=floor)


def exp(x) -> Tensor:
    return forward_primitive("exp", x)


def power(x, exponent: float) -> Tensor:
    return forward_primitive("power", x, exponent=float(exponent))


def scale(x, factor: float) -> Tensor:
    return forward_primitive("scale", x, factor=float(factor))


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    return forward_primitive("sum", x, axis=axis, keepdims=keepdims)


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    return forward_primitive("mean", x, axis=axis, keepdims=keepdims)


def reduce_max(x, axis=None, keepdims: bool = False) -> Tensor:
    return forward_primitive("max", x, axis=axis, keepdims=keepdims)


def gap(x) -> Tensor:
    return forward_primitive("gap", x)


def broadcast_to(x, shape: Sequence[int]) -> Tensor:
    return forward_primitive("broadcast", x, shape=tuple(shape))


def reshape(x, shape: Sequence[int]) -> Tensor:
    return forward_primitive("reshape", x, shape=tuple(shape))


def transpose(x, axes: Optional[Sequence[int]] = None) -> Tensor:
    return forward_primitive("transpose", x, axes=None if axes is None else tuple(axes))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    return forward_primitive("concat", *tensors, axis=axis)
