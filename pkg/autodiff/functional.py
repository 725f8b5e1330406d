"""
The forward op set and its gradient rules.

``apply(kind, *operands, **attrs)`` is the single entry point; the named
wrappers below it (``matmul``, ``gelu``, ...) are what the rest of the
project calls. Each op implementation returns the forward array and a
closure mapping the upstream gradient to one gradient per operand.
"""
import logging
import math
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.special import erf

from .tensor import AutodiffError, ShapeError, Tensor, current_tape

logger = logging.getLogger(__name__)

OpResult = Tuple[np.ndarray, Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]]

_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError("operands do not broadcast", op=op, shapes=[a.shape, b.shape])


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _same_shape(op: str, a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeError("operands must have identical shapes", op=op, shapes=[a.shape, b.shape])


# Elementwise arithmetic


def _add(a, b) -> OpResult:
    _broadcast_shape("add", a, b)
    return a + b, lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape))


def _sub(a, b) -> OpResult:
    _broadcast_shape("sub", a, b)
    return a - b, lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape))


def _mul(a, b) -> OpResult:
    _broadcast_shape("mul", a, b)
    return a * b, lambda g: (unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape))


def _scalar_mul(x, scalar: float) -> OpResult:
    return x * scalar, lambda g: (g * scalar,)


def _broadcast_to(x, shape) -> OpResult:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x, shape).copy()
    except ValueError:
        raise ShapeError("operand does not broadcast", op="broadcast-to", shapes=[x.shape, shape])
    return out, lambda g: (unbroadcast(g, x.shape),)


# Linear algebra and reductions


def _matmul(a, b) -> OpResult:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("inner dimensions do not match", op="matmul", shapes=[a.shape, b.shape])
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("batch dimensions do not broadcast", op="matmul", shapes=[a.shape, b.shape])

    def grad(g):
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return np.matmul(a, b), grad


def _normalize_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    return tuple(int(ax) % ndim for ax in axes)


def _sum(x, axis=None, keepdims=False) -> OpResult:
    axes = _normalize_axis(axis, x.ndim)
    out = x.sum(axis=axes, keepdims=keepdims)

    def grad(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return out, grad


def _mean(x, axis=None, keepdims=False) -> OpResult:
    axes = _normalize_axis(axis, x.ndim)
    count = x.size if axes is None else int(np.prod([x.shape[ax] for ax in axes]))
    out, sum_grad = _sum(x, axis=axis, keepdims=keepdims)
    return out / count, lambda g: (sum_grad(g)[0] / count,)


def _reshape(x, shape) -> OpResult:
    try:
        out = x.reshape(shape)
    except ValueError:
        raise ShapeError("cannot reshape", op="reshape", shapes=[x.shape, tuple(shape)])
    return out, lambda g: (g.reshape(x.shape),)


def _transpose(x, axes=None) -> OpResult:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("axes are not a permutation", op="transpose", shapes=[x.shape, axes])
    inverse = tuple(np.argsort(axes))
    return np.transpose(x, axes), lambda g: (np.transpose(g, inverse),)


def _concat(*xs, axis=0) -> OpResult:
    first = xs[0]
    for other in xs[1:]:
        if other.ndim != first.ndim or any(
            s != o for i, (s, o) in enumerate(zip(first.shape, other.shape)) if i != axis % first.ndim
        ):
            raise ShapeError("operands differ off the concat axis", op="concat",
                             shapes=[first.shape, other.shape])
    out = np.concatenate(xs, axis=axis)
    cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return out, lambda g: tuple(np.split(g, cuts, axis=axis))


def _slice(x, key) -> OpResult:
    try:
        out = x[key]
    except IndexError as e:
        raise ShapeError(f"invalid slice {key!r}: {e}", op="slice", shapes=[x.shape])

    def grad(g):
        full = np.zeros_like(x)
        full[key] += g
        return (full,)

    return out.copy(), grad


# Nonlinearities and normalization


def _gelu(x) -> OpResult:
    cdf = 0.5 * (1.0 + erf(x / _SQRT_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return x * cdf, lambda g: (g * (cdf + x * pdf),)


def _layer_norm(x, eps=1e-6) -> OpResult:
    n = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv

    def grad(g):
        gsum = g.sum(axis=-1, keepdims=True)
        gxsum = (g * xhat).sum(axis=-1, keepdims=True)
        return (inv / n * (n * g - gsum - xhat * gxsum),)

    return xhat, grad


def _softmax(x, axis=-1) -> OpResult:
    shifted = np.exp(x - x.max(axis=axis, keepdims=True))
    y = shifted / shifted.sum(axis=axis, keepdims=True)
    return y, lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


# Losses and similarity


def _squared_error(a, b) -> OpResult:
    _same_shape("squared-error", a, b)
    diff = a - b
    return diff * diff, lambda g: (2.0 * diff * g, -2.0 * diff * g)


def _cross_entropy(logits, labels) -> OpResult:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("expected (batch, classes) logits and (batch,) labels",
                         op="cross-entropy-with-logits", shapes=[logits.shape, labels.shape])
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= logits.shape[1]:
        raise ShapeError("label out of range", op="cross-entropy-with-logits",
                         shapes=[logits.shape, labels.shape])
    batch = logits.shape[0]
    peak = logits.max(axis=1, keepdims=True)
    exps = np.exp(logits - peak)
    total = exps.sum(axis=1, keepdims=True)
    log_z = (peak + np.log(total))[:, 0]
    rows = np.arange(batch)
    loss = np.mean(log_z - logits[rows, labels])

    def grad(g):
        probs = exps / total
        probs[rows, labels] -= 1.0
        return (probs * (g / batch),)

    return np.asarray(loss), grad


def _cosine_similarity(a, b, eps=1e-12) -> OpResult:
    _same_shape("cosine-similarity", a, b)
    dot = (a * b).sum(axis=-1)
    na = np.sqrt((a * a).sum(axis=-1))
    nb = np.sqrt((b * b).sum(axis=-1))
    denom = na * nb
    safe = denom > eps
    scale = np.where(safe, denom, eps)
    out = dot / scale

    def grad(g):
        g = g[..., None]
        inv = 1.0 / scale[..., None]
        ratio = np.where(safe, out, 0.0)[..., None]
        na2 = np.where(safe, na * na, 1.0)[..., None]
        nb2 = np.where(safe, nb * nb, 1.0)[..., None]
        ga = g * (b * inv - ratio * a / na2)
        gb = g * (a * inv - ratio * b / nb2)
        return ga, gb

    return out, grad


# Lookups and embeddings


def _embedding_lookup(table, indices) -> OpResult:
    indices = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("embedding table must be 2-D", op="embedding-lookup", shapes=[table.shape])
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise ShapeError("index out of range", op="embedding-lookup",
                         shapes=[table.shape, indices.shape])

    def grad(g):
        full = np.zeros_like(table)
        np.add.at(full, indices, g)
        return (full,)

    return table[indices], grad


def _sinusoidal_time_embed(t, dim, max_period=10000.0, scale=1000.0) -> OpResult:
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    rate = scale * freqs
    args = t[..., None] * rate
    cos, sin = np.cos(args), np.sin(args)
    parts = [cos, sin]
    if dim % 2:
        parts.append(np.zeros(t.shape + (1,)))
    out = np.concatenate(parts, axis=-1)

    def grad(g):
        g_cos, g_sin = g[..., :half], g[..., half : 2 * half]
        return (((-sin * g_cos + cos * g_sin) * rate).sum(axis=-1),)

    return out, grad


_OPS: Dict[str, Callable[..., OpResult]] = {
    "matmul": _matmul,
    "add": _add,
    "sub": _sub,
    "mul": _mul,
    "scalar-mul": _scalar_mul,
    "mean": _mean,
    "sum": _sum,
    "reshape": _reshape,
    "transpose": _transpose,
    "concat": _concat,
    "slice": _slice,
    "gelu": _gelu,
    "layer-norm": _layer_norm,
    "softmax": _softmax,
    "squared-error": _squared_error,
    "cross-entropy-with-logits": _cross_entropy,
    "cosine-similarity": _cosine_similarity,
    "embedding-lookup": _embedding_lookup,
    "sinusoidal-time-embed": _sinusoidal_time_embed,
    "broadcast-to": _broadcast_to,
}

OP_KINDS = tuple(_OPS)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def apply(kind: str, *operands, **attrs) -> Tensor:
    """
    Apply one op of the op set

    Args:
        kind: op name, one of ``OP_KINDS``
        operands: tensors (plain numbers and arrays become constants)
        attrs: op attributes (axis, shape, labels, ...)

    Returns:
        The result tensor; recorded on the active tape when any operand is
        tracked.
    """
    impl = _OPS.get(kind)
    if impl is None:
        raise AutodiffError(f"unknown op kind '{kind}'", op=kind)
    tensors = tuple(_as_tensor(x) for x in operands)
    out_array, grad_fn = impl(*(t.data for t in tensors), **attrs)
    out = Tensor.wrap(out_array)

    tape = current_tape()
    if tape is not None and any(t.tracked for t in tensors):
        out.handle = tape.record(kind, tensors, out, grad_fn)
    return out


# Named wrappers


def matmul(a, b) -> Tensor:
    return apply("matmul", a, b)


def add(a, b) -> Tensor:
    return apply("add", a, b)


def sub(a, b) -> Tensor:
    return apply("sub", a, b)


def mul(a, b) -> Tensor:
    return apply("mul", a, b)


def scalar_mul(x, scalar: float) -> Tensor:
    return apply("scalar-mul", x, scalar=float(scalar))


def mean(x, axis=None, keepdims=False) -> Tensor:
    return apply("mean", x, axis=axis, keepdims=keepdims)


def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    return apply("sum", x, axis=axis, keepdims=keepdims)


def reshape(x, shape: Sequence[int]) -> Tensor:
    return apply("reshape", x, shape=tuple(shape))


def transpose(x, axes: Sequence[int] = None) -> Tensor:
    return apply("transpose", x, axes=None if axes is None else tuple(axes))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return apply("concat", *tensors, axis=axis)


def slice_(x, key) -> Tensor:
    return apply("slice", x, key=key)


def gelu(x) -> Tensor:
    return apply("gelu", x)


def layer_norm(x, eps: float = 1e-6) -> Tensor:
    return apply("layer-norm", x, eps=eps)


def softmax(x, axis: int = -1) -> Tensor:
    return apply("softmax", x, axis=axis)


def squared_error(a, b) -> Tensor:
    return apply("squared-error", a, b)


def cross_entropy_with_logits(logits, labels) -> Tensor:
    return apply("cross-entropy-with-logits", logits, labels=labels)


def cosine_similarity(a, b, eps: float = 1e-12) -> Tensor:
    return apply("cosine-similarity", a, b, eps=eps)


def embedding_lookup(table, indices) -> Tensor:
    return apply("embedding-lookup", table, indices=indices)


def sinusoidal_time_embed(t, dim: int, max_period: float = 10000.0, scale: float = 1000.0) -> Tensor:
    return apply("sinusoidal-time-embed", t, dim=dim, max_period=max_period, scale=scale)


def broadcast_to(x, shape: Sequence[int]) -> Tensor:
    return apply("broadcast-to", x, shape=tuple(shape))


def mse(a, b) -> Tensor:
    """Mean over all elements of the squared difference."""
    return mean(squared_error(a, b))
