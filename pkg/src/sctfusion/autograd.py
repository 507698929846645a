"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array together with the bookkeeping needed to
backpropagate through the operations defined in this module. The op set is
deliberately small: exactly what a ViT-style encoder stack with class-token
fusion needs, with strict shape checking everywhere. The only broadcasting
allowed is suffix-shaped addition (``[..., n] + [n]``-style bias/row adds);
every other shape mismatch raises :class:`~sctfusion.errors.ShapeError`.

Precision is a construction choice: float32 is the training default, float64
is used by the gradient-checking harness. Operands of one op must share a
dtype.

Gradients accumulate: calling ``backward`` twice adds into ``.grad``. Callers
that step an optimizer reset gradients between steps with
:func:`zero_gradients`.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError

_GRAD_ENABLED = True

# Coefficients of the tanh-form GELU approximation (declared constants).
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class no_grad:
    """Context manager that suppresses graph construction (forward-only)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """N-dimensional array participating in a reverse-mode differentiation graph.

    ``data`` is always a numpy float32 or float64 array. A tensor created with
    ``requires_grad=False`` never accumulates a gradient and never appears as a
    differentiation target.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- introspection -----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numel(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    # -- backward ----------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar, accumulating into ``.grad`` of every
        reachable tensor that requires a gradient."""
        if self.data.ndim != 0:
            raise ShapeError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones((), dtype=self.data.dtype)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if pg is None or not parent.requires_grad:
                        continue
                    pid = id(parent)
                    if pid in grads:
                        grads[pid] = grads[pid] + pg
                    else:
                        grads[pid] = pg


def zero_gradients(tensors: Iterable[Tensor]) -> None:
    """Reset accumulated gradients (call between optimizer steps)."""
    for t in tensors:
        t.grad = None


def _needs_graph(tensors: Sequence[Tensor]) -> bool:
    return _GRAD_ENABLED and any(t.requires_grad for t in tensors)


def _from_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], "list[tuple[Tensor, np.ndarray | None]]"],
) -> Tensor:
    """Wrap an op result; ``backward`` maps the output grad to per-parent grads."""
    out = Tensor(data, requires_grad=_needs_graph(parents), dtype=data.dtype)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_same_dtype(*tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"mixed dtypes in one op: {sorted(str(d) for d in dtypes)}")


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise addition.

    ``b`` may either match ``a`` exactly or match a suffix of ``a``'s shape
    (bias/row addition, e.g. ``[B, S, d] + [d]`` or ``[B, S, d] + [S, d]``);
    the gradient of ``b`` then sums over the leading axes.
    """
    _check_same_dtype(a, b)
    if a.shape == b.shape:
        data = a.data + b.data

        def backward(g):
            return [(a, g), (b, g)]

        return _from_op(data, (a, b), backward)

    if b.ndim < a.ndim and a.shape[a.ndim - b.ndim :] == b.shape:
        lead = tuple(range(a.ndim - b.ndim))
        data = a.data + b.data

        def backward(g):
            return [(a, g), (b, g.sum(axis=lead))]

        return _from_op(data, (a, b), backward)

    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equal-shaped tensors."""
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data * b.data

    def backward(g):
        return [(a, g * b.data), (b, g * a.data)]

    return _from_op(data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar constant."""
    s = float(s)
    data = a.data * np.asarray(s, dtype=a.data.dtype)

    def backward(g):
        return [(a, g * s)]

    return _from_op(data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported shapes:
      * ``[m, k] @ [k, n]``
      * ``[..., m, k] @ [k, n]`` — stacked rows against one shared weight
      * ``[..., m, k] @ [..., k, n]`` — equal leading dims (batched product)
    """
    _check_same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires 2-D operands (or stacks), got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} x {b.shape}")

    if b.ndim == 2:
        data = a.data @ b.data

        def backward(g):
            ga = g @ b.data.T if a.requires_grad else None
            if b.requires_grad:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = None
            return [(a, ga), (b, gb)]

        return _from_op(data, (a, b), backward)

    if a.ndim == b.ndim and a.shape[:-2] == b.shape[:-2]:
        data = a.data @ b.data

        def backward(g):
            ga = g @ b.data.swapaxes(-1, -2) if a.requires_grad else None
            gb = a.data.swapaxes(-1, -2) @ g if b.requires_grad else None
            return [(a, ga), (b, gb)]

        return _from_op(data, (a, b), backward)

    raise ShapeError(f"matmul: unsupported shape pair {a.shape} x {b.shape}")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fused affine map ``x @ w + b`` for a 2-D weight ``[in, out]``.

    Same semantics as ``add(matmul(x, w), b)`` with one graph node; ``x`` may
    carry leading stack dimensions.
    """
    if w.ndim != 2:
        raise ShapeError(f"linear weight must be 2-D, got {w.shape}")
    if b is not None:
        _check_same_dtype(x, w, b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear bias {b.shape} must be ({w.shape[1]},)")
    else:
        _check_same_dtype(x, w)
    if x.ndim < 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    data = x.data @ w.data
    if b is not None:
        data += b.data
    k, n = w.shape
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gx = g @ w.data.T if x.requires_grad else None
        if w.requires_grad:
            gw = x.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gw = None
        out = [(x, gx), (w, gw)]
        if b is not None:
            out.append((b, g.reshape(-1, n).sum(axis=0) if b.requires_grad else None))
        return out

    return _from_op(data, parents, backward)


def transpose_last2(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"transpose_last2 requires ndim >= 2, got {a.shape}")
    data = a.data.swapaxes(-1, -2)

    def backward(g):
        return [(a, g.swapaxes(-1, -2))]

    return _from_op(data, (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = a.shape
    data = a.data.reshape(shape)

    def backward(g):
        return [(a, g.reshape(orig))]

    return _from_op(data, (a,), backward)


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    """Reorder the axes of ``a``."""
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for ndim {a.ndim}")
    inverse = tuple(int(i) for i in np.argsort(axes))
    data = a.data.transpose(axes)

    def backward(g):
        return [(a, g.transpose(inverse))]

    return _from_op(data, (a,), backward)


def broadcast_to_leading(a: Tensor, count: int) -> Tensor:
    """Replicate ``a`` along a new leading axis of size ``count``.

    Used to share one parameter (e.g. the class token) across a batch; the
    gradient sums over the new axis.
    """
    if count < 1:
        raise ShapeError(f"broadcast_to_leading: count must be >= 1, got {count}")
    data = np.broadcast_to(a.data, (count,) + a.shape)

    def backward(g):
        return [(a, g.sum(axis=0))]

    return _from_op(data, (a,), backward)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along one axis; all other dims must agree exactly."""
    if not parts:
        raise ShapeError("concat of zero tensors")
    _check_same_dtype(*parts)
    nd = parts[0].ndim
    ax = axis if axis >= 0 else axis + nd
    if not 0 <= ax < nd:
        raise ShapeError(f"concat: axis {axis} out of range for ndim {nd}")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != nd or any(
            p.shape[i] != ref[i] for i in range(nd) if i != ax
        ):
            raise ShapeError(
                f"concat: shapes {[p.shape for p in parts]} disagree off axis {axis}"
            )
    data = np.concatenate([p.data for p in parts], axis=ax)
    sizes = [p.shape[ax] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            index = [slice(None)] * nd
            index[ax] = slice(int(start), int(stop))
            out.append((p, g[tuple(index)]))
        return out

    return _from_op(data, tuple(parts), backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``a[..., start:stop, ...]`` along one axis."""
    nd = a.ndim
    ax = axis if axis >= 0 else axis + nd
    if not 0 <= ax < nd:
        raise ShapeError(f"slice_axis: axis {axis} out of range for ndim {nd}")
    size = a.shape[ax]
    if not (0 <= start < stop <= size):
        raise ShapeError(f"slice_axis: [{start}:{stop}] invalid for size {size}")
    index = [slice(None)] * nd
    index[ax] = slice(start, stop)
    index = tuple(index)
    data = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return [(a, full)]

    return _from_op(data, (a,), backward)


def split(a: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    """Split into consecutive chunks of the given sizes along one axis."""
    ax = axis if axis >= 0 else axis + a.ndim
    if sum(sizes) != a.shape[ax]:
        raise ShapeError(f"split: sizes {list(sizes)} do not cover axis of size {a.shape[ax]}")
    out, offset = [], 0
    for s in sizes:
        out.append(slice_axis(a, ax, offset, offset + s))
        offset += s
    return out


# ---------------------------------------------------------------------------
# nonlinearities and reductions
# ---------------------------------------------------------------------------


def softmax_last_dim(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    if a.shape[-1] < 1:
        raise ShapeError("softmax_last_dim: empty last dimension")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return [(a, y * (g - dot))]

    return _from_op(y, (a,), backward)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each last-axis slice to mean 0 / variance 1, then affine."""
    _check_same_dtype(a, gamma, beta)
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must be ({d},)"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = gamma.data * xhat + beta.data
    lead = tuple(range(a.ndim - 1))

    def backward(g):
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        da = inv * (dxhat - m1 - xhat * m2)
        return [(a, da), (gamma, dgamma), (beta, dbeta)]

    return _from_op(data, (a, gamma, beta), backward)


def gelu(a: Tensor) -> Tensor:
    """GELU in the tanh approximation."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * (x + _GELU_A * x2 * x)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
        da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return [(a, g * da)]

    return _from_op(data, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    """Sum of all elements (scalar output)."""
    data = a.data.sum()

    def backward(g):
        return [(a, np.full(a.shape, g, dtype=a.data.dtype))]

    return _from_op(np.asarray(data, dtype=a.data.dtype), (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    """Mean of all elements (scalar output)."""
    n = a.data.size
    data = a.data.mean()

    def backward(g):
        return [(a, np.full(a.shape, g / n, dtype=a.data.dtype))]

    return _from_op(np.asarray(data, dtype=a.data.dtype), (a,), backward)


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function on plain arrays."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
