"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine covers exactly the operation set the transformer forward and
backward passes need: broadcast arithmetic, (batched) matrix products,
shape manipulation, softmax, logsumexp, layer normalization, exact-erf
GELU, and cross-entropy.  Operations executed inside a ``with Tape():``
block are recorded on that tape; :func:`backward` replays the tape in
reverse and accumulates total derivatives into ``Tensor.grad``.

Usage sketch::

    w = Tensor(weights, requires_grad=True)
    tape = Tape()
    with tape:
        loss = cross_entropy(matmul(x, w), targets)
    backward(loss)          # w.grad now holds d(loss)/d(w)

A tape is single-owner, is rebuilt for every forward pass, and supports
exactly one backward call.  Tensors are value-like once constructed;
optimizers mutate parameter buffers in place between tapes, never during
one.  All computation is float64.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import ShapeError, TapeError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "add",
    "sub",
    "neg",
    "mul",
    "matmul",
    "reshape",
    "transpose",
    "broadcast_to",
    "concat",
    "softmax",
    "logsumexp",
    "layer_norm",
    "gelu",
    "cross_entropy",
]

Array = np.ndarray

_INV_SQRT2 = float(np.sqrt(0.5))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class Tensor:
    """N-dimensional float64 array, optionally tracked for gradients.

    ``data`` is a contiguous row-major numpy array.  ``grad``, once
    populated by :func:`backward`, matches ``data``'s shape.  The shape
    never changes in place; :func:`reshape` returns a new tensor.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keep rank-0 tensors rank 0
        self.data: Array = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Array] = None
        self.node: Optional["_Node"] = None
        self.tape: Optional["Tape"] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> Array:
        """Copy of the underlying values, detached from any tape."""
        return self.data.copy()

    def __repr__(self) -> str:  # pragma: no cover
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; all routes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("division is supported by scalar constants only")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)


class _Node:
    """One recorded operation: inputs, output, and its local gradient rule."""

    __slots__ = ("inputs", "output", "grad_fn")

    def __init__(self, inputs: tuple[Tensor, ...], output: Tensor, grad_fn: Callable):
        self.inputs = inputs
        self.output = output
        self.grad_fn = grad_fn


class Tape:
    """Ordered record of operations; replayed once, in reverse, by backward().

    Recording order is execution order, which is a topological order by
    construction (an op's inputs always exist before its output).  A tape
    belongs to the thread that built it.
    """

    __slots__ = ("nodes", "_consumed")

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tape_stack().pop()

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise TapeError("backward already ran on this tape; build a fresh graph for another pass")
        if loss.tape is not self or loss.node is None:
            raise TapeError("loss tensor is not recorded on this tape (detached root)")
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            out_grad = node.output.grad
            if out_grad is None:
                continue  # not reachable from the loss
            in_grads = node.grad_fn(out_grad)
            for tensor, grad in zip(node.inputs, in_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                tensor.grad = grad if tensor.grad is None else tensor.grad + grad


_LOCAL = threading.local()


def _tape_stack() -> list[Tape]:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = _LOCAL.stack = []
    return stack


def _active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape.

    The loss must be a scalar recorded on a live tape.  Each tape supports
    one backward pass; a second call raises :class:`TapeError`.
    """
    if loss.tape is None or loss.node is None:
        raise TapeError("loss tensor is detached: it was not produced under an active tape")
    loss.tape.backward(loss)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(inputs: tuple[Tensor, ...], out_data: Array, grad_fn: Callable) -> Tensor:
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        out.tape = tape
        out.node = _Node(inputs, out, grad_fn)
        tape.nodes.append(out.node)
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_axis(x: Tensor, axis: int, op: str) -> int:
    if x.ndim == 0:
        raise ShapeError(f"{op}: rank-0 tensor has no axes")
    ax = axis + x.ndim if axis < 0 else axis
    if not 0 <= ax < x.ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for shape {x.shape}")
    if x.shape[ax] == 0:
        raise ShapeError(f"{op}: axis {axis} of shape {x.shape} is empty")
    return ax


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def grad_fn(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record((a, b), out, grad_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def grad_fn(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record((a, b), out, grad_fn)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def grad_fn(g):
        return (-g,) if a.requires_grad else (None,)

    return _record((a,), -a.data, grad_fn)


def mul(a, b) -> Tensor:
    """Elementwise (broadcasting) product; either side may be a scalar."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def grad_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record((a, b), out, grad_fn)


def matmul(a, b) -> Tensor:
    """Matrix product; leading axes broadcast as batch dimensions.

    Gradients follow dA = dC @ B^T and dB = A^T @ dC on the trailing two
    axes, summed over broadcast batch axes.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _record((a, b), out, grad_fn)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x, *shape) -> Tensor:
    x = _as_tensor(x)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}: {exc}") from None

    def grad_fn(g):
        return (g.reshape(x.shape),) if x.requires_grad else (None,)

    return _record((x,), out, grad_fn)


def transpose(x, *axes) -> Tensor:
    x = _as_tensor(x)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    perm = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    if sorted(perm) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {perm} is not a permutation of axes for shape {x.shape}")
    inv = np.argsort(perm)

    def grad_fn(g):
        return (np.transpose(g, inv),) if x.requires_grad else (None,)

    return _record((x,), np.transpose(x.data, perm), grad_fn)


def broadcast_to(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {x.shape} to {tuple(shape)}: {exc}") from None

    def grad_fn(g):
        return (_unbroadcast(g, x.shape),) if x.requires_grad else (None,)

    return _record((x,), np.ascontiguousarray(out), grad_fn)


def _getitem(x: Tensor, key) -> Tensor:
    """Basic (non-repeating) indexing with a scatter-add gradient."""
    out = x.data[key]
    out = out.copy() if isinstance(out, np.ndarray) else np.asarray(out)

    def grad_fn(g):
        if not x.requires_grad:
            return (None,)
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return _record((x,), out, grad_fn)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of an empty sequence")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat along axis {axis}: {exc}") from None
    ax = axis + out.ndim if axis < 0 else axis
    splits = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def grad_fn(g):
        pieces = np.split(g, splits, axis=ax)
        return tuple(piece if p.requires_grad else None for p, piece in zip(parts, pieces))

    return _record(tuple(parts), out, grad_fn)


# ---------------------------------------------------------------------------
# nonlinear ops


def softmax(x, axis: int = -1) -> Tensor:
    """Exponential normalization along ``axis``; max-shifted for stability."""
    x = _as_tensor(x)
    ax = _check_axis(x, axis, "softmax")
    shifted = x.data - np.max(x.data, axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=ax, keepdims=True)

    def grad_fn(g):
        if not x.requires_grad:
            return (None,)
        inner = np.sum(g * out, axis=ax, keepdims=True)
        return ((g - inner) * out,)

    return _record((x,), out, grad_fn)


def logsumexp(x, axis: int = -1) -> Tensor:
    """log of the summed exponentials along ``axis``, max-shifted; drops the axis."""
    x = _as_tensor(x)
    ax = _check_axis(x, axis, "logsumexp")
    m = np.max(x.data, axis=ax, keepdims=True)
    e = np.exp(x.data - m)
    out = np.squeeze(m, axis=ax) + np.log(np.sum(e, axis=ax))

    def grad_fn(g):
        if not x.requires_grad:
            return (None,)
        s = e / np.sum(e, axis=ax, keepdims=True)
        return (np.expand_dims(g, ax) * s,)

    return _record((x,), out, grad_fn)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance normalization of the last axis, then affine.

    Uses the population variance, stabilized by ``eps``, so constant rows
    normalize to zero instead of dividing by zero.
    """
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if x.ndim < 1:
        raise ShapeError("layer_norm needs at least one axis")
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(
            f"layer_norm: gain/bias must have shape ({n},), got {gain.shape} and {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    scale = np.sqrt(var + eps)
    xhat = centered / scale
    out = xhat * gain.data + bias.data

    def grad_fn(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gg = g * gain.data
            m1 = gg.mean(axis=-1, keepdims=True)
            m2 = (gg * xhat).mean(axis=-1, keepdims=True)
            gx = (gg - m1 - xhat * m2) / scale
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, n).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, n).sum(axis=0)
        return gx, ggain, gbias

    return _record((x, gain, bias), out, grad_fn)


def gelu(x) -> Tensor:
    """Exact-erf GELU, elementwise: 0.5 x (1 + erf(x / sqrt 2))."""
    x = _as_tensor(x)
    e = erf(x.data * _INV_SQRT2)
    out = 0.5 * x.data * (1.0 + e)

    def grad_fn(g):
        if not x.requires_grad:
            return (None,)
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (0.5 * (1.0 + e) + x.data * pdf),)

    return _record((x,), out, grad_fn)


def cross_entropy(logits, targets) -> Tensor:
    """Mean over the batch of logsumexp(row) minus the target logit.

    ``logits`` is B x K; ``targets`` holds B class indices in [0, K).
    The gradient is (softmax - one_hot) / B.
    """
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects B x K logits, got shape {logits.shape}")
    batch, k = logits.shape
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != batch:
        raise ShapeError(f"cross_entropy: {batch} logit rows but {t.shape[0]} targets")
    if t.size and (t.min() < 0 or t.max() >= k):
        raise ValueError(f"cross_entropy: target out of range [0, {k})")
    m = logits.data.max(axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    lse = m[:, 0] + np.log(e.sum(axis=1))
    out = np.mean(lse - logits.data[np.arange(batch), t])

    def grad_fn(g):
        if not logits.requires_grad:
            return (None,)
        p = e / e.sum(axis=1, keepdims=True)
        p[np.arange(batch), t] -= 1.0
        return (p * (float(g) / batch),)

    return _record((logits,), out, grad_fn)
