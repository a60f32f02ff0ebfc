"""Dense tensors with reverse-mode automatic differentiation.

The op set is sized for a small patch-embedding transformer: elementwise
arithmetic with broadcasting, (batched) matmul, softmax, layer norm,
tanh-approximation GELU, row gathering, transposes/reshapes, and scalar
reductions.  Data buffers are treated as immutable once wrapped; only
``grad`` is written, and only by ``backward``.  A recorded graph is
single-use: ``backward`` consumes it and frees the tape.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, StateError

_ALLOWED_DTYPES = (np.float32, np.float64)

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


class Tensor:
    """A dense array plus an optional gradient and a backward tape entry.

    ``requires_grad`` on a leaf marks it as a trainable parameter; on an
    interior node it records whether any upstream leaf is trainable.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float32 if arr.dtype.kind in "iub" else np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._done = False

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_dtypes(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise ContractError(f"{op}: dtypes must match, got {a.data.dtype} and {b.data.dtype}")


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise -------------------------------------------------------


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast") from None


def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    _check_dtypes(a, b, "add")
    _broadcast_check(a, b, "add")

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    _check_dtypes(a, b, "sub")
    _broadcast_check(a, b, "sub")

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    _check_dtypes(a, b, "mul")
    _broadcast_check(a, b, "mul")
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bwd)


# -- matmul ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading axes broadcast as in ``np.matmul``."""
    _check_dtypes(a, b, "matmul")
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-D, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions disagree for shapes {a.data.shape} and {b.data.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g @ bd.swapaxes(-1, -2)
        gb = ad.swapaxes(-1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), bwd)


# -- nonlinearities and norms -----------------------------------------


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    xd = x.data
    if xd.shape[-1] < 1:
        raise ContractError("softmax: last axis must have length >= 1")
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return _make(y, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    xd = x.data
    d = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        dgamma = _unbroadcast(g * xhat, gamma.data.shape)
        dbeta = _unbroadcast(g, beta.data.shape)
        return dx.astype(xd.dtype, copy=False), dgamma, dbeta

    return _make(out, (x, gamma, beta), bwd)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximation GELU: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    xd = x.data
    u = _GELU_C * (xd + _GELU_K * xd**3)
    t = np.tanh(u)
    y = 0.5 * xd * (1.0 + t)

    def bwd(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_K * xd**2)
        dy = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t**2) * du
        return ((g * dy).astype(xd.dtype, copy=False),)

    return _make(y, (x,), bwd)


# -- shape ops ---------------------------------------------------------


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = x.data.shape

    def bwd(g):
        return (g.reshape(orig),)

    return _make(x.data.reshape(shape), (x,), bwd)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inverse),)

    return _make(x.data.transpose(axes), (x,), bwd)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows along the token axis.

    Supported layouts:
      * x (N, d), idx (K,)   -> (K, d)
      * x (N, d), idx (B, K) -> (B, K, d)      (shared table per batch)
      * x (B, N, d), idx (B, K) -> (B, K, d)   (per-sample gather)

    Backward scatter-adds, so repeated indices accumulate.
    """
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError("take_rows: indices must be integers")
    xd = x.data
    if xd.ndim == 2:
        out = xd[idx]

        def bwd(g):
            gx = np.zeros_like(xd)
            np.add.at(gx, idx.reshape(-1), g.reshape(-1, xd.shape[-1]))
            return (gx,)

        return _make(out, (x,), bwd)
    if xd.ndim == 3 and idx.ndim == 2:
        if idx.shape[0] != xd.shape[0]:
            raise DimensionError(f"take_rows: batch sizes disagree for shapes {xd.shape} and {idx.shape}")
        out = np.take_along_axis(xd, idx[:, :, None], axis=1)

        def bwd(g):
            gx = np.zeros_like(xd)
            batch = np.arange(xd.shape[0])[:, None]
            np.add.at(gx, (batch, idx), g)
            return (gx,)

        return _make(out, (x,), bwd)
    raise DimensionError(f"take_rows: unsupported shapes {xd.shape} and {idx.shape}")


# -- reductions --------------------------------------------------------


def tsum(x: Tensor) -> Tensor:
    """Sum all elements to a scalar tensor."""

    def bwd(g):
        return (np.full(x.data.shape, g, dtype=x.data.dtype),)

    return _make(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), bwd)


def tmean(x: Tensor) -> Tensor:
    """Mean of all elements as a scalar tensor."""
    n = x.data.size

    def bwd(g):
        return (np.full(x.data.shape, g / n, dtype=x.data.dtype),)

    return _make(np.asarray(x.data.mean(), dtype=x.data.dtype), (x,), bwd)


# -- reverse pass ------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    The loss must be scalar.  Fan-out accumulates (sums) gradients.  The
    graph is consumed: the tape is freed and a second call raises.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if loss._done:
        raise StateError("backward: graph already consumed by a previous backward()")
    if not loss.requires_grad:
        loss._done = True
        return

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward_fn is None:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._parents = ()
        node._backward_fn = None
        node._done = True
    loss._done = True
