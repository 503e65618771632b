"""Dense float64 tensors with reverse-mode autodiff.

Every differentiable op builds its output through :func:`_record`, which
stores the parent tensors and a closure mapping the output gradient to
parent gradients.  :func:`backward` linearises that graph into a
:class:`ComputationTape` and replays it in reverse.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from . import _kernels
from .errors import (
    ClassOutOfRange,
    DetachedTensor,
    EvenKernel,
    NonFinite,
    NotScalarRoot,
    ShapeMismatch,
)

__all__ = [
    "Tensor", "ComputationTape", "no_grad", "tensor", "matmul", "hadamard", "add", "sub",
    "scale", "neg", "sum_all", "mean_all", "reshape", "permute", "tanh",
    "exp", "gelu", "relu", "activation", "layer_norm", "conv2d_depthwise",
    "linear", "mse_loss", "softmax_xent", "loss", "backward", "zero_grad",
    "finite_diff_check",
]


class Tensor:
    """n-d float64 array plus an optional gradient slot.

    The data buffer is read-only; optimisers rebind ``.data`` rather than
    writing into it.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFinite("tensor contains NaN or Inf")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def assign(self, values) -> None:
        """Replace the data buffer (used by optimisers)."""
        arr = np.array(values, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise ShapeMismatch(f"assign {arr.shape} into {self.data.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFinite("assigned values contain NaN or Inf")
        arr.flags.writeable = False
        self.data = arr

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return hadamard(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    @property
    def T(self):
        return permute(self, tuple(reversed(range(self.data.ndim))))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_GRAD_ENABLED = [True]


class no_grad:
    """Context manager that suspends graph recording."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev


def _record(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ------------------------------------------------------------------ the tape

@dataclass
class ComputationTape:
    """Topologically ordered list of the nodes reachable from a root."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputationTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every grad-requiring leaf."""
    if root.size != 1:
        raise NotScalarRoot(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise DetachedTensor("root was not produced from any grad-requiring tensor")
    tape = ComputationTape.from_root(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# ------------------------------------------------------------------ algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with ``a`` of shape ``(..., k)`` and ``b`` of shape ``(k, n)``."""
    if b.data.ndim != 2 or a.data.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def _bw(g):
        ga = g @ B.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if A.ndim == 1:
                gb = np.outer(A, g)
            else:
                gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _record(A @ B, (a, b), _bw, "matmul")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"hadamard {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    return _record(A * B, (a, b), lambda g: (g * B, g * A), "hadamard")


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeMismatch(f"add {a.shape} + {b.shape}") from exc
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeMismatch(f"sub {a.shape} - {b.shape}") from exc
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def scale(a: Tensor, c: float) -> Tensor:
    return _record(a.data * c, (a,), lambda g: (g * c,), "scale")


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _record(np.array(a.data.sum()), (a,),
                   lambda g: (np.full(shape, float(g)),), "sum")


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _record(np.array(a.data.mean()), (a,),
                   lambda g: (np.full(shape, float(g) / n),), "mean")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"reshape {old} -> {shape}") from exc
    return _record(out, (a,), lambda g: (g.reshape(old),), "reshape")


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inverse),), "permute")


# ------------------------------------------------------------------ pointwise

def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _record(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as NonFinite in _record
        e = np.exp(a.data)
    return _record(e, (a,), lambda g: (g * e,), "exp")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, ``0.5 x (1 + erf(x / sqrt 2))``."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return _record(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),), "gelu")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def activation(a: Tensor, kind: str) -> Tensor:
    if kind == "gelu":
        return gelu(a)
    if kind == "relu":
        return relu(a)
    raise ValueError(f"unknown activation {kind!r}")


# ------------------------------------------------------------------ layers

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis with the population (1/C) variance."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(f"layer_norm params {gamma.shape}/{beta.shape} for C={c}")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gamma.data

    def _bw(g):
        red = tuple(range(X.ndim - 1))
        gg = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gb = g.sum(axis=red) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * G
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _record(xhat * G + beta.data, (x, gamma, beta), _bw, "layer_norm")


def conv2d_depthwise(x: Tensor, k: Tensor) -> Tensor:
    """Per-channel 2-D cross-correlation, zero "same" padding.

    ``x`` is ``(C, H, W)`` or ``(B, C, H, W)``; ``k`` is ``(C, kh, kw)``.
    """
    if k.data.ndim != 3:
        raise ShapeMismatch(f"kernel must be (C, kh, kw), got {k.shape}")
    kh, kw = k.shape[1:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise EvenKernel(f"kernel sides must be odd, got {kh}x{kw}")
    squeeze = x.data.ndim == 3
    X = x.data[None] if squeeze else x.data
    if X.ndim != 4 or X.shape[1] != k.shape[0]:
        raise ShapeMismatch(f"conv input {x.shape} vs kernel {k.shape}")
    K = k.data
    out = _kernels.dw_forward(X, K)

    def _bw(g):
        g4 = g[None] if squeeze else g
        gx = gk = None
        if x.requires_grad:
            gx = _kernels.dw_grad_input(g4, K)
            if squeeze:
                gx = gx[0]
        if k.requires_grad:
            gk = _kernels.dw_grad_kernel(X, g4, kh, kw)
        return gx, gk

    return _record(out[0] if squeeze else out, (x, k), _bw, "conv2d_depthwise")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as ``(out, in)``."""
    if weight.data.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeMismatch(f"linear input {x.shape} vs weight {weight.shape}")
    y = matmul(x, permute(weight, (1, 0)))
    return y if bias is None else add(y, bias)


# ------------------------------------------------------------------ losses

def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean over every element of ``(pred - target)**2``."""
    T = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if T.shape != pred.shape:
        raise ShapeMismatch(f"mse pred {pred.shape} vs target {T.shape}")
    diff = pred.data - T
    n = diff.size
    with np.errstate(over="ignore"):
        value = np.array((diff * diff).mean())
    return _record(value, (pred,),
                   lambda g: (g * (2.0 / n) * diff,), "mse")


def softmax_xent(logits: Tensor, target) -> Tensor:
    """Mean cross-entropy of ``(B, k)`` logits against integer class ids."""
    Z = logits.data if logits.data.ndim == 2 else logits.data[None]
    t = np.asarray(target).reshape(-1)
    if t.shape[0] != Z.shape[0]:
        raise ShapeMismatch(f"{Z.shape[0]} logit rows vs {t.shape[0]} targets")
    if not np.issubdtype(t.dtype, np.integer):
        if not np.all(t == np.round(t)):
            raise ClassOutOfRange("targets must be integer class ids")
        t = t.astype(np.int64)
    k = Z.shape[1]
    if np.any(t < 0) or np.any(t >= k):
        raise ClassOutOfRange(f"target ids must lie in [0, {k})")
    shifted = Z - Z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(Z.shape[0])
    nb = Z.shape[0]

    def _bw(g):
        p = np.exp(logp)
        p[rows, t] -= 1.0
        return ((g / nb) * p).reshape(logits.shape),

    return _record(np.array(-logp[rows, t].mean()), (logits,), _bw, "softmax_xent")


def loss(pred: Tensor, target, kind: str = "mse") -> Tensor:
    if kind == "mse":
        return mse_loss(pred, target)
    if kind == "softmax_xent":
        return softmax_xent(pred, target)
    raise ValueError(f"unknown loss {kind!r}")


# ------------------------------------------------------------------ checking

def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between the tape gradient of ``f`` at ``x`` and
    central differences, ``|a - n| / max(|a|, |n|, 1e-8)``."""
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0, requires_grad=True)
    y = f(xt)
    backward(y)
    analytic = np.zeros_like(x0) if xt.grad is None else xt.grad
    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(x0)).item()
        flat[i] = orig - h
        fm = f(Tensor(x0)).item()
        flat[i] = orig
        num_flat[i] = (fp - fm) / (2.0 * h)
    if not np.all(np.isfinite(numeric)):
        raise NonFinite("finite differences produced NaN/Inf")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
