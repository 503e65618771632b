"""Quadratic layers: full bilinear, rank-factorised, and kernel maps.

The rank-r quadratic term evaluates ``C @ k(A x, B x)`` where ``k`` acts
coordinatewise on the paired projections.  With ``k(u, v) = u * v`` this is
exactly the bilinear form ``x^T W_i x`` with ``W_i = sum_k C[i,k] A_k B_k^T``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfig, ShapeMismatch
from .numerics import Tensor, _record, hadamard, matmul, permute

KERNEL_KINDS = ("product", "polynomial", "rbf", "sigmoid")


@dataclass(frozen=True)
class KernelMap:
    """Coordinatewise similarity applied to the paired projections.

    product     u*v
    polynomial  (u*v + c)**d, d a positive integer
    rbf         exp(-gamma * (u - v)**2), gamma >= 0
    sigmoid     tanh(s * u*v + c)
    """

    kind: str = "product"
    c: float = 0.0
    d: int = 2
    gamma: float = 1.0
    s: float = 1.0

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise InvalidConfig(f"unknown kernel kind {self.kind!r}")
        if self.kind == "polynomial":
            if isinstance(self.d, bool) or int(self.d) != self.d or self.d < 1:
                raise InvalidConfig("polynomial degree must be a positive integer")
            object.__setattr__(self, "d", int(self.d))
        if self.kind == "rbf" and not (self.gamma >= 0 and math.isfinite(self.gamma)):
            raise InvalidConfig("rbf gamma must be finite and >= 0")
        for name in ("c", "gamma", "s"):
            if not math.isfinite(getattr(self, name)):
                raise InvalidConfig(f"kernel {name} must be finite")

    @classmethod
    def product(cls):
        return cls("product")

    @classmethod
    def polynomial(cls, c: float = 0.0, d: int = 2):
        return cls("polynomial", c=c, d=d)

    @classmethod
    def rbf(cls, gamma: float = 1.0):
        return cls("rbf", gamma=gamma)

    @classmethod
    def sigmoid(cls, s: float = 1.0, c: float = 0.0):
        return cls("sigmoid", s=s, c=c)

    def to_dict(self) -> dict:
        if self.kind == "product":
            return {"kind": "product"}
        if self.kind == "polynomial":
            return {"kind": "polynomial", "c": self.c, "d": self.d}
        if self.kind == "rbf":
            return {"kind": "rbf", "gamma": self.gamma}
        return {"kind": "sigmoid", "s": self.s, "c": self.c}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelMap":
        d = dict(d)
        kind = d.pop("kind", "product")
        allowed = {"product": set(), "polynomial": {"c", "d"},
                   "rbf": {"gamma"}, "sigmoid": {"s", "c"}}.get(kind)
        if allowed is None:
            raise InvalidConfig(f"unknown kernel kind {kind!r}")
        extra = set(d) - allowed
        if extra:
            raise InvalidConfig(f"kernel {kind} does not take {sorted(extra)}")
        return cls(kind, **d)


def kernel_apply(kmap: KernelMap, u: Tensor, v: Tensor) -> Tensor:
    """Elementwise ``k(u, v)`` with analytic derivatives per kernel kind."""
    if u.shape != v.shape:
        raise ShapeMismatch(f"kernel_apply {u.shape} vs {v.shape}")
    if kmap.kind == "product":
        # identical arithmetic to hadamard so the two paths agree bitwise
        return hadamard(u, v)
    U, V = u.data, v.data
    if kmap.kind == "polynomial":
        base = U * V + kmap.c
        d = kmap.d
        out = base ** d
        dbase = d * base ** (d - 1) if d > 1 else np.ones_like(base)
        return _record(out, (u, v), lambda g: (g * dbase * V, g * dbase * U), "k_poly")
    if kmap.kind == "rbf":
        diff = U - V
        out = np.exp(-kmap.gamma * diff * diff)
        slope = -2.0 * kmap.gamma * diff * out

        def _bw(g):
            gu = g * slope
            return gu, -gu

        return _record(out, (u, v), _bw, "k_rbf")
    t = np.tanh(kmap.s * U * V + kmap.c)
    dz = kmap.s * (1.0 - t * t)
    return _record(t, (u, v), lambda g: (g * dz * V, g * dz * U), "k_sigmoid")


# ---------------------------------------------------------------- full layer

def bilinear(x: Tensor, wq: Tensor) -> Tensor:
    """``out[b, i] = x_b^T Wq[i] x_b`` for x of shape (n,) or (B, n)."""
    if wq.data.ndim != 3 or wq.shape[1] != wq.shape[2] or x.shape[-1] != wq.shape[1]:
        raise ShapeMismatch(f"bilinear x {x.shape} vs Wq {wq.shape}")
    X, W = x.data, wq.data
    xw = np.einsum("...j,ijk->...ik", X, W)
    out = np.einsum("...ik,...k->...i", xw, X)

    def _bw(g):
        gx = gw = None
        if x.requires_grad:
            gx = np.einsum("...i,...ik->...k", g, xw) + np.einsum("...i,ijk,...k->...j", g, W, X)
        if wq.requires_grad:
            g2, x2 = g.reshape(-1, g.shape[-1]), X.reshape(-1, X.shape[-1])
            gw = np.einsum("bi,bj,bk->ijk", g2, x2, x2, optimize=True)
        return gx, gw

    return _record(out, (x, wq), _bw, "bilinear")


@dataclass
class FullQuadraticLayer:
    """Per-output bilinear form plus primary (linear) term and bias.

    ``Wq`` is stored unsymmetrised; only its symmetric part affects the
    output (see :meth:`symmetrized`).
    """

    Wq: Tensor  # (m, n, n)
    Wl: Tensor  # (m, n)
    bias: Tensor  # (m,)

    def __post_init__(self):
        m, n = self.Wl.shape
        if self.Wq.shape != (m, n, n) or self.bias.shape != (m,):
            raise ShapeMismatch(f"inconsistent shapes Wq={self.Wq.shape} Wl={self.Wl.shape} "
                                f"bias={self.bias.shape}")

    @property
    def in_dim(self) -> int:
        return self.Wl.shape[1]

    @property
    def out_dim(self) -> int:
        return self.Wl.shape[0]

    @classmethod
    def zeros(cls, n: int, m: int, requires_grad: bool = False):
        return cls(Tensor(np.zeros((m, n, n)), requires_grad),
                   Tensor(np.zeros((m, n)), requires_grad),
                   Tensor(np.zeros(m), requires_grad))

    @classmethod
    def init(cls, n: int, m: int, rng: np.random.Generator):
        bound = 1.0 / math.sqrt(n)
        return cls(Tensor(rng.uniform(-bound / n, bound / n, (m, n, n)), True),
                   Tensor(rng.uniform(-bound, bound, (m, n)), True),
                   Tensor(np.zeros(m), True))

    def parameters(self) -> dict[str, Tensor]:
        return {"Wq": self.Wq, "Wl": self.Wl, "bias": self.bias}

    def symmetrized(self) -> "FullQuadraticLayer":
        W = self.Wq.data
        return FullQuadraticLayer(Tensor(0.5 * (W + np.swapaxes(W, 1, 2))),
                                  Tensor(self.Wl.data), Tensor(self.bias.data))

    def __call__(self, x: Tensor) -> Tensor:
        return full_quadratic_forward(self, x)


def full_quadratic_forward(layer: FullQuadraticLayer, x: Tensor) -> Tensor:
    if x.shape[-1] != layer.in_dim:
        raise ShapeMismatch(f"x has {x.shape[-1]} features, layer expects {layer.in_dim}")
    lin = matmul(x, permute(layer.Wl, (1, 0)))
    return bilinear(x, layer.Wq) + lin + layer.bias


# ---------------------------------------------------------------- low rank

@dataclass
class LowRankQuadraticTerm:
    """Rank-r factors: ``A (r, n)``, ``B (r, n)``, ``C (m, r)``."""

    A: Tensor
    B: Tensor
    C: Tensor

    def __post_init__(self):
        r, n = self.A.shape
        if self.B.shape != (r, n) or self.C.data.ndim != 2 or self.C.shape[1] != r:
            raise ShapeMismatch(f"inconsistent factors A={self.A.shape} B={self.B.shape} "
                                f"C={self.C.shape}")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def in_dim(self) -> int:
        return self.A.shape[1]

    @property
    def out_dim(self) -> int:
        return self.C.shape[0]

    @classmethod
    def init(cls, n: int, m: int, r: int, rng: np.random.Generator):
        """A, B ~ U(-1/sqrt n, 1/sqrt n); C = 0 so a fresh term outputs zero."""
        bound = 1.0 / math.sqrt(n)
        return cls(Tensor(rng.uniform(-bound, bound, (r, n)), True),
                   Tensor(rng.uniform(-bound, bound, (r, n)), True),
                   Tensor(np.zeros((m, r)), True))

    def parameters(self) -> dict[str, Tensor]:
        return {"A": self.A, "B": self.B, "C": self.C}

    def __call__(self, x: Tensor) -> Tensor:
        return lowrank_quadratic_forward(self, x)


def project_pair(term: LowRankQuadraticTerm, x: Tensor) -> tuple[Tensor, Tensor]:
    if x.shape[-1] != term.in_dim:
        raise ShapeMismatch(f"x has {x.shape[-1]} features, term expects {term.in_dim}")
    return matmul(x, permute(term.A, (1, 0))), matmul(x, permute(term.B, (1, 0)))


def lowrank_quadratic_forward(term: LowRankQuadraticTerm, x: Tensor) -> Tensor:
    u, v = project_pair(term, x)
    return matmul(hadamard(u, v), permute(term.C, (1, 0)))


def expand_lowrank(term: LowRankQuadraticTerm) -> FullQuadraticLayer:
    A, B, C = term.A.data, term.B.data, term.C.data
    wq = np.einsum("ik,kj,kl->ijl", C, A, B)
    n, m = term.in_dim, term.out_dim
    return FullQuadraticLayer(Tensor(wq), Tensor(np.zeros((m, n))), Tensor(np.zeros(m)))


# ---------------------------------------------------------------- accounting

def full_param_count(n: int, m: int) -> int:
    return m * n * n + m * n + m


def lowrank_param_count(n: int, m: int, r: int) -> int:
    return r * (2 * n + m)


def param_count(obj) -> int:
    """Trainable scalar count of a layer, term, or anything with ``parameters()``."""
    if isinstance(obj, FullQuadraticLayer):
        return full_param_count(obj.in_dim, obj.out_dim)
    if isinstance(obj, LowRankQuadraticTerm):
        return lowrank_param_count(obj.in_dim, obj.out_dim, obj.rank)
    if obj is None:
        return 0
    return sum(p.size for p in obj.parameters().values())
