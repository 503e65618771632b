"""Adapter families and the attach/freeze protocol.

An adapted layer computes ``base_layer(x) + alpha * adapter(x)`` where the
adapter sees the same input as the base layer.  Output factors (``Bup`` for
linear adapters, ``C`` for quadratic ones) start at zero, so attaching is a
no-op until training moves them.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .basemodel import BaseModel
from .errors import EmptyMask, InvalidConfig, ShapeMismatch, WidthMismatch
from .numerics import (
    Tensor, conv2d_depthwise, hadamard, matmul, permute, scale,
)
from .quadratic import (
    KernelMap, LowRankQuadraticTerm, kernel_apply, lowrank_param_count, project_pair,
)

FAMILIES = ("linear", "quadratic", "kernel_quadratic")


@dataclass(frozen=True)
class SparsityMask:
    """Static on/off pattern over rank channels.

    Give either an explicit 0/1 ``pattern`` or a ``stride`` k (channels
    0, k, 2k, ... active).
    """

    pattern: tuple | None = None
    stride: int | None = None

    def __post_init__(self):
        if (self.pattern is None) == (self.stride is None):
            raise InvalidConfig("mask needs exactly one of pattern / stride")
        if self.pattern is not None:
            pat = tuple(float(v) for v in self.pattern)
            if any(v not in (0.0, 1.0) for v in pat):
                raise InvalidConfig("mask pattern must be binary")
            if not any(pat):
                raise EmptyMask("mask has no active channel")
            object.__setattr__(self, "pattern", pat)
        elif int(self.stride) < 1:
            raise InvalidConfig("mask stride must be >= 1")

    @classmethod
    def dense(cls, pattern):
        return cls(pattern=tuple(pattern))

    @classmethod
    def strided(cls, k: int):
        return cls(stride=int(k))

    def vector(self, rank: int) -> np.ndarray:
        if self.pattern is not None:
            if len(self.pattern) != rank:
                raise ShapeMismatch(f"mask length {len(self.pattern)} != rank {rank}")
            return np.array(self.pattern)
        vec = np.zeros(rank)
        vec[::self.stride] = 1.0
        return vec

    def to_dict(self) -> dict:
        return {"pattern": list(self.pattern)} if self.pattern is not None else {"stride": self.stride}

    @classmethod
    def from_dict(cls, d) -> "SparsityMask":
        if isinstance(d, (list, tuple)):
            return cls.dense(d)
        extra = set(d) - {"pattern", "stride"}
        if extra:
            raise InvalidConfig(f"unknown mask keys {sorted(extra)}")
        return cls(pattern=d.get("pattern"), stride=d.get("stride"))


@dataclass
class AdapterConfig:
    family: str = "quadratic"
    rank: int = 1
    kernel: KernelMap | None = None
    alpha: float = 1.0
    mask: SparsityMask | None = None
    attach_points: list = field(default_factory=lambda: ["fc0"])
    in_dim: int | None = None  # optional width declarations, checked at attach
    out_dim: int | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidConfig(f"unknown adapter family {self.family!r}")
        if isinstance(self.rank, bool) or int(self.rank) != self.rank or self.rank < 1:
            raise InvalidConfig("rank must be a positive integer")
        if not math.isfinite(self.alpha):
            raise InvalidConfig("alpha must be finite")
        if self.family == "linear" and (self.kernel is not None or self.mask is not None):
            raise InvalidConfig("linear adapters take neither kernel nor mask")
        if self.family == "quadratic" and self.kernel is not None:
            raise InvalidConfig("use family kernel_quadratic to set a kernel")
        if self.family == "kernel_quadratic" and self.kernel is None:
            self.kernel = KernelMap.product()
        if not self.attach_points:
            raise InvalidConfig("at least one attach point is required")
        if self.mask is not None:
            self.mask.vector(self.rank)
        self.attach_points = list(self.attach_points)

    def to_dict(self) -> dict:
        d = {"family": self.family, "rank": self.rank, "alpha": self.alpha,
             "attach_points": list(self.attach_points)}
        if self.kernel is not None:
            d["kernel"] = self.kernel.to_dict()
        if self.mask is not None:
            d["mask"] = self.mask.to_dict()
        if self.in_dim is not None:
            d["in_dim"] = self.in_dim
        if self.out_dim is not None:
            d["out_dim"] = self.out_dim
        return d

    @classmethod
    def from_dict(cls, d) -> "AdapterConfig":
        d = dict(d)
        extra = set(d) - {"family", "rank", "kernel", "alpha", "mask", "attach_points",
                          "in_dim", "out_dim"}
        if extra:
            raise InvalidConfig(f"unknown adapter keys {sorted(extra)}")
        if d.get("kernel") is not None:
            d["kernel"] = KernelMap.from_dict(d["kernel"])
        if d.get("mask") is not None:
            d["mask"] = SparsityMask.from_dict(d["mask"])
        return cls(**d)

    def label(self) -> str:
        k = self.kernel.kind if self.kernel is not None else "-"
        return f"{self.family}/r{self.rank}/{k}"


def budget_matched_linear_rank(r: int, n: int, m: int) -> int:
    """Rank of the linear adapter whose budget covers a rank-r quadratic one."""
    return math.ceil(r * (2 * n + m) / (n + m))


# ---------------------------------------------------------------- forwards

def _masked(z: Tensor, mask: SparsityMask | None, axis: int = -1) -> Tensor:
    if mask is None:
        return z
    vec = mask.vector(z.shape[axis])
    shape = [1] * z.data.ndim
    shape[axis] = vec.size
    return hadamard(z, Tensor(np.broadcast_to(vec.reshape(shape), z.shape)))


def linear_adapter_forward(A: Tensor, Bup: Tensor, x: Tensor) -> Tensor:
    """``Bup @ (A @ x)``; A is (r, n), Bup is (m, r)."""
    if A.data.ndim != 2 or Bup.data.ndim != 2 or Bup.shape[1] != A.shape[0]:
        raise ShapeMismatch(f"linear adapter A={A.shape} Bup={Bup.shape}")
    if x.shape[-1] != A.shape[1]:
        raise ShapeMismatch(f"x has {x.shape[-1]} features, adapter expects {A.shape[1]}")
    return matmul(matmul(x, permute(A, (1, 0))), permute(Bup, (1, 0)))


def quadratic_adapter_forward(term: LowRankQuadraticTerm, mask: SparsityMask | None,
                              x: Tensor) -> Tensor:
    """``C @ (mask * (A x) * (B x))``."""
    u, v = project_pair(term, x)
    return matmul(_masked(hadamard(u, v), mask), permute(term.C, (1, 0)))


def kernel_adapter_forward(term: LowRankQuadraticTerm, kernel: KernelMap,
                           mask: SparsityMask | None, x: Tensor) -> Tensor:
    """``C @ (mask * k(A x, B x))``."""
    u, v = project_pair(term, x)
    return matmul(_masked(kernel_apply(kernel, u, v), mask), permute(term.C, (1, 0)))


# ---------------------------------------------------------------- modules

class Adapter:
    """One adapter instance at one attach point."""

    family: str
    kind: str  # "dense" or "conv"

    def __init__(self, family, params: "OrderedDict[str, Tensor]", kind="dense",
                 kernel: KernelMap | None = None, mask: SparsityMask | None = None):
        self.family = family
        self.kind = kind
        self.params = OrderedDict(params)
        self.kernel = kernel
        self.mask = mask
        self._check()

    def _check(self):
        p = self.params
        if self.family == "linear":
            if list(p) != ["A", "Bup"] or p["Bup"].shape[1] != p["A"].shape[0]:
                raise ShapeMismatch(f"bad linear adapter tensors {[t.shape for t in p.values()]}")
        elif list(p) != ["A", "B", "C"] or p["A"].shape != p["B"].shape \
                or p["C"].shape[1] != p["A"].shape[0]:
            raise ShapeMismatch(f"bad quadratic adapter tensors {[t.shape for t in p.values()]}")

    @property
    def rank(self) -> int:
        return self.params["A"].shape[0]

    @property
    def widths(self) -> tuple[int, int]:
        out = self.params["Bup" if self.family == "linear" else "C"].shape[0]
        if self.kind == "conv":
            return self.rank, out
        return self.params["A"].shape[1], out

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return self.params

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def term(self) -> LowRankQuadraticTerm:
        return LowRankQuadraticTerm(self.params["A"], self.params["B"], self.params["C"])

    def __call__(self, x: Tensor) -> Tensor:
        if self.kind == "conv":
            return self._conv_forward(x)
        if self.family == "linear":
            return linear_adapter_forward(self.params["A"], self.params["Bup"], x)
        if self.family == "quadratic":
            return quadratic_adapter_forward(self.term(), self.mask, x)
        return kernel_adapter_forward(self.term(), self.kernel, self.mask, x)

    def _conv_forward(self, x: Tensor) -> Tensor:
        # depthwise pair -> channelwise kernel -> pointwise mix
        p = self.params
        chan_axis = x.data.ndim - 3
        if self.family == "linear":
            z, out_w = conv2d_depthwise(x, p["A"]), p["Bup"]
        else:
            u, v = conv2d_depthwise(x, p["A"]), conv2d_depthwise(x, p["B"])
            z = hadamard(u, v) if self.family == "quadratic" else kernel_apply(self.kernel, u, v)
            z = _masked(z, self.mask, axis=chan_axis)
            out_w = p["C"]
        order = (1, 2, 0) if x.data.ndim == 3 else (0, 2, 3, 1)
        back = (2, 0, 1) if x.data.ndim == 3 else (0, 3, 1, 2)
        return permute(matmul(permute(z, order), permute(out_w, (1, 0))), back)

    @classmethod
    def create(cls, cfg: AdapterConfig, in_dim: int, out_dim: int, kind: str = "dense",
               rng: np.random.Generator | None = None, kernel_size: int = 3) -> "Adapter":
        rng = np.random.default_rng(0) if rng is None else rng
        r = cfg.rank
        if kind == "conv":
            fan = kernel_size * kernel_size
            shape = (r, kernel_size, kernel_size)
        else:
            fan = in_dim
            shape = (r, in_dim)
        bound = 1.0 / math.sqrt(fan)
        if cfg.family == "linear":
            params = OrderedDict(A=Tensor(rng.uniform(-bound, bound, shape), True),
                                 Bup=Tensor(np.zeros((out_dim, r)), True))
        else:
            params = OrderedDict(A=Tensor(rng.uniform(-bound, bound, shape), True),
                                 B=Tensor(rng.uniform(-bound, bound, shape), True),
                                 C=Tensor(np.zeros((out_dim, r)), True))
        return cls(cfg.family, params, kind, cfg.kernel, cfg.mask)


class AdaptedModel:
    """Frozen base plus parallel adapters: ``layer(x) + alpha * adapter(x)``."""

    def __init__(self, base: BaseModel, adapters: "OrderedDict[str, Adapter]",
                 config: AdapterConfig):
        self.base = base
        self.adapters = OrderedDict(adapters)
        self.config = config

    @property
    def alpha(self) -> float:
        return self.config.alpha

    def _taps(self):
        alpha = self.alpha
        return {name: (lambda inp, a=ad: scale(a(inp), alpha))
                for name, ad in self.adapters.items()}

    def __call__(self, x) -> Tensor:
        return self.base(x, self._taps() if self.adapters else None)

    def trainable_parameters(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for point, ad in self.adapters.items():
            for name, t in ad.parameters().items():
                out[f"{point}/{name}"] = t
        return out

    def parameters(self):
        return self.trainable_parameters()

    def adapter_param_count(self) -> int:
        return sum(a.param_count() for a in self.adapters.values())

    def detach_adapters(self) -> BaseModel:
        return self.base


def _check_widths(base: BaseModel, point: str, adapter: Adapter):
    want = base.layer_widths(point)
    if adapter.widths != want:
        raise WidthMismatch(f"attach point {point!r}: base layer widths {want} "
                            f"!= adapter widths {adapter.widths}")


def attach(base: BaseModel, cfg: AdapterConfig, rng: np.random.Generator | None = None,
           adapters: dict | None = None) -> AdaptedModel:
    """Freeze ``base`` and attach fresh (or given) adapters at ``cfg.attach_points``."""
    rng = np.random.default_rng(0) if rng is None else rng
    built = OrderedDict()
    for point in cfg.attach_points:
        in_w, out_w = base.layer_widths(point)
        if (cfg.in_dim is not None and cfg.in_dim != in_w) or \
                (cfg.out_dim is not None and cfg.out_dim != out_w):
            raise WidthMismatch(f"attach point {point!r}: base layer widths ({in_w}, {out_w}) "
                                f"!= configured ({cfg.in_dim}, {cfg.out_dim})")
        if adapters is not None:
            ad = adapters[point]
        else:
            kind = "conv" if base.kind == "convnext_tiny_toy" else "dense"
            ad = Adapter.create(cfg, in_w, out_w, kind, rng,
                                base.config.get("kernel_size", 3))
        _check_widths(base, point, ad)
        built[point] = ad
    base.freeze()
    return AdaptedModel(base, built, cfg)


@dataclass(frozen=True)
class EfficiencyReport:
    base_params: int
    adapter_params: int
    trainable_fraction: float

    def to_dict(self):
        return {"base_params": self.base_params, "adapter_params": self.adapter_params,
                "trainable_fraction": self.trainable_fraction}


def merge_report(adapted: AdaptedModel | BaseModel) -> EfficiencyReport:
    if isinstance(adapted, BaseModel):
        return EfficiencyReport(adapted.param_count(), 0, 0.0)
    base = adapted.base.param_count()
    extra = adapted.adapter_param_count()
    return EfficiencyReport(base, extra, extra / (extra + base) if extra else 0.0)


def adapter_param_count(family: str, n: int, m: int, r: int) -> int:
    """Closed-form dense-adapter budget."""
    if family == "linear":
        return r * (n + m)
    return lowrank_param_count(n, m, r)
