"""Teacher-student benchmark with a known non-linear distribution shift.

Pretrain law:    y = T0(x) + noise
Downstream law:  y = T0(x) + eps * S(x) + noise

``T0`` is a random affine map.  The shift ``S`` is either the rank-r*
quadratic ``C* ((A* x) * (B* x))`` (``shift_kind="quadratic"``) or its
tanh-warped variant ``C* tanh(warp * (A* x) * (B* x))``.  Inputs are
uniform on ``[-1, 1]^n``; noise is ``Normal(0, sigma^2)``.

Randomness comes from numpy's PCG64 seeded through ``SeedSequence`` with a
fixed spawn key per stream (teacher, shift, and x / noise per split), so
growing one split never changes samples already drawn in any split.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfig, SingularSystem
from .numerics import Tensor
from .quadratic import LowRankQuadraticTerm

log = logging.getLogger(__name__)

SPLITS = ("pretrain_train", "pretrain_test", "downstream_train", "downstream_test")
SHIFT_KINDS = ("quadratic", "tanh_warp")

_STREAM_TEACHER = 0
_STREAM_SHIFT = 1
_STREAM_SPLIT0 = 2


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


@dataclass
class BenchConfig:
    seed: int = 0
    n: int = 8
    out_dim: int = 8
    shift_rank: int = 2
    shift_strength: float = 0.5
    noise: float = 0.01
    shift_kind: str = "quadratic"
    warp: float = 2.0
    pretrain_size: int = 4096
    train_size: int = 4096
    test_size: int = 4096

    def __post_init__(self):
        for name in ("n", "out_dim", "shift_rank", "pretrain_size", "train_size", "test_size"):
            v = getattr(self, name)
            if isinstance(v, bool) or int(v) != v or v < 1:
                raise InvalidConfig(f"{name} must be a positive integer, got {v!r}")
        if self.shift_rank > self.n:
            raise InvalidConfig("shift_rank must not exceed n")
        if self.shift_kind not in SHIFT_KINDS:
            raise InvalidConfig(f"unknown shift_kind {self.shift_kind!r}")
        if not (math.isfinite(self.shift_strength) and math.isfinite(self.warp)):
            raise InvalidConfig("shift_strength and warp must be finite")
        if not (self.noise >= 0 and math.isfinite(self.noise)):
            raise InvalidConfig("noise must be finite and >= 0")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise InvalidConfig("seed must fit in 64 unsigned bits")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d) -> "BenchConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise InvalidConfig(f"unknown bench keys {sorted(extra)}")
        return cls(**d)


@dataclass
class ShiftBenchmark:
    config: BenchConfig
    teacher_weight: np.ndarray  # (m, n)
    teacher_bias: np.ndarray  # (m,)
    shift_term: LowRankQuadraticTerm
    splits: dict = field(default_factory=dict)  # name -> (X, Y)

    @property
    def sigma(self) -> float:
        return self.config.noise

    @property
    def n(self) -> int:
        return self.config.n

    @property
    def out_dim(self) -> int:
        return self.config.out_dim

    def teacher(self, x: np.ndarray) -> np.ndarray:
        return x @ self.teacher_weight.T + self.teacher_bias

    def shift(self, x: np.ndarray) -> np.ndarray:
        A, B, C = (t.data for t in (self.shift_term.A, self.shift_term.B, self.shift_term.C))
        z = (x @ A.T) * (x @ B.T)
        if self.config.shift_kind == "tanh_warp":
            z = np.tanh(self.config.warp * z)
        return z @ C.T

    def generator(self, x: np.ndarray) -> np.ndarray:
        """Noise-free downstream law."""
        return self.teacher(x) + self.config.shift_strength * self.shift(x)

    def data(self, phase: str) -> dict:
        """``{"train": (X, Y), "test": (X, Y)}`` for ``pretrain`` or ``downstream``."""
        return {"train": self.splits[f"{phase}_train"], "test": self.splits[f"{phase}_test"]}

    def classification_labels(self, split: str = "downstream_test") -> np.ndarray:
        """Binary variant: sign of the first output of the noisy targets."""
        return (self.splits[split][1][:, 0] > 0).astype(np.int64)

    def tensors(self) -> dict:
        out = {"teacher.weight": self.teacher_weight, "teacher.bias": self.teacher_bias,
               "shift.A": self.shift_term.A.data, "shift.B": self.shift_term.B.data,
               "shift.C": self.shift_term.C.data}
        for name in SPLITS:
            out[f"{name}.x"], out[f"{name}.y"] = self.splits[name]
        return out


def generate(config: BenchConfig | None = None, **overrides) -> ShiftBenchmark:
    if config is None:
        config = BenchConfig(**overrides)
    elif overrides:
        config = BenchConfig(**{**config.to_dict(), **overrides})
    n, m, r = config.n, config.out_dim, config.shift_rank
    seed = int(config.seed)

    rt = _stream(seed, _STREAM_TEACHER)
    w0 = rt.standard_normal((m, n)) * math.sqrt(3.0 / n)
    b0 = rt.standard_normal(m) * 0.1
    rs = _stream(seed, _STREAM_SHIFT)
    a = rs.standard_normal((r, n)) * math.sqrt(3.0 / n)
    b = rs.standard_normal((r, n)) * math.sqrt(3.0 / n)
    c = rs.standard_normal((m, r)) / math.sqrt(r)
    bench = ShiftBenchmark(config, w0, b0, LowRankQuadraticTerm(Tensor(a), Tensor(b), Tensor(c)))

    sizes = {"pretrain_train": config.pretrain_size, "pretrain_test": config.test_size,
             "downstream_train": config.train_size, "downstream_test": config.test_size}
    for i, name in enumerate(SPLITS):
        size = sizes[name]
        x = _stream(seed, _STREAM_SPLIT0 + i, 0).uniform(-1.0, 1.0, (size, n))
        eps = _stream(seed, _STREAM_SPLIT0 + i, 1).standard_normal((size, m))
        clean = bench.teacher(x) if name.startswith("pretrain") else bench.generator(x)
        bench.splits[name] = (x, clean + config.noise * eps)
    return bench


def _mse(pred, y) -> float:
    return float(np.mean((pred - y) ** 2))


def affine_fit(x: np.ndarray, y: np.ndarray, ridge: float = 1e-8) -> np.ndarray:
    """Least-squares affine map; returns ``(n + 1, m)`` coefficients, bias last."""
    design = np.hstack([x, np.ones((x.shape[0], 1))])
    gram = design.T @ design
    if np.linalg.matrix_rank(gram) < gram.shape[0]:
        log.warning("%s", SingularSystem("rank-deficient design; solving with ridge %g" % ridge))
    return np.linalg.solve(gram + ridge * np.eye(gram.shape[0]), design.T @ y)


def linear_floor_oracle(bench: ShiftBenchmark) -> float:
    """Test MSE of the best affine predictor fit on the downstream train split."""
    x, y = bench.splits["downstream_train"]
    if x.shape[0] == 0:
        raise InvalidConfig("downstream train split is empty")
    coef = affine_fit(x, y)
    xt, yt = bench.splits["downstream_test"]
    return _mse(np.hstack([xt, np.ones((xt.shape[0], 1))]) @ coef, yt)


def realizability_oracle(bench: ShiftBenchmark, r: int) -> float:
    """Test MSE of the true downstream generator (reachable by rank r >= r*)."""
    if r < bench.config.shift_rank:
        raise InvalidConfig(f"rank {r} < shift rank {bench.config.shift_rank}")
    xt, yt = bench.splits["downstream_test"]
    return _mse(bench.generator(xt), yt)


def shift_energy(bench: ShiftBenchmark, split: str = "downstream_train") -> float:
    """Empirical mean of the squared (unscaled) shift over a split."""
    return float(np.mean(bench.shift(bench.splits[split][0]) ** 2))
