"""Optimisers, the training loop, and the adapter comparison experiments."""
from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np

from .adapter import AdaptedModel, AdapterConfig, attach, merge_report
from .basemodel import BaseModel
from .errors import Diverged, InvalidConfig, NonFinite, TargetUnreached
from .numerics import Tensor, backward, loss as loss_fn, no_grad, zero_grad
from .quadratic import FullQuadraticLayer
from .shiftbench import ShiftBenchmark

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- optimisers

class SGD:
    def __init__(self, params: Mapping[str, Tensor], lr: float, momentum: float = 0.0):
        self.params = OrderedDict(params)
        self.lr, self.momentum = lr, momentum
        self.velocity = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        for k, p in self.params.items():
            if p.grad is None:
                continue
            v = self.momentum * self.velocity[k] + p.grad
            self.velocity[k] = v
            p.assign(p.data - self.lr * v)


class Adam:
    def __init__(self, params: Mapping[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = OrderedDict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p.assign(p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps))


@dataclass
class TrainConfig:
    optimizer: dict = field(default_factory=lambda: {"kind": "adam", "lr": 0.01})
    epochs: int = 50
    batch_size: int = 64
    seed: int = 1
    early_stop: tuple | None = None  # (patience, min_delta)
    loss: str = "mse"
    target: float | None = None  # test loss counted as "reached" for updates-to-target

    def __post_init__(self):
        kind = self.optimizer.get("kind")
        allowed = {"sgd": {"kind", "lr", "momentum"},
                   "adam": {"kind", "lr", "beta1", "beta2", "eps"}}.get(kind)
        if allowed is None:
            raise InvalidConfig(f"unknown optimizer {kind!r}")
        extra = set(self.optimizer) - allowed
        if extra:
            raise InvalidConfig(f"optimizer {kind} does not take {sorted(extra)}")
        lr = self.optimizer.get("lr")
        if lr is None or not math.isfinite(lr) or lr < 0:
            raise InvalidConfig("lr must be finite and >= 0")
        if int(self.epochs) != self.epochs or self.epochs < 0:
            raise InvalidConfig("epochs must be a non-negative integer")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if self.early_stop is not None:
            self.early_stop = tuple(self.early_stop)
            if len(self.early_stop) != 2:
                raise InvalidConfig("early_stop is (patience, min_delta)")

    def make_optimizer(self, params):
        opts = {k: v for k, v in self.optimizer.items() if k != "kind"}
        return (SGD if self.optimizer["kind"] == "sgd" else Adam)(params, **opts)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["early_stop"] = list(self.early_stop) if self.early_stop else None
        return d

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise InvalidConfig(f"unknown train keys {sorted(extra)}")
        return cls(**d)


def optimize(params: Mapping[str, Tensor], objective: Callable[[], Tensor], optimizer: dict,
             steps: int) -> list[float]:
    """Plain full-batch minimisation; returns the loss before each step."""
    opt = TrainConfig(optimizer=dict(optimizer)).make_optimizer(params)
    history = []
    for _ in range(steps):
        zero_grad(list(params.values()))
        val = objective()
        history.append(val.item())
        backward(val)
        opt.step()
    return history


# ---------------------------------------------------------------- reports

def _hash_payload(obj) -> str:
    def enc(o):
        if isinstance(o, float):
            return o.hex() if math.isfinite(o) else repr(o)
        if isinstance(o, dict):
            return {k: enc(v) for k, v in sorted(o.items())}
        if isinstance(o, (list, tuple)):
            return [enc(v) for v in o]
        return o
    return hashlib.sha256(json.dumps(enc(obj), sort_keys=True).encode()).hexdigest()


@dataclass
class TrainReport:
    train_curve: list
    test_curve: list
    final_test_loss: float
    wall_clock: float
    trainable_params: int
    updates: int
    updates_per_epoch: int
    config: dict
    diverged: bool = False
    updates_to_target: int | None = None
    hash: str = ""

    @property
    def epochs_completed(self) -> int:
        return len(self.test_curve)

    def numeric_content(self) -> dict:
        # wall-clock excluded: it is the one field that cannot repeat
        return {"train_curve": self.train_curve, "test_curve": self.test_curve,
                "final_test_loss": self.final_test_loss, "trainable_params": self.trainable_params,
                "updates": self.updates, "updates_per_epoch": self.updates_per_epoch,
                "config": self.config, "diverged": self.diverged,
                "updates_to_target": self.updates_to_target}

    def seal(self) -> "TrainReport":
        self.hash = _hash_payload(self.numeric_content())
        return self

    def to_dict(self) -> dict:
        d = self.numeric_content()
        d["wall_clock"] = self.wall_clock
        d["epochs_completed"] = self.epochs_completed
        d["hash"] = self.hash
        return d


def evaluate(model, x: np.ndarray, y: np.ndarray, kind: str = "mse", batch: int = 4096) -> float:
    """Mean loss over a dataset, chunked, with a fixed reduction order."""
    total, count = 0.0, 0
    with no_grad():
        for i in range(0, x.shape[0], batch):
            xb, yb = x[i:i + batch], y[i:i + batch]
            total += loss_fn(model(Tensor(xb)), yb, kind).item() * xb.shape[0]
            count += xb.shape[0]
    return total / count


def train(model, data: Mapping, cfg: TrainConfig, params: Mapping[str, Tensor] | None = None
          ) -> TrainReport:
    """Minibatch training of ``params`` (default: ``model.trainable_parameters()``).

    ``data`` maps ``"train"`` and ``"test"`` to ``(X, Y)`` arrays.  Raises
    :class:`Diverged` carrying the partial report if the loss goes non-finite.
    """
    params = OrderedDict(model.trainable_parameters() if params is None else params)
    for p in params.values():
        p.requires_grad = True
    opt = cfg.make_optimizer(params)
    x, y = data["train"]
    xt, yt = data["test"]
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(cfg.seed),
                                                                      spawn_key=(1,))))
    n = x.shape[0]
    per_epoch = math.ceil(n / cfg.batch_size)
    report = TrainReport([], [], math.nan, 0.0, sum(p.size for p in params.values()), 0,
                         per_epoch, cfg.to_dict())
    start = time.perf_counter()
    best, stale = math.inf, 0
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            for i in range(0, n, cfg.batch_size):
                idx = order[i:i + cfg.batch_size]
                zero_grad(list(params.values()))
                value = loss_fn(model(Tensor(x[idx])), y[idx], cfg.loss)
                backward(value)
                opt.step()
                report.updates += 1
            # end-of-epoch pass in fixed order, so the curve does not depend on the shuffle
            report.train_curve.append(evaluate(model, x, y, cfg.loss))
            test = evaluate(model, xt, yt, cfg.loss)
            report.test_curve.append(test)
            if cfg.target is not None and report.updates_to_target is None and test <= cfg.target:
                report.updates_to_target = report.updates
            if cfg.early_stop is not None:
                patience, min_delta = cfg.early_stop
                if test < best - min_delta:
                    best, stale = test, 0
                else:
                    stale += 1
                    if stale >= patience:
                        break
    except NonFinite as exc:
        report.diverged = True
        report.wall_clock = time.perf_counter() - start
        report.seal()
        raise Diverged(f"training diverged after {report.updates} updates: {exc}", report) from exc
    report.wall_clock = time.perf_counter() - start
    report.final_test_loss = report.test_curve[-1] if report.test_curve else evaluate(model, xt, yt, cfg.loss)
    if cfg.target is not None and report.updates_to_target is None and not report.test_curve \
            and report.final_test_loss <= cfg.target:
        report.updates_to_target = 0
    return report.seal()


# ---------------------------------------------------------------- protocols

TARGET_FLOOR = 1e-6  # keeps the noiseless bench's target reachable in float64


def default_target(bench: ShiftBenchmark) -> float:
    """``2 sigma^2``, floored so a noiseless bench still has a finite target."""
    return max(2 * bench.sigma ** 2, TARGET_FLOOR)

def base_bytes(base: BaseModel) -> bytes:
    buf = io.BytesIO()
    for name, p in base.params.items():
        buf.write(name.encode())
        buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return buf.getvalue()


def _train_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed),
                                                                      spawn_key=(stream,))))


def pretrain(bench: ShiftBenchmark, cfg: TrainConfig, hidden=(), activation: str = "gelu"
             ) -> tuple[BaseModel, TrainReport]:
    """Fit a fresh MLP base on the pretrain split."""
    base = BaseModel.mlp(bench.n, bench.out_dim, hidden, activation, rng=_train_rng(cfg.seed, 0))
    report = train(base, bench.data("pretrain"), cfg)
    return base, report


def _load_base(base) -> BaseModel:
    from .basemodel import init_primary_from_checkpoint
    from .checkpoint import clone_model

    if isinstance(base, BaseModel):
        return clone_model(base).freeze()
    return init_primary_from_checkpoint(base)


def adapt(base_ckpt, bench: ShiftBenchmark, adapter_cfg: AdapterConfig, train_cfg: TrainConfig
          ) -> tuple[TrainReport, AdaptedModel]:
    """Train a fresh adapter on the downstream split over a frozen base.

    ``base_ckpt`` is a checkpoint path or an in-memory base (copied first).
    """
    base = _load_base(base_ckpt)
    before = base_bytes(base)
    model = attach(base, adapter_cfg, rng=_train_rng(train_cfg.seed, 0))
    report = train(model, bench.data("downstream"), train_cfg)
    if base_bytes(base) != before:
        raise AssertionError("freeze integrity violated: base parameters changed")
    return report, model


@dataclass
class ComparisonRow:
    label: str
    family: str
    rank: int
    kernel: str
    params: int
    trainable_fraction: float
    final_test_loss: float  # median over seeds
    updates_to_target: float  # median over seeds, inf when unreached
    seed_losses: list
    seed_hashes: list
    config: dict

    def to_dict(self):
        return asdict(self)


@dataclass
class ComparisonTable:
    rows: list
    seeds: list
    target: float
    linear_floor: float | None = None
    realizable: float | None = None

    CSV_HEADER = ("label", "family", "rank", "kernel", "params", "trainable_fraction",
                  "final_test_loss", "updates_to_target")

    def row(self, label: str) -> ComparisonRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def to_dict(self):
        return {"seeds": self.seeds, "target": self.target, "linear_floor": self.linear_floor,
                "realizable": self.realizable, "rows": [r.to_dict() for r in self.rows]}

    def csv_rows(self):
        return [[getattr(r, k) for k in self.CSV_HEADER] for r in self.rows]


def compare(bench: ShiftBenchmark, configs, train_cfg: TrainConfig, base=None,
            seeds=(1, 2, 3), labels=None, pretrain_cfg: TrainConfig | None = None
            ) -> ComparisonTable:
    """Train every adapter config on the same frozen base, data, and seeds."""
    from .shiftbench import linear_floor_oracle, realizability_oracle

    configs = list(configs)
    if len(configs) < 2:
        raise InvalidConfig("compare needs at least two adapter configs")
    if base is None:
        base, _ = pretrain(bench, pretrain_cfg or train_cfg)
    target = train_cfg.target if train_cfg.target is not None else default_target(bench)
    labels = list(labels) if labels is not None else [c.label() for c in configs]
    rows = []
    for label, cfg in zip(labels, configs):
        losses, hashes, reached, count, frac = [], [], [], 0, 0.0
        for seed in seeds:
            tc = TrainConfig(**{**train_cfg.to_dict(), "seed": seed, "target": target})
            report, model = adapt(base, bench, cfg, tc)
            losses.append(report.final_test_loss)
            hashes.append(report.hash)
            reached.append(math.inf if report.updates_to_target is None
                           else float(report.updates_to_target))
            eff = merge_report(model)
            count, frac = eff.adapter_params, eff.trainable_fraction
        rows.append(ComparisonRow(label, cfg.family, cfg.rank,
                                  cfg.kernel.kind if cfg.kernel else "-", count, frac,
                                  float(np.median(losses)), float(np.median(reached)),
                                  losses, hashes, cfg.to_dict()))
    r_star = bench.config.shift_rank
    return ComparisonTable(rows, list(seeds), target, linear_floor_oracle(bench),
                           realizability_oracle(bench, r_star))


@dataclass
class SavingsReport:
    scratch_updates: float
    scratch_params: int
    adapt_updates: float
    adapt_params: int
    scratch_param_steps: float
    adapt_param_steps: float
    ratio: float
    target: float
    target_unreached: list
    scratch_final_loss: float
    adapt_final_loss: float

    def to_dict(self):
        return asdict(self)


class ScratchModel:
    """A full quadratic layer (primary linear term plus dense bilinear form)
    trained from random initialisation: the no-reuse baseline."""

    def __init__(self, layer: FullQuadraticLayer):
        self.layer = layer

    def trainable_parameters(self):
        return OrderedDict(self.layer.parameters())

    def __call__(self, x: Tensor) -> Tensor:
        return self.layer(x)


def scratch_model(bench: ShiftBenchmark, seed: int) -> ScratchModel:
    return ScratchModel(FullQuadraticLayer.init(bench.n, bench.out_dim, _train_rng(seed, 2)))


def scratch_vs_adapt(bench: ShiftBenchmark, train_cfg: TrainConfig, base=None,
                     adapter_cfg: AdapterConfig | None = None,
                     scratch_cfg: TrainConfig | None = None,
                     pretrain_cfg: TrainConfig | None = None) -> SavingsReport:
    """Parameter-steps to reach ``2 sigma^2`` test MSE: from scratch vs. adapting."""
    adapter_cfg = adapter_cfg or AdapterConfig("quadratic", bench.config.shift_rank)
    target = train_cfg.target if train_cfg.target is not None else default_target(bench)
    if base is None:
        base, _ = pretrain(bench, pretrain_cfg or train_cfg)
    scratch_cfg = scratch_cfg or train_cfg
    sc = TrainConfig(**{**scratch_cfg.to_dict(), "target": target})
    model = scratch_model(bench, sc.seed)
    s_report = train(model, bench.data("downstream"), sc)
    ac = TrainConfig(**{**train_cfg.to_dict(), "target": target})
    a_report, _ = adapt(base, bench, adapter_cfg, ac)

    unreached = [name for name, rep in (("scratch", s_report), ("adapt", a_report))
                 if rep.updates_to_target is None]
    s_up = math.inf if s_report.updates_to_target is None else s_report.updates_to_target
    a_up = math.inf if a_report.updates_to_target is None else a_report.updates_to_target
    s_steps = s_up * s_report.trainable_params
    a_steps = a_up * a_report.trainable_params
    if unreached:
        log.warning("%s", TargetUnreached(f"target {target:g} not reached by {', '.join(unreached)}"))
        ratio = math.inf
    elif s_steps == 0:
        ratio = 0.0 if a_steps == 0 else math.inf
    else:
        ratio = a_steps / s_steps
    return SavingsReport(s_up, s_report.trainable_params, a_up, a_report.trainable_params,
                         s_steps, a_steps, ratio, target, unreached,
                         s_report.final_test_loss, a_report.final_test_loss)
