"""Frozen primary networks: an MLP stack and a toy ConvNeXt block stack."""
from __future__ import annotations

import math
from collections import OrderedDict
from typing import Callable, Mapping

import numpy as np

from .errors import FrozenParameterError, InvalidConfig, ShapeMismatch, UnknownAttachPoint
from .numerics import (
    Tensor, activation, add, conv2d_depthwise, gelu, layer_norm, linear, permute, reshape,
)

BASE_KINDS = ("mlp", "convnext_tiny_toy")

# A tap receives the input of a named layer and returns a tensor that is
# added to that layer's output.
Tap = Callable[[Tensor], Tensor]


class BaseModel:
    """Named-parameter network.

    mlp:               fc0 -> act -> fc1 -> act -> ... -> fc{L-1}
    convnext_tiny_toy: block{i}: x + contract(GELU(expand(LN(dwconv(x)))))

    Attach points are ``fc{i}`` for the MLP and ``block{i}.dw`` (the depthwise
    stage) for the ConvNeXt stack.
    """

    def __init__(self, kind: str, config: Mapping, params: "OrderedDict[str, Tensor]"):
        if kind not in BASE_KINDS:
            raise InvalidConfig(f"unknown base kind {kind!r}")
        self.kind = kind
        self.config = dict(config)
        self.params: OrderedDict[str, Tensor] = OrderedDict(params)
        self.frozen = False
        expected = _param_shapes(kind, self.config)
        if list(expected) != list(self.params):
            raise InvalidConfig(f"parameter names {list(self.params)} do not match {list(expected)}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeMismatch(f"{name}: expected {shape}, got {self.params[name].shape}")

    # ---- construction

    @classmethod
    def mlp(cls, in_dim: int, out_dim: int, hidden=(), activation: str = "gelu",
            rng: np.random.Generator | None = None) -> "BaseModel":
        config = {"in_dim": int(in_dim), "hidden": [int(h) for h in hidden],
                  "out_dim": int(out_dim), "activation": activation}
        return cls._init("mlp", config, rng)

    @classmethod
    def convnext(cls, channels: int = 8, blocks: int = 2, kernel_size: int = 3,
                 expansion: int = 4, eps: float = 1e-6,
                 rng: np.random.Generator | None = None) -> "BaseModel":
        config = {"channels": int(channels), "blocks": int(blocks),
                  "kernel_size": int(kernel_size), "expansion": int(expansion), "eps": float(eps)}
        return cls._init("convnext_tiny_toy", config, rng)

    @classmethod
    def from_config(cls, kind: str, config: Mapping, rng=None) -> "BaseModel":
        return cls._init(kind, dict(config), rng)

    @classmethod
    def _init(cls, kind, config, rng):
        rng = np.random.default_rng(0) if rng is None else rng
        params = OrderedDict()
        for name, shape in _param_shapes(kind, config).items():
            leaf = name.rsplit(".", 1)[1]
            if leaf == "bias" or leaf == "beta":
                arr = np.zeros(shape)
            elif leaf == "gamma":
                arr = np.ones(shape)
            else:
                fan_in = int(np.prod(shape[1:]))
                bound = 1.0 / math.sqrt(fan_in)
                arr = rng.uniform(-bound, bound, shape)
            params[name] = Tensor(arr, requires_grad=True)
        return cls(kind, config, params)

    # ---- registry

    @property
    def layer_names(self) -> list[str]:
        if self.kind == "mlp":
            return [f"fc{i}" for i in range(len(self.config["hidden"]) + 1)]
        return [f"block{i}.dw" for i in range(self.config["blocks"])]

    def layer_widths(self, name: str) -> tuple[int, int]:
        """(input width, output width) of an attachable layer."""
        if name not in self.layer_names:
            raise UnknownAttachPoint(f"unknown attach point {name!r}; "
                                     f"available: {', '.join(self.layer_names)}")
        if self.kind == "mlp":
            out_dim, in_dim = self.params[f"{name}.weight"].shape
            return in_dim, out_dim
        c = self.config["channels"]
        return c, c

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return self.params

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def freeze(self) -> "BaseModel":
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def trainable_parameters(self) -> "OrderedDict[str, Tensor]":
        if self.frozen:
            raise FrozenParameterError("base model is frozen; its parameters cannot be trained")
        for p in self.params.values():
            p.requires_grad = True
        return self.params

    def signature(self) -> dict:
        return {"kind": self.kind, "config": self.config,
                "tensors": [[n, list(p.shape)] for n, p in self.params.items()]}

    # ---- evaluation

    def __call__(self, x, taps: Mapping[str, Tap] | None = None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if self.kind == "mlp":
            return mlp_forward(self, x, taps)
        return convnext_forward(self, x, taps)


def _param_shapes(kind: str, config: Mapping) -> "OrderedDict[str, tuple]":
    shapes = OrderedDict()
    if kind == "mlp":
        try:
            dims = [config["in_dim"], *config["hidden"], config["out_dim"]]
        except KeyError as exc:
            raise InvalidConfig(f"mlp config missing {exc}") from exc
        if any(int(d) < 1 for d in dims):
            raise InvalidConfig("mlp widths must be positive")
        if config.get("activation", "gelu") not in ("gelu", "relu"):
            raise InvalidConfig(f"unknown activation {config.get('activation')!r}")
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            shapes[f"fc{i}.weight"] = (b, a)
            shapes[f"fc{i}.bias"] = (b,)
    elif kind == "convnext_tiny_toy":
        c, k, e = config["channels"], config["kernel_size"], config["expansion"]
        if k % 2 == 0:
            raise InvalidConfig("kernel_size must be odd")
        for i in range(config["blocks"]):
            p = f"block{i}"
            shapes[f"{p}.dw.weight"] = (c, k, k)
            shapes[f"{p}.dw.bias"] = (c,)
            shapes[f"{p}.ln.gamma"] = (c,)
            shapes[f"{p}.ln.beta"] = (c,)
            shapes[f"{p}.expand.weight"] = (e * c, c)
            shapes[f"{p}.expand.bias"] = (e * c,)
            shapes[f"{p}.contract.weight"] = (c, e * c)
            shapes[f"{p}.contract.bias"] = (c,)
    else:
        raise InvalidConfig(f"unknown base kind {kind!r}")
    return shapes


def _tap(taps, name, inp, out):
    if taps and name in taps:
        return add(out, taps[name](inp))
    return out


def mlp_forward(model: BaseModel, x: Tensor, taps: Mapping[str, Tap] | None = None) -> Tensor:
    if model.kind != "mlp":
        raise InvalidConfig("mlp_forward needs an mlp base")
    if x.shape[-1] != model.config["in_dim"]:
        raise ShapeMismatch(f"input width {x.shape[-1]} != {model.config['in_dim']}")
    names = model.layer_names
    h = x
    for i, name in enumerate(names):
        out = linear(h, model.params[f"{name}.weight"], model.params[f"{name}.bias"])
        out = _tap(taps, name, h, out)
        h = activation(out, model.config["activation"]) if i < len(names) - 1 else out
    return h


def convnext_block_forward(model: BaseModel, x: Tensor, index: int = 0,
                           taps: Mapping[str, Tap] | None = None) -> Tensor:
    """One block on ``(C, H, W)`` or ``(B, C, H, W)`` input."""
    if model.kind != "convnext_tiny_toy":
        raise InvalidConfig("convnext_block_forward needs a convnext base")
    c = model.config["channels"]
    if x.data.ndim not in (3, 4) or x.shape[-3] != c:
        raise ShapeMismatch(f"expected (..., {c}, H, W), got {x.shape}")
    p = model.params
    pre = f"block{index}"
    d = add(conv2d_depthwise(x, p[f"{pre}.dw.weight"]), reshape(p[f"{pre}.dw.bias"], (c, 1, 1)))
    d = _tap(taps, f"{pre}.dw", x, d)
    order = (1, 2, 0) if x.data.ndim == 3 else (0, 2, 3, 1)
    back = (2, 0, 1) if x.data.ndim == 3 else (0, 3, 1, 2)
    h = permute(d, order)
    h = layer_norm(h, p[f"{pre}.ln.gamma"], p[f"{pre}.ln.beta"], model.config["eps"])
    h = gelu(linear(h, p[f"{pre}.expand.weight"], p[f"{pre}.expand.bias"]))
    h = linear(h, p[f"{pre}.contract.weight"], p[f"{pre}.contract.bias"])
    return add(x, permute(h, back))


def convnext_forward(model: BaseModel, x: Tensor, taps: Mapping[str, Tap] | None = None) -> Tensor:
    for i in range(model.config["blocks"]):
        x = convnext_block_forward(model, x, i, taps)
    return x


def init_primary_from_checkpoint(path) -> BaseModel:
    """Load a base checkpoint bit-exactly and return it frozen."""
    from .checkpoint import load_checkpoint
    from .errors import ManifestMismatch

    model = load_checkpoint(path)
    if not isinstance(model, BaseModel):
        raise ManifestMismatch(f"{path} does not hold a base model")
    return model.freeze()
