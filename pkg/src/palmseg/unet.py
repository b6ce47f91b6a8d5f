"""Symmetric U-Net with a Context Fusion Module at the bottleneck.

Layout for ``depth`` encoder levels and ``base`` channels::

    enc{i}:      conv3x3(c_in -> c_i) relu, conv3x3(c_i -> c_i) relu, maxpool2     c_i = base * 2**i
    bottleneck:  conv3x3(c_{d-1} -> c_d) relu, conv3x3(c_d -> c_d) relu, CFM
    dec{i}:      upsample2, conv3x3(c_{i+1} -> c_i) relu, concat(skip_i),
                 conv3x3(2*c_i -> c_i) relu, conv3x3(c_i -> c_i) relu
    head:        conv1x1(base -> out) sigmoid
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import checkpoint
from .cfm import CFMWeights, cfm_forward
from .errors import ConfigError, DimensionError
from .nn import ConvParams
from .tensor import Tensor, concat_channels, maxpool2, precision, relu, sigmoid, upsample2


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 4
    base_channels: int = 32
    cfm_reduction: int = 4
    in_channels: int = 1
    out_channels: int = 1
    use_cfm: bool = True

    def validate(self) -> None:
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive")
        top = self.base_channels * 2**self.depth
        if self.use_cfm and (self.cfm_reduction < 1 or top % self.cfm_reduction):
            raise ConfigError(f"cfm_reduction {self.cfm_reduction} does not divide bottleneck width {top}")

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class Model:
    """Named parameter tensors plus the config that built them."""

    def __init__(self, config: UNetConfig, convs: dict[str, ConvParams], cfm: CFMWeights | None):
        self.config = config
        self.convs = convs
        self.cfm = cfm

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, conv in self.convs.items():
            out.update(conv.named(name))
        if self.cfm is not None:
            out.update(self.cfm.named_parameters("cfm"))
        return out

    @property
    def params(self) -> dict[str, Tensor]:
        return self.named_parameters()

    def __call__(self, x: Tensor) -> Tensor:
        return forward(self, x)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.named_parameters().items():
            p.data[...] = state[k]

    def astype(self, dtype) -> "Model":
        """A copy of the model with every parameter cast to ``dtype``."""
        convs = {k: ConvParams(c.weight.astype(dtype), c.bias.astype(dtype)) for k, c in self.convs.items()}
        cfm = None
        if self.cfm is not None:
            cast = {b: ConvParams(getattr(self.cfm, b).weight.astype(dtype), getattr(self.cfm, b).bias.astype(dtype))
                    for b in ("ctx_proj", "left_a", "left_b", "right_a", "right_b")}
            cfm = CFMWeights(reduction=self.cfm.reduction, **cast)
        return Model(self.config, convs, cfm)

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None


def _layer_shapes(config: UNetConfig) -> list[tuple[str, int, int, int]]:
    # (name, cin, cout, k) in construction order
    layers = []
    cin = config.in_channels
    for i in range(config.depth):
        c = config.channels(i)
        layers += [(f"enc{i}.conv1", cin, c, 3), (f"enc{i}.conv2", c, c, 3)]
        cin = c
    top = config.channels(config.depth)
    layers += [("bottleneck.conv1", cin, top, 3), ("bottleneck.conv2", top, top, 3)]
    for i in reversed(range(config.depth)):
        c = config.channels(i)
        layers += [(f"dec{i}.up", 2 * c, c, 3), (f"dec{i}.conv1", 2 * c, c, 3), (f"dec{i}.conv2", c, c, 3)]
    layers.append(("head", config.base_channels, config.out_channels, 1))
    return layers


def expected_shapes(config: UNetConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for name, cin, cout, k in _layer_shapes(config):
        shapes[f"{name}.weight"] = (cout, cin, k, k)
        shapes[f"{name}.bias"] = (cout,)
    if config.use_cfm:
        top = config.channels(config.depth)
        hidden = top // config.cfm_reduction
        for branch, cin, cout in (("ctx_proj", top, 1), ("left_a", top, hidden), ("left_b", hidden, top),
                                  ("right_a", top, hidden), ("right_b", hidden, top)):
            shapes[f"cfm.{branch}.weight"] = (cout, cin, 1, 1)
            shapes[f"cfm.{branch}.bias"] = (cout,)
    return shapes


def build(config: UNetConfig = UNetConfig(), seed: int = 0) -> Model:
    """Initialise a model; identical (config, seed) give bit-identical parameters."""
    config.validate()
    convs = {name: ConvParams.init(name, cin, cout, k, seed) for name, cin, cout, k in _layer_shapes(config)}
    cfm = CFMWeights.init(config.channels(config.depth), config.cfm_reduction, seed) if config.use_cfm else None
    return Model(config, convs, cfm)


def _block(x: Tensor, model: Model, prefix: str) -> Tensor:
    x = relu(model.convs[f"{prefix}.conv1"](x))
    return relu(model.convs[f"{prefix}.conv2"](x))


def forward(model: Model, x: Tensor) -> Tensor:
    """Per-pixel line probabilities, shape (N, out_channels, H, W)."""
    cfg = model.config
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise DimensionError(f"expected (N,{cfg.in_channels},H,W) input, got {x.shape}")
    h, w = x.shape[2:]
    for level in range(cfg.depth):
        sh, sw = h >> level, w >> level
        if sh % 2 or sw % 2:
            raise DimensionError(
                f"input {h}x{w} not divisible by 2**{cfg.depth}: encoder level {level} sees odd extent {sh}x{sw}"
            )

    skips = []
    for i in range(cfg.depth):
        x = _block(x, model, f"enc{i}")
        skips.append(x)
        x = maxpool2(x)
    x = _block(x, model, "bottleneck")
    if model.cfm is not None:
        x = cfm_forward(x, model.cfm)
    for i in reversed(range(cfg.depth)):
        x = relu(model.convs[f"dec{i}.up"](upsample2(x)))
        x = concat_channels(x, skips[i])
        x = _block(x, model, f"dec{i}")
    return sigmoid(model.convs["head"](x))


def param_count(model: Model) -> int:
    return sum(p.size for p in model.named_parameters().values())


def closed_form_param_count(config: UNetConfig) -> int:
    """Parameter count from the layer table arithmetic alone."""
    d, b = config.depth, config.base_channels
    total = 0
    cin = config.in_channels
    for i in range(d):
        c = b * 2**i
        total += 9 * cin * c + c + 9 * c * c + c
        cin = c
    top = b * 2**d
    total += 9 * cin * top + top + 9 * top * top + top
    for i in range(d):
        c = b * 2**i
        total += (9 * 2 * c * c + c) + (9 * 2 * c * c + c) + (9 * c * c + c)
    total += b * config.out_channels + config.out_channels
    if config.use_cfm:
        r = top // config.cfm_reduction
        total += (top + 1) + 2 * ((top * r + r) + (r * top + top))
    return total


def save(model: Model, path: str | os.PathLike) -> None:
    meta = {"format": "palmseg-unet-cf", "config": asdict(model.config)}
    checkpoint.write_checkpoint(path, {k: v.data for k, v in model.named_parameters().items()}, meta)


def load(path: str | os.PathLike) -> Model:
    """Rebuild a model from a checkpoint written by :func:`save`."""

    def shapes_from_meta(meta: dict):
        try:
            cfg = UNetConfig.from_dict(meta["config"])
            cfg.validate()
        except (KeyError, TypeError, ConfigError) as exc:
            raise checkpoint.CorruptHeaderError(f"{path}: missing or invalid model config ({exc})") from exc
        holder["config"] = cfg
        return expected_shapes(cfg)

    holder: dict = {}
    _, entries = checkpoint.read_checkpoint(path, expected=shapes_from_meta)
    with precision(np.float32):
        model = build(holder["config"], seed=0)
    model.load_state(entries)
    return model
