"""Context Fusion Module.

A bottleneck block that pools the feature map into one global context
vector with learned spatial attention, derives from it a sigmoid channel
gate and an additive channel bias through two independent 1x1-conv
branches, then applies both back onto the full-resolution input::

    alpha = softmax_hw(ctx_proj(x))                 (N,1,H,W)
    g     = sum_hw(alpha * x)                       (N,C)
    gate  = sigmoid(left_b(relu(left_a(g))))        (N,C) in (0,1)
    add   = right_b(relu(right_a(g)))               (N,C)
    out   = gate[..., None, None] * x + add[..., None, None]
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError, DimensionError
from .nn import ConvParams
from .tensor import Tensor, relu, reshape, sigmoid, softmax_spatial

BRANCHES = ("ctx_proj", "left_a", "left_b", "right_a", "right_b")


@dataclass
class CFMWeights:
    ctx_proj: ConvParams
    left_a: ConvParams
    left_b: ConvParams
    right_a: ConvParams
    right_b: ConvParams
    reduction: int

    @classmethod
    def init(cls, channels: int, reduction: int = 4, seed: int = 0, prefix: str = "cfm") -> "CFMWeights":
        if reduction < 1 or channels % reduction:
            raise ConfigError(f"CFM reduction {reduction} must be a positive divisor of {channels} channels")
        hidden = channels // reduction
        return cls(
            ctx_proj=ConvParams.init(f"{prefix}.ctx_proj", channels, 1, 1, seed),
            left_a=ConvParams.init(f"{prefix}.left_a", channels, hidden, 1, seed),
            left_b=ConvParams.init(f"{prefix}.left_b", hidden, channels, 1, seed),
            right_a=ConvParams.init(f"{prefix}.right_a", channels, hidden, 1, seed),
            right_b=ConvParams.init(f"{prefix}.right_b", hidden, channels, 1, seed),
            reduction=reduction,
        )

    @property
    def channels(self) -> int:
        return self.ctx_proj.in_channels

    def named_parameters(self, prefix: str = "cfm") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for b in BRANCHES:
            out.update(getattr(self, b).named(f"{prefix}.{b}"))
        return out


def _check(x: Tensor, w: CFMWeights) -> None:
    if x.ndim != 4:
        raise DimensionError(f"CFM expects an (N,C,H,W) input, got {x.shape}")
    if x.shape[1] != w.channels:
        raise DimensionError(f"CFM built for {w.channels} channels, input has {x.shape[1]}")


def attention_weights(x: Tensor, w: CFMWeights) -> Tensor:
    """Spatial attention map alpha of shape (N,1,H,W); sums to 1 per sample."""
    _check(x, w)
    return softmax_spatial(w.ctx_proj(x))


def context_modeling(x: Tensor, w: CFMWeights) -> Tensor:
    """Attention-pooled global context vector, shape (N,C)."""
    alpha = attention_weights(x, w)
    return (alpha * x).sum(axis=(2, 3))


def _pointwise(g: Tensor, a: ConvParams, b: ConvParams) -> Tensor:
    n, c = g.shape
    h = b(relu(a(reshape(g, (n, c, 1, 1)))))
    return reshape(h, (n, h.shape[1]))


def transform_left(g: Tensor, w: CFMWeights) -> Tensor:
    """Channel-importance gate in (0,1)."""
    return sigmoid(_pointwise(g, w.left_a, w.left_b))


def transform_right(g: Tensor, w: CFMWeights) -> Tensor:
    """Unsquashed global-context feature added back onto every position."""
    return _pointwise(g, w.right_a, w.right_b)


def cfm_forward(x: Tensor, w: CFMWeights) -> Tensor:
    g = context_modeling(x, w)
    n, c = g.shape
    gate = reshape(transform_left(g, w), (n, c, 1, 1))
    add = reshape(transform_right(g, w), (n, c, 1, 1))
    return gate * x + add
