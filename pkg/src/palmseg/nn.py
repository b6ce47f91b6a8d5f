"""Parameter containers and initialisation shared by the network modules."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, conv2d, default_dtype


def param_rng(seed: int, name: str) -> np.random.Generator:
    # keyed by name so a parameter's init does not depend on which others exist
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode("utf-8"))]))


@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, name: str, cin: int, cout: int, k: int, seed: int) -> "ConvParams":
        """Kaiming-uniform (fan-in, ReLU gain) weights and zero bias."""
        fan_in = cin * k * k
        bound = np.sqrt(6.0 / fan_in)
        w = param_rng(seed, name).uniform(-bound, bound, size=(cout, cin, k, k))
        dtype = default_dtype()
        return cls(
            Tensor(w.astype(dtype), requires_grad=True, name=f"{name}.weight"),
            Tensor(np.zeros(cout, dtype=dtype), requires_grad=True, name=f"{name}.bias"),
        )

    def __call__(self, x: Tensor, padding: int | None = None) -> Tensor:
        k = self.weight.shape[2]
        return conv2d(x, self.weight, self.bias, stride=1, padding=k // 2 if padding is None else padding)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]
