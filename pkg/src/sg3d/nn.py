"""Linear layers and MLP plumbing shared by encoders, the GNN, and the heads."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Value


@dataclass(eq=False)
class Linear:
    w: Value            # [fan_in, fan_out]
    b: Value | None     # [fan_out]


def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int,
                bias: bool = True) -> Linear:
    """Uniform init in +-sqrt(6 / (fan_in + fan_out)); zero biases."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    w = Value(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)
    b = Value(np.zeros(fan_out), requires_grad=True) if bias else None
    return Linear(w=w, b=b)


def linear(x: Value, layer: Linear) -> Value:
    out = ad.matmul(x, layer.w)
    if layer.b is not None:
        out = ad.add(out, layer.b)
    return out


def mlp(x: Value, layers: Sequence[Linear]) -> Value:
    """Apply layers with ReLU between them and none after the last."""
    out = x
    for i, layer in enumerate(layers):
        out = linear(out, layer)
        if i + 1 < len(layers):
            out = ad.relu(out)
    return out


def linear_params(prefix: str, layer: Linear) -> list[tuple[str, Value]]:
    named = [(f"{prefix}.w", layer.w)]
    if layer.b is not None:
        named.append((f"{prefix}.b", layer.b))
    return named


def mlp_params(prefix: str, layers: Sequence[Linear]) -> list[tuple[str, Value]]:
    named: list[tuple[str, Value]] = []
    for i, layer in enumerate(layers):
        named.extend(linear_params(f"{prefix}.{i}", layer))
    return named
