#!/usr/bin/env python3
"""
Optimizers - Bias-corrected Adam and Polyak (EMA) parameter averaging over named tensors.
"""
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, Iterator, Mapping

import numpy as np

from autodiff import Tensor
from errors import NumericError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def state_arrays(self, prefix: str) -> Dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.array([self.t], dtype=np.int64)}
        for name in sorted(self.m):
            out[f"{prefix}.m.{name}"] = self.m[name]
            out[f"{prefix}.v.{name}"] = self.v[name]
        return out

    def load_arrays(self, prefix: str, arrays: Mapping[str, np.ndarray], names) -> None:
        self.t = int(arrays[f"{prefix}.t"][0])
        self.m, self.v = {}, {}
        for name in names:
            key = f"{prefix}.m.{name}"
            if key in arrays:
                self.m[name] = np.array(arrays[key], copy=True)
                self.v[name] = np.array(arrays[f"{prefix}.v.{name}"], copy=True)


def adam_step(state: AdamState, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> None:
    """One bias-corrected Adam update; parameters get fresh arrays (never mutated in place)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"adam_step: non-finite gradient for parameter {name}")
        if g.shape != params[name].shape:
            raise ShapeError(f"adam_step: gradient {g.shape} does not match parameter {name} {params[name].shape}")
    state.t += 1
    b1, b2, t = state.beta1, state.beta2, state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m, v = np.zeros_like(p.data), np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class EmaState:
    momentum: float = 0.998
    shadow: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def track(cls, params: Mapping[str, Tensor], momentum: float = 0.998) -> "EmaState":
        return cls(momentum, {name: p.data.copy() for name, p in params.items()})


def ema_update(state: EmaState, params: Mapping[str, Tensor]) -> None:
    """shadow <- momentum * shadow + (1 - momentum) * params."""
    mu = state.momentum
    for name, p in params.items():
        s = state.shadow[name]
        if s.shape != p.shape:
            raise ShapeError(f"ema_update: shadow {s.shape} does not match parameter {name} {p.shape}")
        state.shadow[name] = mu * s + (1.0 - mu) * p.data


@contextmanager
def ema_applied(state: EmaState, params: Mapping[str, Tensor]) -> Iterator[None]:
    """Evaluate with the averaged weights, restoring the live ones afterwards."""
    saved = {name: params[name].data for name in state.shadow}
    try:
        for name, value in state.shadow.items():
            params[name].data = value
        yield
    finally:
        for name, value in saved.items():
            params[name].data = value
