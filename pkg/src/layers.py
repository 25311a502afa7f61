#!/usr/bin/env python3
"""
Layers - Trainable layers and input transforms for feature generators, heads and discriminators.

Every layer takes ``(x, ctx)``; ``ForwardContext`` carries the hypothesis id
(selects the conditional batch-norm parameter set), the rng stream driving the
stochastic layers, and whether stochasticity / running-stat updates are on.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

import autodiff as ad
from autodiff import Tensor
from errors import ShapeError

logger = logging.getLogger(__name__)

IN_EPS = 1e-6


@dataclass(frozen=True)
class ForwardContext:
    hypothesis_id: int = 1
    rng: Optional[np.random.Generator] = None
    stochastic: bool = True
    update_stats: bool = True


class Layer:
    def __init__(self):
        self.training = True

    def parameters(self) -> Dict[str, Tensor]:
        return {}

    def buffers(self) -> Dict[str, np.ndarray]:
        return {}

    def children(self) -> List[Tuple[str, "Layer"]]:
        return []

    def train(self, mode: bool = True) -> "Layer":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Layer":
        return self.train(False)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, p in self.parameters().items():
            yield prefix + name, p
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, b in self.buffers().items():
            yield prefix + name, b
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def load_buffer(self, name: str, value: np.ndarray) -> None:
        raise KeyError(name)

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor, ctx: ForwardContext = ForwardContext()) -> Tensor:
        return self.forward(x, ctx)


class Sequential(Layer):
    def __init__(self, layers: Sequence[Layer]):
        super().__init__()
        self.layers = list(layers)

    def children(self):
        return [(str(i), layer) for i, layer in enumerate(self.layers)]

    def forward(self, x, ctx):
        for layer in self.layers:
            x = layer(x, ctx)
        return x


def he_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(ad.default_dtype())


class Dense(Layer):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        self.weight = Tensor(he_normal(rng, (in_features, out_features), in_features), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, ctx):
        if x.ndim != 2 or x.shape[1] != self.weight.shape[0]:
            raise ShapeError(f"dense: input {x.shape} does not match weight {self.weight.shape}")
        return x @ self.weight + self.bias


def dense_forward(params: Dict[str, Tensor], x: Tensor) -> Tensor:
    """Affine map ``x @ W + b`` from an explicit parameter dict."""
    w, b = params["weight"], params["bias"]
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: input {x.shape} does not match weight {w.shape}")
    return x @ w + b


class Conv2d(Layer):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: np.random.Generator,
                 padding: str = "same"):
        super().__init__()
        fan_in = in_channels * kernel * kernel
        self.weight = Tensor(he_normal(rng, (out_channels, in_channels, kernel, kernel), fan_in), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)
        self.padding = padding

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, ctx):
        out = ad.conv2d(x, self.weight, padding=self.padding)
        return out + ad.reshape(self.bias, (1, -1, 1, 1))


class BatchNorm(Layer):
    """Batch normalization with ``n_sets`` affine parameter sets (2 = conditional batch-norm).

    Each set keeps its own running statistics. With one set the hypothesis id is ignored.
    """

    def __init__(self, num_features: int, n_sets: int = 1, momentum: float = 0.99, eps: float = 1e-5):
        super().__init__()
        self.num_features = num_features
        self.n_sets = n_sets
        self.momentum = momentum
        self.eps = eps
        self.scales = [Tensor(np.ones(num_features), requires_grad=True) for _ in range(n_sets)]
        self.shifts = [Tensor(np.zeros(num_features), requires_grad=True) for _ in range(n_sets)]
        self.running_mean = [np.zeros(num_features) for _ in range(n_sets)]
        self.running_var = [np.ones(num_features) for _ in range(n_sets)]

    def parameters(self):
        params = {}
        for i in range(self.n_sets):
            params[f"scale.{i}"] = self.scales[i]
            params[f"shift.{i}"] = self.shifts[i]
        return params

    def buffers(self):
        bufs = {}
        for i in range(self.n_sets):
            bufs[f"running_mean.{i}"] = self.running_mean[i]
            bufs[f"running_var.{i}"] = self.running_var[i]
        return bufs

    def load_buffer(self, name, value):
        kind, idx = name.rsplit(".", 1)
        target = {"running_mean": self.running_mean, "running_var": self.running_var}[kind]
        target[int(idx)] = np.array(value, dtype=ad.default_dtype())

    def set_index(self, hypothesis_id: int) -> int:
        if self.n_sets == 1:
            return 0
        if hypothesis_id not in (1, 2):
            raise ValueError(f"batchnorm: hypothesis_id must be 1 or 2, got {hypothesis_id}")
        return hypothesis_id - 1

    def forward(self, x, ctx):
        return batchnorm_forward(self, x, ctx.hypothesis_id, ctx.update_stats)


def batchnorm_forward(layer: BatchNorm, x: Tensor, hypothesis_id: int = 1, update_stats: bool = True) -> Tensor:
    if x.ndim == 2:
        axes, view = (0,), (1, -1)
    elif x.ndim == 4:
        axes, view = (0, 2, 3), (1, -1, 1, 1)
    else:
        raise ShapeError(f"batchnorm: expected (N, F) or NCHW input, got {x.shape}")
    if x.shape[1] != layer.num_features:
        raise ShapeError(f"batchnorm: {x.shape[1]} features, layer has {layer.num_features}")
    s = layer.set_index(hypothesis_id)
    scale = ad.reshape(layer.scales[s], view)
    shift = ad.reshape(layer.shifts[s], view)

    if layer.training:
        if x.shape[0] < 2:
            raise ShapeError("batchnorm: batch of size 1 in train mode")
        mu = ad.mean(x, axis=axes, keepdims=True)
        centered = x - mu
        var = ad.mean(centered * centered, axis=axes, keepdims=True)
        x_hat = centered * ad.power(var + layer.eps, -0.5)
        if update_stats:
            m = layer.momentum
            count = x.data.size / x.shape[1]
            unbiased = var.data.reshape(-1) * count / max(count - 1, 1)
            layer.running_mean[s] = m * layer.running_mean[s] + (1 - m) * mu.data.reshape(-1)
            layer.running_var[s] = m * layer.running_var[s] + (1 - m) * unbiased
    else:
        mu = layer.running_mean[s].reshape(view)
        inv = 1.0 / np.sqrt(layer.running_var[s].reshape(view) + layer.eps)
        x_hat = (x - mu) * inv
    return x_hat * scale + shift


class Dropout(Layer):
    def __init__(self, rate: float):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, ctx):
        active = self.training and ctx.stochastic
        return stochastic_forward("dropout", x, self.rate, ctx.rng, active)


class GaussianNoise(Layer):
    def __init__(self, stddev: float):
        super().__init__()
        if stddev < 0:
            raise ValueError(f"gaussian-noise: stddev must be >= 0, got {stddev}")
        self.stddev = stddev

    def forward(self, x, ctx):
        active = self.training and ctx.stochastic
        return stochastic_forward("gaussian-noise", x, self.stddev, ctx.rng, active)


def stochastic_forward(kind: str, x: Tensor, amount: float, rng: Optional[np.random.Generator],
                       training: bool = True) -> Tensor:
    """Dropout (inverted scaling) or additive Gaussian noise; identity when not training."""
    if kind == "dropout":
        if not 0 <= amount < 1:
            raise ValueError(f"dropout: rate must be in [0, 1), got {amount}")
        if not training or amount == 0:
            return x
        keep = rng.random(x.shape) >= amount
        return x * (keep / (1.0 - amount))
    if kind == "gaussian-noise":
        if amount < 0:
            raise ValueError(f"gaussian-noise: stddev must be >= 0, got {amount}")
        if not training or amount == 0:
            return x
        return x + rng.normal(0.0, amount, size=x.shape)
    raise ValueError(f"unknown stochastic layer {kind!r}")


class ReLU(Layer):
    def forward(self, x, ctx):
        return ad.relu(x)


class LeakyReLU(Layer):
    def __init__(self, slope: float = 0.1):
        super().__init__()
        self.slope = slope

    def forward(self, x, ctx):
        return ad.leaky_relu(x, self.slope)


class MaxPool(Layer):
    def forward(self, x, ctx):
        return ad.max_pool2d(x, 2)


class GlobalAvgPool(Layer):
    def forward(self, x, ctx):
        return ad.global_avg_pool(x)


class Flatten(Layer):
    def forward(self, x, ctx):
        return ad.flatten(x)


def instance_norm_input(x: np.ndarray, eps: float = IN_EPS) -> np.ndarray:
    """Standardize each sample-channel plane of an NCHW batch (constant planes map to zeros)."""
    x = np.asarray(x, dtype=ad.default_dtype())
    if x.ndim != 4:
        raise ShapeError(f"instance_norm_input: expected NCHW images, got {x.shape}")
    mu = x.mean(axis=(2, 3), keepdims=True)
    var = x.var(axis=(2, 3), keepdims=True)
    return (x - mu) / np.sqrt(var + eps)
