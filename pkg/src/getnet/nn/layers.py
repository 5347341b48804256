"""Parameterized layers built on :mod:`getnet.nn.ops`.

A layer owns its trainable tensors (``params``) and non-trainable buffers, and
can report its output shape without running, which the model builder uses for
shape propagation and parameter counting.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError
from ..rng import RandomState
from . import ops
from .tensor import Tensor

Shape = tuple[int, int, int]  # (H, W, C) per sample


def fan_in_uniform(gen: np.random.Generator, shape: tuple[int, ...], fan_in: int,
                   dtype=np.float32) -> np.ndarray:
    lim = np.sqrt(6.0 / fan_in)
    return gen.uniform(-lim, lim, size=shape).astype(dtype)


@dataclass
class Layer:
    name: str

    kind = "layer"

    @property
    def params(self) -> dict[str, Tensor]:
        return {}

    @property
    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def out_shape(self, shape: Shape) -> Shape:
        return shape

    def forward(self, x: Tensor, mode: str, rs: RandomState | None) -> Tensor:
        raise NotImplementedError

    def n_params(self) -> int:
        return sum(int(t.data.size) for t in self.params.values())


@dataclass
class Conv2d(Layer):
    weight: Tensor = None
    bias: Tensor = None
    padding: str = "same"

    kind = "conv2d"

    @classmethod
    def create(cls, name, kh, kw, cin, cout, gen, padding="same", dtype=np.float32):
        w = fan_in_uniform(gen, (kh, kw, cin, cout), kh * kw * cin, dtype)
        return cls(name, Tensor(w, True, f"{name}.weight"),
                   Tensor(np.zeros(cout, dtype), True, f"{name}.bias"), padding)

    @property
    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def out_shape(self, shape):
        h, w, c = shape
        kh, kw, cin, cout = self.weight.shape
        if c != cin:
            raise DataError(f"{self.name}: expects {cin} input channels, got {c}")
        if self.padding == "valid":
            return h - kh + 1, w - kw + 1, cout
        return h, w, cout

    def forward(self, x, mode, rs):
        return ops.conv2d(x, self.weight, self.bias, self.padding)


@dataclass
class BatchNorm(Layer):
    gamma: Tensor = None
    beta: Tensor = None
    state: ops.BatchNormState = None

    kind = "batch_norm"

    @classmethod
    def create(cls, name, channels, eps=1e-5, momentum=0.9, dtype=np.float32):
        return cls(name, Tensor(np.ones(channels, dtype), True, f"{name}.gamma"),
                   Tensor(np.zeros(channels, dtype), True, f"{name}.beta"),
                   ops.BatchNormState(channels, eps, momentum, dtype))

    @property
    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    @property
    def buffers(self):
        return {"running_mean": self.state.running_mean, "running_var": self.state.running_var}

    def forward(self, x, mode, rs):
        return ops.batch_norm(x, self.gamma, self.beta, self.state, mode)


@dataclass
class SpatialDropout(Layer):
    p: float = 0.2

    kind = "spatial_dropout"

    def forward(self, x, mode, rs):
        gen = rs.child(self.name).generator() if (rs is not None and mode == ops.TRAIN) else None
        return ops.spatial_dropout(x, self.p, gen, mode)


@dataclass
class GaussianNoise(Layer):
    sigma: float = 0.05

    kind = "gaussian_noise"

    def forward(self, x, mode, rs):
        gen = rs.child(self.name).generator() if (rs is not None and mode == ops.TRAIN) else None
        return ops.gaussian_noise(x, self.sigma, gen, mode)


@dataclass
class Activation(Layer):
    fn: str = "relu"

    kind = "activation"

    def forward(self, x, mode, rs):
        return ops.activation(x, self.fn)


@dataclass
class MaxPool(Layer):
    pool_h: int = 2
    pool_w: int = 2

    kind = "max_pool"

    def out_shape(self, shape):
        h, w, c = shape
        if h % self.pool_h or w % self.pool_w:
            raise DataError(f"{self.name}: {h}x{w} not divisible by {self.pool_h}x{self.pool_w}")
        return h // self.pool_h, w // self.pool_w, c

    def forward(self, x, mode, rs):
        return ops.max_pool2d(x, self.pool_h, self.pool_w)


@dataclass
class AdaptiveMaxPool(Layer):
    out_h: int = 64
    out_w: int = 64

    kind = "adaptive_max_pool"

    def out_shape(self, shape):
        h, w, c = shape
        if h < self.out_h or w < self.out_w:
            raise DataError(f"{self.name}: {h}x{w} input is smaller than {self.out_h}x{self.out_w}")
        return self.out_h, self.out_w, c

    def forward(self, x, mode, rs):
        return ops.adaptive_max_pool(x, self.out_h, self.out_w)


@dataclass
class SpatialAttention(Layer):
    """CBAM spatial gate: 7x7 conv over [mean, max] channel descriptors, BN, sigmoid."""

    conv: Conv2d = None
    bn: BatchNorm = None
    enabled: bool = True

    kind = "attention_conv"

    @classmethod
    def create(cls, name, gen, kernel=7, dtype=np.float32):
        return cls(name, Conv2d.create(f"{name}.conv", kernel, kernel, 2, 1, gen, dtype=dtype),
                   BatchNorm.create(f"{name}.bn", 1, dtype=dtype))

    @property
    def params(self):
        return {"kernel": self.conv.weight, "bias": self.conv.bias,
                "gamma": self.bn.gamma, "beta": self.bn.beta}

    @property
    def buffers(self):
        return self.bn.buffers

    def forward(self, x, mode, rs):
        if not self.enabled:
            return x
        return ops.cbam_spatial_attention(x, self.conv.weight, self.conv.bias, self.bn.gamma,
                                          self.bn.beta, self.bn.state, mode)


@dataclass
class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, mode, rs):
        return ops.flatten(x)


@dataclass
class Dense(Layer):
    weight: Tensor = None
    bias: Tensor = None

    kind = "dense"

    @classmethod
    def create(cls, name, fan_in, units, gen, dtype=np.float32):
        w = fan_in_uniform(gen, (fan_in, units), fan_in, dtype)
        return cls(name, Tensor(w, True, f"{name}.weight"),
                   Tensor(np.zeros(units, dtype), True, f"{name}.bias"))

    @property
    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def out_shape(self, shape):
        if shape != (self.weight.shape[0],):
            raise DataError(f"{self.name}: expects {self.weight.shape[0]} features, got {shape}")
        return (self.weight.shape[1],)

    def forward(self, x, mode, rs):
        return ops.dense(x, self.weight, self.bias)


@dataclass
class Sequential:
    layers: list[Layer] = field(default_factory=list)

    def forward(self, x: Tensor, mode: str, rs: RandomState | None = None) -> Tensor:
        for layer in self.layers:
            x = layer.forward(x, mode, rs)
        return x

    def named_params(self) -> dict[str, Tensor]:
        return {f"{layer.name}.{k}": t for layer in self.layers for k, t in layer.params.items()}

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {f"{layer.name}.{k}": a for layer in self.layers for k, a in layer.buffers.items()}
