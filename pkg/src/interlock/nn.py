"""Layers built on the tensor core.

Layers are callables ``layer(x, ctx) -> Tensor``. The :class:`Ctx` decides
whether the call is recorded (a tape is present) and whether batch norm runs
in train or eval mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import BatchNormStats, Parameter, Tape, Tensor


@dataclass
class Ctx:
    tape: Tape | None = None
    train: bool = True
    update_stats: bool = True
    # parameters read through stop_gradient (recorded, but never updated)
    frozen: frozenset = field(default_factory=frozenset)

    def p(self, param: Parameter) -> Tensor:
        if self.tape is None:
            return Tensor(param.value)
        t = self.tape.watch(param)
        if id(param) in self.frozen:
            return T.stop_gradient(t)
        return t


class Layer:
    def params(self) -> list[Parameter]:
        return []

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def load_buffers(self, values: dict[str, np.ndarray]):
        pass

    def out_shape(self, in_shape: tuple) -> tuple:
        raise NotImplementedError

    def __call__(self, x: Tensor, ctx: Ctx) -> Tensor:
        raise NotImplementedError


def _uniform(rng, shape, fan_in):
    s = np.sqrt(1.0 / fan_in)
    return rng.uniform(-s, s, size=shape)


class Linear(Layer):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, name: str):
        self.weight = Parameter(f"{name}.weight", _uniform(rng, (fan_in, fan_out), fan_in))
        self.bias = Parameter(f"{name}.bias", np.zeros(fan_out))

    def params(self):
        return [self.weight, self.bias]

    def out_shape(self, in_shape):
        return (self.weight.shape[1],)

    def __call__(self, x, ctx):
        return T.add(T.matmul(x, ctx.p(self.weight)), ctx.p(self.bias))


class Conv2d(Layer):
    def __init__(self, cin, cout, rng, name, kernel=3, padding=1, stride=1):
        fan_in = cin * kernel * kernel
        self.weight = Parameter(f"{name}.weight", _uniform(rng, (cout, cin, kernel, kernel), fan_in))
        self.padding = padding
        self.stride = stride

    def params(self):
        return [self.weight]

    def out_shape(self, in_shape):
        c, h, w = in_shape
        f, _, k, _ = self.weight.shape
        p, s = self.padding, self.stride
        return (f, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)

    def __call__(self, x, ctx):
        return T.conv2d(x, ctx.p(self.weight), self.padding, self.stride)


class BatchNorm(Layer):
    def __init__(self, channels, name, momentum=0.1):
        self.name = name
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels))
        self.beta = Parameter(f"{name}.beta", np.zeros(channels))
        self.stats = BatchNormStats.fresh(channels, momentum)

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {f"{self.name}.running_mean": self.stats.mean, f"{self.name}.running_var": self.stats.var}

    def load_buffers(self, values):
        self.stats.mean = np.array(values[f"{self.name}.running_mean"])
        self.stats.var = np.array(values[f"{self.name}.running_var"])

    def out_shape(self, in_shape):
        return in_shape

    def __call__(self, x, ctx):
        if ctx.train and not ctx.update_stats:
            scratch = BatchNormStats(self.stats.mean, self.stats.var, self.stats.momentum, self.stats.eps)
            return T.batchnorm(x, ctx.p(self.gamma), ctx.p(self.beta), scratch, True)
        return T.batchnorm(x, ctx.p(self.gamma), ctx.p(self.beta), self.stats, ctx.train)


class ReLU(Layer):
    def out_shape(self, in_shape):
        return in_shape

    def __call__(self, x, ctx):
        return T.relu(x)


class MaxPool(Layer):
    def __init__(self, kernel=2, stride=1):
        self.kernel = kernel
        self.stride = stride

    def out_shape(self, in_shape):
        c, h, w = in_shape
        k, s = self.kernel, self.stride
        return (c, (h - k) // s + 1, (w - k) // s + 1)

    def __call__(self, x, ctx):
        return T.maxpool2d(x, self.kernel, self.stride)


class Flatten(Layer):
    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def __call__(self, x, ctx):
        return T.flatten(x)


class GlobalAvgPool(Layer):
    def out_shape(self, in_shape):
        return (in_shape[0],)

    def __call__(self, x, ctx):
        return T.global_avg_pool(x)


class Sequential(Layer):
    def __init__(self, layers: list[Layer]):
        self.layers = list(layers)

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def buffers(self):
        out = {}
        for layer in self.layers:
            out.update(layer.buffers())
        return out

    def load_buffers(self, values):
        for layer in self.layers:
            layer.load_buffers(values)

    def out_shape(self, in_shape):
        for layer in self.layers:
            in_shape = layer.out_shape(in_shape)
        return in_shape

    def __call__(self, x, ctx):
        for layer in self.layers:
            x = layer(x, ctx)
        return x


class Residual(Layer):
    """``relu(x + inner(x))``; the inner stack must preserve shape."""

    def __init__(self, inner: Sequential):
        self.inner = inner

    def params(self):
        return self.inner.params()

    def buffers(self):
        return self.inner.buffers()

    def load_buffers(self, values):
        self.inner.load_buffers(values)

    def out_shape(self, in_shape):
        return in_shape

    def __call__(self, x, ctx):
        return T.relu(T.add(x, self.inner(x, ctx)))
