"""Component-partitioned networks with auxiliary classification heads."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .nn import (
    BatchNorm,
    Conv2d,
    Ctx,
    Flatten,
    GlobalAvgPool,
    Layer,
    Linear,
    MaxPool,
    ReLU,
    Residual,
    Sequential,
)
from .tensor import Parameter, Tensor

PRESETS = ("toy_conv", "mlp", "resnet_lite")
AUX_HEADS = ("linear", "conv_head")


@dataclass(frozen=True)
class ArchitectureSpec:
    preset: str = "toy_conv"
    input_shape: tuple = (3, 16, 16)
    num_classes: int = 10
    depth: int = 6  # toy_conv
    widths: tuple = (64, 64, 64)  # mlp
    blocks: int = 4  # resnet_lite
    aux_head: str = "linear"
    filters: tuple = (32, 64)  # toy_conv: repeated blocks, top two components
    res_width: int = 16
    head_filters: tuple = (128, 64)  # conv_head aux networks

    @property
    def num_components(self) -> int:
        if self.preset == "toy_conv":
            return self.depth
        if self.preset == "mlp":
            return len(self.widths)
        return self.blocks

    def validate(self):
        if self.preset not in PRESETS:
            raise ConfigurationError(f"model.preset must be one of {PRESETS}, got {self.preset!r}")
        if self.aux_head not in AUX_HEADS:
            raise ConfigurationError(f"model.aux_head must be one of {AUX_HEADS}, got {self.aux_head!r}")
        if self.num_classes < 2:
            raise ConfigurationError(f"model.num_classes must be >= 2, got {self.num_classes}")
        if self.preset == "toy_conv":
            if self.depth < 3:
                raise ConfigurationError(f"model.depth: toy_conv needs depth >= 3, got {self.depth}")
            if len(self.input_shape) != 3:
                raise ConfigurationError(f"toy_conv needs a (C, H, W) input shape, got {self.input_shape}")
            if min(self.input_shape[1:]) < 3:
                raise ConfigurationError(f"toy_conv input is too small for two 2x2 pools: {self.input_shape}")
        elif self.preset == "mlp":
            if len(self.widths) < 1 or min(self.widths) < 1:
                raise ConfigurationError(f"model.widths: mlp needs at least one positive width, got {self.widths}")
            if len(self.input_shape) != 1:
                raise ConfigurationError(f"mlp needs a flat input shape, got {self.input_shape}")
        else:
            if self.blocks < 1:
                raise ConfigurationError(f"model.blocks: resnet_lite needs blocks >= 1, got {self.blocks}")
            if len(self.input_shape) != 3:
                raise ConfigurationError(f"resnet_lite needs a (C, H, W) input shape, got {self.input_shape}")


@dataclass
class Component:
    index: int  # 1-based
    body: Sequential
    head: Sequential | None
    in_shape: tuple
    out_shape: tuple

    def body_params(self) -> list[Parameter]:
        return self.body.params()

    def head_params(self) -> list[Parameter]:
        return self.head.params() if self.head is not None else []

    def params(self) -> list[Parameter]:
        return self.body_params() + self.head_params()

    def buffers(self) -> dict[str, np.ndarray]:
        out = self.body.buffers()
        if self.head is not None:
            out.update(self.head.buffers())
        return out

    def load_buffers(self, values):
        self.body.load_buffers(values)
        if self.head is not None:
            self.head.load_buffers(values)


@dataclass
class PartitionedModel:
    components: list[Component]
    num_classes: int
    spec: ArchitectureSpec
    seed: int = 0

    @property
    def n(self) -> int:
        return len(self.components)

    def params(self) -> list[Parameter]:
        return [p for c in self.components for p in c.params()]

    def body_params(self, k: int) -> list[Parameter]:
        return self.components[k - 1].body_params()

    def head_params(self, k: int) -> list[Parameter]:
        return self.components[k - 1].head_params()

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for c in self.components:
            out.update(c.buffers())
        return out

    def load_buffers(self, values):
        for c in self.components:
            c.load_buffers(values)

    def param_count(self) -> int:
        return sum(p.value.size for p in self.params())

    def flat_stack(self) -> Sequential:
        """All body layers in order, without partitioning or aux heads."""
        return Sequential([layer for c in self.components for layer in c.body.layers])


@dataclass
class ForwardResult:
    activations: list[Tensor]
    detached: list[Tensor]
    logits: list[Tensor]


# ---------------------------------------------------------------- construction


def _conv_block(cin, cout, rng, name, pool=False):
    layers: list[Layer] = [Conv2d(cin, cout, rng, f"{name}.conv"), BatchNorm(cout, f"{name}.bn"), ReLU()]
    if pool:
        layers.append(MaxPool(2, 1))
    return layers


def _aux_head(spec: ArchitectureSpec, in_shape, rng, name) -> Sequential:
    if spec.aux_head == "linear" or len(in_shape) == 1:
        layers: list[Layer] = [Flatten()] if len(in_shape) > 1 else []
        return Sequential(layers + [Linear(int(np.prod(in_shape)), spec.num_classes, rng, f"{name}.linear")])
    c1, c2 = spec.head_filters
    return Sequential(
        _conv_block(in_shape[0], c1, rng, f"{name}.0")
        + _conv_block(c1, c2, rng, f"{name}.1")
        + [GlobalAvgPool(), Linear(c2, spec.num_classes, rng, f"{name}.linear")]
    )


def _bodies(spec: ArchitectureSpec, rng) -> list[list[Layer]]:
    n = spec.num_components
    if spec.preset == "toy_conv":
        small, big = spec.filters
        cin = spec.input_shape[0]
        out = []
        for k in range(1, n - 1):
            out.append(_conv_block(cin, small, rng, f"c{k}.body"))
            cin = small
        out.append(_conv_block(cin, big, rng, f"c{n - 1}.body", pool=True))
        out.append(_conv_block(big, big, rng, f"c{n}.body", pool=True) + [Flatten()])
        return out
    if spec.preset == "mlp":
        fan_in = spec.input_shape[0]
        out = []
        for k, w in enumerate(spec.widths, start=1):
            out.append([Linear(fan_in, w, rng, f"c{k}.body.linear"), ReLU()])
            fan_in = w
        return out
    width = spec.res_width
    out = []
    for k in range(1, n + 1):
        layers: list[Layer] = []
        if k == 1:
            layers += _conv_block(spec.input_shape[0], width, rng, "c1.stem")
        inner = Sequential(
            [
                Conv2d(width, width, rng, f"c{k}.body.res.0"),
                BatchNorm(width, f"c{k}.body.res.0.bn"),
                ReLU(),
                Conv2d(width, width, rng, f"c{k}.body.res.1"),
                BatchNorm(width, f"c{k}.body.res.1.bn"),
            ]
        )
        layers.append(Residual(inner))
        if k == n:
            layers.append(GlobalAvgPool())
        out.append(layers)
    return out


def build(spec: ArchitectureSpec, seed: int = 0) -> PartitionedModel:
    """Deterministically construct the partitioned model described by ``spec``."""
    spec.validate()
    rng = np.random.default_rng(seed)
    bodies = _bodies(spec, rng)
    n = len(bodies)
    components = []
    shape = tuple(spec.input_shape)
    for k, layers in enumerate(bodies, start=1):
        body = Sequential(layers)
        out_shape = body.out_shape(shape)
        if k == n:
            task = Linear(int(np.prod(out_shape)), spec.num_classes, rng, f"c{k}.task")
            body = Sequential(layers + [task])
            head = None
            out_shape = (spec.num_classes,)
        else:
            head = _aux_head(spec, out_shape, rng, f"c{k}.head")
        components.append(Component(k, body, head, shape, out_shape))
        shape = out_shape
    return PartitionedModel(components, spec.num_classes, spec, seed)


# ---------------------------------------------------------------- forward / losses


def _check_input(model: PartitionedModel, x: Tensor):
    want = tuple(model.components[0].in_shape)
    if x.data.ndim != len(want) + 1 or tuple(x.shape[1:]) != want:
        raise DimensionError(f"component 1 expects input of shape (N, {', '.join(map(str, want))}), got {x.shape}")


def run_component(comp: Component, x: Tensor, ctx: Ctx) -> tuple[Tensor, Tensor]:
    """Body output ``a_k`` and logits for component ``comp``."""
    if tuple(x.shape[1:]) != tuple(comp.in_shape):
        raise DimensionError(
            f"component {comp.index} expects input of shape (N, {', '.join(map(str, comp.in_shape))}), got {x.shape}"
        )
    a = comp.body(x, ctx)
    logits = a if comp.head is None else comp.head(a, ctx)
    return a, logits


def forward(
    model: PartitionedModel,
    x,
    *,
    tape=None,
    train: bool = True,
    cut=(),
    update_stats: bool = True,
) -> ForwardResult:
    """Run every component in order.

    Component ``k + 1`` reads the detached form of ``a_k`` for each ``k`` in
    ``cut``; everywhere else activations flow through unchanged.
    """
    ctx = Ctx(tape=tape, train=train, update_stats=update_stats)
    if not isinstance(x, Tensor):
        x = tape.input(x) if tape is not None else Tensor(x)
    _check_input(model, x)
    acts, detached, logits = [], [], []
    h = x
    for comp in model.components:
        a, lg = run_component(comp, h, ctx)
        acts.append(a)
        d = T.stop_gradient(a)
        detached.append(d)
        logits.append(lg)
        h = d if comp.index in cut else a
    return ForwardResult(acts, detached, logits)


def component_losses(model: PartitionedModel, logits: list[Tensor], targets) -> list[Tensor]:
    if len(logits) != model.n:
        raise ValueError(f"expected logits for {model.n} heads, got {len(logits)}")
    return [T.softmax_cross_entropy(lg, targets) for lg in logits]


def predict_logits(model: PartitionedModel, x, batch_size: int = 256) -> list[np.ndarray]:
    """Eval-mode logits of every head, computed in batches without a tape."""
    x = np.asarray(x, dtype=np.float64)
    out = [[] for _ in range(model.n)]
    for s in range(0, len(x), batch_size):
        res = forward(model, x[s : s + batch_size], train=False)
        for k, lg in enumerate(res.logits):
            out[k].append(lg.data)
    return [np.concatenate(o) for o in out]
