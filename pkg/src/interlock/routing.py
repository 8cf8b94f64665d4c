"""Gradient routing: which loss trains which component body.

Three constructions live here and are expected to agree:

* :class:`RoutedStep` runs one component at a time on its own tape and
  moves cotangents between components explicitly. Training uses it, in both
  the sequential and the pipelined engines.
* :func:`build_training_graph` records everything on one tape and realises
  each stop with ``stop_gradient`` nodes. It is slower (one forward lane per
  loss) but makes the routing visible to tape reachability queries.
* :func:`end_to_end_with_aux` is plain backprop of the summed losses with no
  stops at all; it is the reference for the ``N = n`` limit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .model import PartitionedModel, run_component
from .nn import Ctx
from .tensor import Parameter, Tape, Tensor

KINDS = ("end_to_end", "n_wise", "grouped_local", "hogwild")


@dataclass(frozen=True)
class RoutingPolicy:
    kind: str = "n_wise"
    n: int = 1  # window N for n_wise, group size g for grouped_local
    mix_local: bool = False
    aux_weights: tuple | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"strategy.kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind in ("n_wise", "grouped_local") and self.n < 1:
            raise ConfigurationError(f"strategy.n must be >= 1 for {self.kind}, got {self.n}")

    @classmethod
    def local(cls):
        return cls("n_wise", 1)

    def label(self) -> str:
        if self.kind == "n_wise":
            return f"{self.n}-wise" + ("+mix" if self.mix_local else "")
        if self.kind == "grouped_local":
            return f"grouped-{self.n}"
        return self.kind

    def weight(self, j: int, n: int) -> float:
        if j == n or self.aux_weights is None:
            return 1.0
        return float(self.aux_weights[j - 1])


@dataclass(frozen=True)
class GradientAssignment:
    n: int
    source_loss: tuple  # per component, 1-based loss index
    param_losses: tuple  # per component, frozenset of losses updating its body
    lowest: tuple  # per loss, lowest component its gradient reaches (0 if unused)

    def reach(self, j: int) -> frozenset:
        lo = self.lowest[j - 1]
        return frozenset(range(lo, j + 1)) if lo else frozenset()

    def boxes(self, k: int) -> list[int]:
        """Losses whose gradient passes through body ``k``, ascending."""
        return [j for j in range(k, self.n + 1) if self.lowest[j - 1] and self.lowest[j - 1] <= k]

    def sends_down(self, k: int, j: int) -> bool:
        return self.lowest[j - 1] != 0 and self.lowest[j - 1] < k


def assignment(policy: RoutingPolicy, n: int) -> GradientAssignment:
    if n < 1:
        raise ConfigurationError(f"component count must be >= 1, got {n}")
    kind = policy.kind
    if kind == "n_wise":
        window = policy.n
    elif kind in ("end_to_end", "hogwild"):
        window = n
    else:
        window = None

    source, params = [], []
    for k in range(1, n + 1):
        if window is not None:
            src = min(k + window - 1, n)
            top = src
        else:
            g = policy.n
            top = min(g * -(-k // g), n)
            src = top
        source.append(src)
        if policy.mix_local and kind != "hogwild":
            params.append(frozenset(range(k, top + 1)))
        else:
            params.append(frozenset({src}))
    lowest = []
    for j in range(1, n + 1):
        users = [k for k in range(1, n + 1) if j in params[k - 1]]
        lowest.append(min(users) if users else 0)
    return GradientAssignment(n, tuple(source), tuple(params), tuple(lowest))


# ---------------------------------------------------------------- per-component execution


class ComponentPass:
    """Forward record of one component for one batch, plus its backward boxes."""

    def __init__(self, model: PartitionedModel, k: int, x: np.ndarray, targets, *, train=True, weight=1.0):
        self.comp = model.components[k - 1]
        self.k = k
        self.tape = Tape()
        self.inp = self.tape.input(x)
        a, logits = run_component(self.comp, self.inp, Ctx(self.tape, train))
        self.out = a
        self.logits = logits
        self.loss = T.softmax_cross_entropy(logits, targets)
        self.weight = weight

    @property
    def activation(self) -> np.ndarray:
        return self.out.data

    def box(self, j: int, cotangent=None, *, update_body: bool, send_down: bool) -> np.ndarray | None:
        """Backward of loss ``j`` through this component.

        For ``j == k`` the seed is this component's own loss and the head
        parameters always receive its gradient. For ``j > k`` the seed is the
        cotangent of loss ``j`` with respect to this component's output.
        Returns the cotangent for the component below when ``send_down``.
        """
        params = list(self.comp.body_params()) if update_body else []
        if j == self.k:
            params += self.comp.head_params()
            seeds = [(self.loss, np.asarray(self.weight))]
        else:
            seeds = [(self.out, cotangent)]
        inputs = [self.inp] if send_down else []
        grads = self.tape.backward(seeds, params=params, inputs=inputs)
        return grads[0] if send_down else None

    def head_only(self):
        if self.comp.head is not None:
            self.tape.backward([(self.loss, np.asarray(self.weight))], params=self.comp.head_params())


class RoutedStep:
    """Routed forward and backward for one batch, executed component by component."""

    def __init__(self, model: PartitionedModel, policy: RoutingPolicy, x, targets, *, train=True):
        self.model = model
        self.policy = policy
        self.assign = assignment(policy, model.n)
        self.passes: list[ComponentPass] = []
        h = np.asarray(x, dtype=np.float64)
        for k in range(1, model.n + 1):
            cp = ComponentPass(model, k, h, targets, train=train, weight=policy.weight(k, model.n))
            self.passes.append(cp)
            h = cp.activation

    @property
    def losses(self) -> list[float]:
        return [cp.loss.item() for cp in self.passes]

    @property
    def logits(self) -> list[np.ndarray]:
        return [cp.logits.data for cp in self.passes]

    def backward(self):
        """Accumulate routed gradients into every parameter's ``.grad``."""
        a = self.assign
        incoming: dict[tuple, np.ndarray] = {}
        for k in range(self.model.n, 0, -1):
            cp = self.passes[k - 1]
            boxes = a.boxes(k)
            if k not in boxes:
                cp.head_only()
            for j in boxes:
                g = cp.box(
                    j,
                    incoming.pop((k, j), None),
                    update_body=j in a.param_losses[k - 1],
                    send_down=a.sends_down(k, j) and k > 1,
                )
                if g is not None:
                    incoming[(k - 1, j)] = g


def routed_gradients(model, policy, x, targets, *, train=True) -> dict[str, np.ndarray]:
    """Fresh routed gradients for every parameter, keyed by parameter id."""
    T.zero_grads(model.params())
    step = RoutedStep(model, policy, x, targets, train=train)
    step.backward()
    out = {p.id: p.grad.copy() for p in model.params()}
    T.zero_grads(model.params())
    return out


# ---------------------------------------------------------------- single-tape constructions


@dataclass
class TrainingGraph:
    tape: Tape
    losses: list[Tensor]  # one per component, on the lane that carries its routing
    total: Tensor
    assign: GradientAssignment

    def backward(self):
        self.tape.backward(self.total)


def build_training_graph(model: PartitionedModel, policy: RoutingPolicy, x, targets, *, train=True) -> TrainingGraph:
    """Single-tape graph whose plain backward yields exactly the routed gradients.

    Loss ``j`` gets its own forward lane starting from a detached copy of
    the activation below its lowest reached component. Bodies that loss ``j``
    only passes through read their parameters via ``stop_gradient``; heads
    other than ``j``'s own are never on lane ``j``. Forward values on every
    lane equal the ordinary forward pass.
    """
    n = model.n
    a = assignment(policy, n)
    tape = Tape()
    main_ctx = Ctx(tape, train)
    lane_inputs = [tape.input(x)]
    h = lane_inputs[0]
    for comp in model.components:
        h, _ = run_component(comp, h, main_ctx)
        lane_inputs.append(h)

    losses = []
    for j in range(1, n + 1):
        comp_j = model.components[j - 1]
        lo = a.lowest[j - 1] or j
        frozen = set()
        for k in range(lo, j + 1):
            if j not in a.param_losses[k - 1]:
                frozen.update(id(p) for p in model.body_params(k))
        ctx = Ctx(tape, train, update_stats=False, frozen=frozenset(frozen))
        h = T.stop_gradient(lane_inputs[lo - 1])
        for k in range(lo, j + 1):
            h = model.components[k - 1].body(h, ctx)
        logits = h if comp_j.head is None else comp_j.head(h, ctx)
        losses.append(T.scale(T.softmax_cross_entropy(logits, targets), policy.weight(j, n)))
    return TrainingGraph(tape, losses, T.add_n(losses), a)


def end_to_end_with_aux(model: PartitionedModel, x, targets, *, aux_weights=None, train=True) -> dict[str, np.ndarray]:
    """Gradients of ``L_n + sum_k w_k L_k`` by ordinary backprop, no stops anywhere."""
    n = model.n
    tape = Tape()
    h = tape.input(x)
    ctx = Ctx(tape, train)
    terms = []
    for comp in model.components:
        h, logits = run_component(comp, h, ctx)
        loss = T.softmax_cross_entropy(logits, targets)
        w = 1.0 if comp.index == n or aux_weights is None else float(aux_weights[comp.index - 1])
        terms.append(T.scale(loss, w))
    T.zero_grads(model.params())
    tape.backward(T.add_n(terms))
    out = {p.id: p.grad.copy() for p in model.params()}
    T.zero_grads(model.params())
    return out


def isolated_gradients(model: PartitionedModel, x, targets, *, train=True) -> dict[str, np.ndarray]:
    """Each component trained alone on its own loss, its input treated as data."""
    out = {}
    h = np.asarray(x, dtype=np.float64)
    for comp in model.components:
        tape = Tape()
        a, logits = run_component(comp, tape.input(h), Ctx(tape, train))
        loss = T.softmax_cross_entropy(logits, targets)
        T.zero_grads(comp.params())
        tape.backward(loss, params=comp.params())
        out.update({p.id: p.grad.copy() for p in comp.params()})
        T.zero_grads(comp.params())
        h = a.data
    return out


def body_param_ids(model: PartitionedModel, k: int) -> list[str]:
    return [p.id for p in model.body_params(k)]


# ---------------------------------------------------------------- finite-difference check


@dataclass(frozen=True)
class ParamCheck:
    param_id: str
    component: int
    losses: tuple  # losses whose sum is differentiated numerically
    rel_error: float


def check_routed_gradients(
    model: PartitionedModel, policy: RoutingPolicy, x, targets, *, eps=1e-5, max_coords=None, seed=0
) -> list[ParamCheck]:
    """Compare routed gradients with central differences of the losses that own them.

    A body parameter of component ``k`` must receive exactly the derivative of
    the weighted sum of the losses in its update set; a head parameter the
    derivative of its own loss. Batch norm runs in train mode with running
    statistics left untouched.
    """
    from .model import forward

    n = model.n
    a = assignment(policy, n)
    routed = routed_gradients(model, policy, x, targets)

    def total(losses):
        def value():
            res = forward(model, x, train=True, update_stats=False)
            return sum(policy.weight(j, n) * T.softmax_cross_entropy(res.logits[j - 1], targets).item() for j in losses)

        return value

    out = []
    for k in range(1, n + 1):
        groups = [(model.body_params(k), tuple(sorted(a.param_losses[k - 1]))), (model.head_params(k), (k,))]
        for params, losses in groups:
            for i, p in enumerate(params):
                err = T.fd_compare(total(losses), [(p, routed[p.id])], eps, max_coords=max_coords, seed=seed + i)
                out.append(ParamCheck(p.id, k, losses, err))
    return out
