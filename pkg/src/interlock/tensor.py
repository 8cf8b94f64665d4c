"""Reverse-mode automatic differentiation over dense float64 arrays.

Values are plain numpy arrays wrapped in :class:`Tensor`. Operations on
tensors that belong to a :class:`Tape` are recorded on it; operations on
untracked tensors are evaluated eagerly with no bookkeeping, which is what
evaluation code uses.

A tape is owned by one worker. Backward passes can be restricted to a
subset of parameters and can return gradients for arbitrary recorded
tensors, which is how gradient routing selects which loss feeds which
parameters.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DataError, DegenerateBatchError, DimensionError

DTYPE = np.float64

BackwardFn = Callable[[np.ndarray, tuple], tuple]


class Tensor:
    __slots__ = ("data", "_tape", "node")

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        # weak, because backward closures on the tape hold tensors; a strong
        # link would make every tape a reference cycle kept alive until the
        # cyclic collector happens to run
        self._tape = weakref.ref(tape) if tape is not None else None
        self.node = node

    @property
    def tape(self) -> Tape | None:
        return self._tape() if self._tape is not None else None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f", node={self.node}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Parameter:
    """A named trainable array with a gradient accumulator."""

    id: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def __hash__(self):
        return id(self)

    def __eq__(self, other):
        return self is other


def zero_grads(params: Iterable[Parameter]):
    for p in params:
        p.zero_grad()


@dataclass
class Node:
    op: str
    parents: tuple
    backward: BackwardFn | None = None
    param: Parameter | None = None
    # stop_gradient records which node it cut off, for reachability queries
    blocked: int | None = None


class Tape:
    """Append-only record of operations for one backward computation."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._watched: dict[int, Tensor] = {}

    def __len__(self):
        return len(self.nodes)

    def _append(self, node: Node, value) -> Tensor:
        self.nodes.append(node)
        return Tensor(value, self, len(self.nodes) - 1)

    def watch(self, param: Parameter) -> Tensor:
        """Leaf tensor bound to ``param``; repeated calls share one node."""
        t = self._watched.get(id(param))
        if t is None:
            t = self._append(Node("param", (), param=param), param.value)
            self._watched[id(param)] = t
        return t

    def input(self, value) -> Tensor:
        return self._append(Node("input", ()), value)

    def record(self, op: str, value, parents: Sequence[Tensor], backward: BackwardFn, **extra) -> Tensor:
        ids = tuple(p.node if p.tape is self else None for p in parents)
        return self._append(Node(op, ids, backward, **extra), value)

    @property
    def params(self) -> list[Parameter]:
        return [n.param for n in self.nodes if n.param is not None]

    def backward(
        self,
        seeds,
        grad=None,
        *,
        params: Iterable[Parameter] | None = None,
        inputs: Sequence[Tensor] = (),
    ) -> list[np.ndarray]:
        """Propagate cotangents from ``seeds`` towards the leaves.

        ``seeds`` is a tensor (with ``grad`` defaulting to ones) or a list of
        ``(tensor, cotangent)`` pairs. Gradients are accumulated into the
        ``.grad`` of every watched parameter in ``params`` (all watched
        parameters when None); other parameters are treated as constants.
        Returns the gradients for ``inputs`` in order.
        """
        if isinstance(seeds, Tensor):
            g = np.ones_like(seeds.data) if grad is None else np.asarray(grad, dtype=DTYPE)
            seeds = [(seeds, g)]
        if params is None:
            allowed = {id(n.param) for n in self.nodes if n.param is not None}
        else:
            allowed = {id(p) for p in params}
        input_ids = []
        for t in inputs:
            if t.tape is not self:
                raise ValueError("requested input does not belong to this tape")
            input_ids.append(t.node)
        targets = set(input_ids)
        for i, n in enumerate(self.nodes):
            if n.param is not None and id(n.param) in allowed:
                targets.add(i)

        need = self._need(targets)
        grads: dict[int, np.ndarray] = {}
        top = -1
        for t, g in seeds:
            if t.tape is not self:
                raise ValueError("seed does not belong to this tape")
            g = np.broadcast_to(np.asarray(g, dtype=DTYPE), t.shape)
            if need[t.node]:
                grads[t.node] = grads[t.node] + g if t.node in grads else np.array(g)
                top = max(top, t.node)

        wanted = set(input_ids)
        captured: dict[int, np.ndarray] = {}
        for i in range(top, -1, -1):
            g = grads.pop(i, None)
            if g is None:
                continue
            node = self.nodes[i]
            if i in wanted:
                captured[i] = g
            if node.param is not None and id(node.param) in allowed:
                node.param.grad += g
            if not node.parents:
                continue
            mask = tuple(p is not None and need[p] for p in node.parents)
            if not any(mask):
                continue
            pgrads = node.backward(g, mask)
            for p, m, pg in zip(node.parents, mask, pgrads):
                if m and pg is not None:
                    grads[p] = grads[p] + pg if p in grads else pg
        return [captured[t.node] if t.node in captured else np.zeros_like(t.data) for t in inputs]

    def _need(self, targets: set) -> list[bool]:
        need = [False] * len(self.nodes)
        for i, n in enumerate(self.nodes):
            if i in targets:
                need[i] = True
            elif n.parents:
                need[i] = any(p is not None and need[p] for p in n.parents)
        return need

    def reaches(self, source: Tensor | Parameter, target: Tensor) -> bool:
        """True if a backward pass from ``target`` can deliver gradient to ``source``.

        Purely structural: stop_gradient nodes have no parents, so paths that
        cross one do not count.
        """
        if isinstance(source, Parameter):
            src = self._watched.get(id(source))
            if src is None:
                return False
            src_id = src.node
        else:
            src_id = source.node
        return self._need({src_id})[target.node]


def _tape_of(*ts: Tensor) -> Tape | None:
    tape = None
    for t in ts:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("operands are recorded on different tapes")
            tape = t.tape
    return tape


def _emit(op: str, value, parents: Sequence[Tensor], backward: BackwardFn, **extra) -> Tensor:
    tape = _tape_of(*parents)
    if tape is None:
        return Tensor(value)
    return tape.record(op, value, parents, backward, **extra)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from None
    sa, sb = a.shape, b.shape

    def backward(g, need):
        return (_unbroadcast(g, sa) if need[0] else None, _unbroadcast(g, sb) if need[1] else None)

    return _emit("add", out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def backward(g, need):
        return (
            _unbroadcast(g * bd, ad.shape) if need[0] else None,
            _unbroadcast(g * ad, bd.shape) if need[1] else None,
        )

    return _emit("mul", out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.data * c, (a,), lambda g, need: (g * c,))


def add_n(ts: Sequence[Tensor]) -> Tensor:
    out = ts[0]
    for t in ts[1:]:
        out = add(out, t)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from None
    return _emit("reshape", out, (x,), lambda g, need: (g.reshape(src),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    return _emit("relu", out, (x,), lambda g, need: (g * (out > 0),))


def stop_gradient(x: Tensor) -> Tensor:
    """Identity in the forward pass; blocks every gradient in the backward pass."""
    tape = x.tape
    if tape is None:
        return Tensor(x.data)
    return tape._append(Node("stop_gradient", (), blocked=x.node), x.data)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g, need):
        return (g @ bd.T if need[0] else None, ad.T @ g if need[1] else None)

    return _emit("matmul", ad @ bd, (a, b), backward)


def conv2d(x: Tensor, w: Tensor, padding: int = 1, stride: int = 1) -> Tensor:
    """Cross-correlation of an NCHW batch with FxCxKxK filters."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and filters, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if cw != c:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, filters {w.shape}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if hp < kh or wp < kw:
        raise ConfigurationError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise ConfigurationError(
            f"non-integral conv2d output size for input {h}x{wd}, padding {padding}, stride {stride}"
        )
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    # im2col in channels-last order: each copied run is one contiguous channel vector
    xp = np.zeros((n, hp, wp, c))
    xp[:, padding : padding + h, padding : padding + wd, :] = x.data.transpose(0, 2, 3, 1)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(f, -1)
    out = np.ascontiguousarray((cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2))

    def backward(g, need):
        dx = dw = None
        if need[1]:
            g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
            dw = (g2.T @ cols).reshape(f, kh, kw, c).transpose(0, 3, 1, 2)
        if need[0]:
            # column gradients laid out (kh, kw, c, n, ho, wo) so each kernel offset adds a contiguous block
            gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(f, -1)
            dct = (wmat.T @ gt).reshape(kh, kw, c, n, ho, wo)
            dxp = np.zeros((c, n, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dct[i, j]
            dx = np.ascontiguousarray(dxp[:, :, padding : padding + h, padding : padding + wd].transpose(1, 0, 2, 3))
        return dx, dw

    return _emit("conv2d", out, (x, w), backward)


def maxpool2d(x: Tensor, kernel: int = 2, stride: int = 1) -> Tensor:
    """Windowed max. Ties send the gradient to the first element in row-major order."""
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if kernel > h or kernel > w:
        raise ConfigurationError(f"maxpool kernel {kernel} larger than input {h}x{w}")
    if stride < 1:
        raise ConfigurationError(f"maxpool stride must be >= 1, got {stride}")
    ho, wo = (h - kernel) // stride + 1, (w - kernel) // stride + 1
    xd = x.data
    views = [xd[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] for i in range(kernel) for j in range(kernel)]
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)

    def backward(g, need):
        dx = np.zeros_like(xd)
        free = np.ones(out.shape, dtype=bool)  # first maximal offset in row-major order wins
        for o, v in enumerate(views):
            i, j = divmod(o, kernel)
            hit = free & (v == out)
            free &= ~hit
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += np.where(hit, g, 0.0)
        return (dx,)

    return _emit("maxpool2d", out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool expects NCHW input, got {x.shape}")
    shape = x.shape
    area = shape[2] * shape[3]

    def backward(g, need):
        return (np.broadcast_to(g[:, :, None, None] / area, shape).copy(),)

    return _emit("global_avg_pool", x.data.mean(axis=(2, 3)), (x,), backward)


@dataclass
class BatchNormStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        return cls(np.zeros(channels), np.ones(channels), momentum, eps)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, stats: BatchNormStats, train: bool) -> Tensor:
    """Batch normalisation over (N,) for 2-d input or (N, H, W) for NCHW input.

    Train mode normalises with the biased batch variance and updates the
    running statistics in ``stats`` (running variance uses the unbiased
    estimate). Eval mode uses the running statistics.
    """
    nd = x.data.ndim
    if nd not in (2, 4):
        raise DimensionError(f"batchnorm expects 2-d or 4-d input, got {x.shape}")
    axes = (0,) if nd == 2 else (0, 2, 3)
    bshape = (1, -1) if nd == 2 else (1, -1, 1, 1)
    if x.shape[1] != gamma.shape[0]:
        raise DimensionError(f"batchnorm channel mismatch: input {x.shape}, gamma {gamma.shape}")
    gd = gamma.data.reshape(bshape)
    if train:
        if x.shape[0] < 2:
            raise DegenerateBatchError(f"train-mode batchnorm needs batch size >= 2, got {x.shape[0]}")
        m = x.data.size // x.shape[1]
        mean = x.data.mean(axis=axes)
        centred = x.data - mean.reshape(bshape)
        var = np.mean(centred * centred, axis=axes)
        stats.mean = (1 - stats.momentum) * stats.mean + stats.momentum * mean
        stats.var = (1 - stats.momentum) * stats.var + stats.momentum * var * m / (m - 1)
    else:
        mean, var = stats.mean, stats.var
        centred = x.data - mean.reshape(bshape)
    invstd = 1.0 / np.sqrt(var + stats.eps)
    xhat = centred * invstd.reshape(bshape)
    out = gd * xhat + beta.data.reshape(bshape)

    def backward(g, need):
        dgamma = (g * xhat).sum(axis=axes) if need[1] else None
        dbeta = g.sum(axis=axes) if need[2] else None
        dx = None
        if need[0]:
            dxhat = g * gd
            if train:
                m = x.data.size // x.shape[1]
                s1 = dxhat.sum(axis=axes).reshape(bshape)
                s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
                dx = (invstd.reshape(bshape) / m) * (m * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * invstd.reshape(bshape)
        return dx, dgamma, dbeta

    return _emit("batchnorm", out, (x, gamma, beta), backward)


# ---------------------------------------------------------------- losses


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits)."""
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be N x K, got {logits.shape}")
    n, k = logits.shape
    t = np.asarray(targets)
    if t.shape != (n,):
        raise DimensionError(f"targets shape {t.shape} does not match logits {logits.shape}")
    if not np.issubdtype(t.dtype, np.integer):
        if not np.all(np.equal(np.mod(t, 1), 0)):
            raise DataError("targets must be integer class indices")
        t = t.astype(np.int64)
    if t.size and (t.min() < 0 or t.max() >= k):
        raise DataError(f"target out of range [0, {k}): min {t.min()}, max {t.max()}")
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, t].mean()

    def backward(g, need):
        d = np.exp(logp)
        d[rows, t] -= 1.0
        return (d * (g / n),)

    return _emit("softmax_cross_entropy", np.asarray(loss), (logits,), backward)


# ---------------------------------------------------------------- checking


def grad_check(
    f: Callable[[Tape], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-5,
    *,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``f`` builds a scalar on the tape it is given, watching ``params``. The
    analytic gradient comes from one backward pass restricted to ``params``.
    With ``max_coords`` set, that many coordinates per parameter are sampled.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    saved = [p.grad.copy() for p in params]
    zero_grads(params)
    tape = Tape()
    out = f(tape)
    tape.backward(out, params=params)
    analytic = [p.grad.copy() for p in params]
    for p, s in zip(params, saved):
        p.grad[...] = s

    return fd_compare(lambda: f(Tape()).item(), list(zip(params, analytic)), eps, max_coords=max_coords, seed=seed)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def fd_compare(
    value: Callable[[], float],
    pairs: Sequence[tuple[Parameter, np.ndarray]],
    eps: float = 1e-5,
    *,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Worst relative error of given gradients against central differences of ``value()``.

    Each parameter is perturbed in place, one coordinate at a time.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, a in pairs:
        flat = p.value.reshape(-1)
        if not np.shares_memory(flat, p.value):
            raise ValueError(f"parameter {p.id} is not contiguous")
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, max_coords, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = value()
            flat[i] = orig - eps
            down = value()
            flat[i] = orig
            worst = max(worst, relative_error(a.reshape(-1)[i], (up - down) / (2 * eps)))
    return worst
