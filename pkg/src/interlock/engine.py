"""Training loops, evaluation and run metrics.

Two execution modes share the per-component routing code:

``reference``
    One thread, one batch at a time. Defines the semantics. Hogwild is
    emulated with a per-component FIFO that holds each body gradient back
    for ``n - k`` updates.
``pipelined``
    One thread per component. Components exchange activations upwards and
    cotangents downwards through mailboxes and never touch each other's
    parameters. Each worker executes its events in the order produced by
    :func:`interlock.schedule.simulate`, which makes runs deterministic.
"""

from __future__ import annotations

import queue
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .data import AugmentPolicy, Batch, Dataset, batches
from .errors import ConfigurationError, WorkerError
from .model import PartitionedModel, predict_logits
from .optim import LrSchedule, OptimizerConfig, OptimizerState, lr_at
from .routing import ComponentPass, RoutedStep, RoutingPolicy, assignment
from .schedule import PipelineConfig, closed_form_timesteps, simulate
from .tensor import softmax

MODES = ("reference", "pipelined")


@dataclass(frozen=True)
class TrainSettings:
    steps: int | None = None
    epochs: int | None = None
    logical_time: int | None = None
    batch_size: int = 64
    eval_every: int = 0  # 0: evaluate once, at the end
    eval_examples: int | None = None  # cap on examples per split during evaluation
    mode: str = "reference"
    wall_clock: bool = False  # write measured seconds into time_wall
    phase_delay: float = 0.0  # pipelined: extra seconds charged to every phase
    augment: AugmentPolicy = AugmentPolicy()

    def __post_init__(self):
        budgets = [b for b in (self.steps, self.epochs, self.logical_time) if b is not None]
        if len(budgets) != 1:
            raise ConfigurationError("budget: set exactly one of steps, epochs, logical_time")
        if budgets[0] < 1:
            raise ConfigurationError("budget must be positive")
        if self.mode not in MODES:
            raise ConfigurationError(f"train.mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size < 1:
            raise ConfigurationError("train.batch_size must be >= 1")


# ---------------------------------------------------------------- metrics


@dataclass
class StepRow:
    step: int
    time_logical: int
    time_wall: float
    lr: float
    losses: list[float]


@dataclass
class EvalRow:
    step: int
    split: str
    head_accuracy: list[float]
    ensemble_accuracy: list[float]  # entry m-1 ensembles the top m heads
    staleness: float = 0.0


@dataclass
class RunMetrics:
    n: int
    steps: list[StepRow] = field(default_factory=list)
    evals: list[EvalRow] = field(default_factory=list)
    staleness: list[float] = field(default_factory=list)  # mean measured per component

    def final_eval(self, split: str = "test") -> EvalRow:
        rows = [e for e in self.evals if e.split == split]
        if not rows:
            raise LookupError(f"no {split} evaluation recorded")
        return rows[-1]

    def final_loss(self, window: int = 1) -> float:
        """Task loss averaged over the last ``window`` steps."""
        tail = self.steps[-window:]
        return float(np.mean([r.losses[-1] for r in tail]))


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    head_accuracy: list[float]
    ensemble_accuracy: list[float]  # m = 1..n

    def ensemble(self, m: int) -> float:
        return self.ensemble_accuracy[m - 1]


def ensemble_predictions(logits: list[np.ndarray], m: int) -> np.ndarray:
    """Class predictions from averaged softmax probabilities of the top ``m`` heads."""
    n = len(logits)
    if not 1 <= m <= n:
        raise ValueError(f"ensemble size must be in [1, {n}], got {m}")
    probs = np.mean([softmax(lg) for lg in logits[n - m :]], axis=0)
    return probs.argmax(axis=1)


def accuracies(logits: list[np.ndarray], y: np.ndarray) -> EvalResult:
    heads = [float(np.mean(lg.argmax(axis=1) == y)) for lg in logits]
    ens = [float(np.mean(ensemble_predictions(logits, m) == y)) for m in range(1, len(logits) + 1)]
    return EvalResult(heads, ens)


def evaluate(model: PartitionedModel, x, y, ensemble_top_m: int | None = None) -> EvalResult:
    """Per-head accuracy and top-m ensembles, with batch norm in eval mode."""
    n = model.n
    if ensemble_top_m is not None and not 1 <= ensemble_top_m <= n:
        raise ValueError(f"ensemble_top_m must be in [1, {n}], got {ensemble_top_m}")
    return accuracies(predict_logits(model, x), np.asarray(y))


def _eval_rows(model, ds: Dataset, step, cap, staleness) -> list[EvalRow]:
    rows = []
    for split, (x, y) in (("train", ds.train), ("test", ds.test)):
        if len(x) == 0:
            continue
        if cap is not None:
            x, y = x[:cap], y[:cap]
        res = evaluate(model, x, y)
        rows.append(EvalRow(step, split, res.head_accuracy, res.ensemble_accuracy, staleness))
    return rows


# ---------------------------------------------------------------- shared helpers


def total_steps(settings: TrainSettings, ds: Dataset, policy: RoutingPolicy, n: int) -> int:
    if settings.steps is not None:
        return settings.steps
    if settings.epochs is not None:
        return settings.epochs * max(1, ds.n_train // min(settings.batch_size, ds.n_train))
    b = 0
    while logical_time(policy, n, b + 1) <= settings.logical_time:
        b += 1
    if b == 0:
        raise ConfigurationError(f"logical time budget {settings.logical_time} is below one step")
    return b


def logical_time(policy: RoutingPolicy, n: int, steps: int) -> int:
    """Unit-cost pipeline time for ``steps`` training steps on ``n`` accelerators."""
    if policy.kind == "n_wise":
        return closed_form_timesteps("n_wise", n, steps, min(policy.n, n))
    if policy.kind == "grouped_local":
        return closed_form_timesteps("grouped_local", n, steps, policy.n)
    return closed_form_timesteps(policy.kind, n, steps)


def _pipeline_config(policy: RoutingPolicy, n: int, steps: int) -> PipelineConfig:
    if policy.kind == "n_wise":
        return PipelineConfig(n, steps, "n_wise", min(policy.n, n), policy.mix_local)
    if policy.kind == "grouped_local":
        return PipelineConfig(n, steps, "grouped_local", policy.n, policy.mix_local)
    return PipelineConfig(n, steps, policy.kind)


class _LrTable:
    def __init__(self, schedule: LrSchedule, steps_per_epoch: int):
        self.schedule = schedule
        self.spe = steps_per_epoch

    def __call__(self, step: int) -> float:
        if self.schedule.per_epoch:
            return lr_at(self.schedule, (step - 1) // self.spe + 1)
        return lr_at(self.schedule, step)


@dataclass
class RunResult:
    metrics: RunMetrics
    steps: int
    body_opts: list[OptimizerState]
    head_opts: list[OptimizerState]


def train(
    model: PartitionedModel,
    policy: RoutingPolicy,
    dataset: Dataset,
    optimizer: OptimizerConfig,
    schedule: LrSchedule,
    settings: TrainSettings,
    seed: int = 0,
    *,
    on_row: Callable[[object], None] | None = None,
    start_step: int = 0,
    body_opts: list[OptimizerState] | None = None,
    head_opts: list[OptimizerState] | None = None,
) -> RunResult:
    """Train ``model`` in place under ``policy``.

    ``seed`` fixes the batch order (shared across strategies for paired
    comparisons). ``on_row`` receives every step and eval row as it is
    produced, so callers can stream metrics to disk.

    To resume, pass the restored optimizer states and the number of steps
    already taken; the batch stream is advanced past them so the continued
    run matches an uninterrupted one.
    """
    if tuple(dataset.input_shape) != tuple(model.components[0].in_shape):
        raise ConfigurationError(
            f"dataset inputs {dataset.input_shape} do not match model input {model.components[0].in_shape}"
        )
    n = model.n
    steps = total_steps(settings, dataset, policy, n)
    spe = max(1, dataset.n_train // min(settings.batch_size, dataset.n_train))
    lr_of = _LrTable(schedule, spe)
    if not 0 <= start_step < steps:
        raise ConfigurationError(f"cannot resume at step {start_step} of a {steps}-step budget")
    body_opts = body_opts or [OptimizerState(optimizer) for _ in range(n)]
    head_opts = head_opts or [OptimizerState(optimizer) for _ in range(n)]
    if len(body_opts) != n or len(head_opts) != n:
        raise ConfigurationError(f"expected {n} optimizer states per group")
    stream = batches(dataset, settings.batch_size, seed, settings.augment)
    for _ in range(start_step):
        next(stream)
    metrics = RunMetrics(n)
    emit = on_row or (lambda row: None)

    runner = _run_reference if settings.mode == "reference" else _run_pipelined
    runner(model, policy, dataset, stream, lr_of, body_opts, head_opts, settings, (start_step, steps), metrics, emit)
    return RunResult(metrics, steps, body_opts, head_opts)


def _record_step(metrics, emit, policy, n, step, t0, lr, losses, settings, at=None):
    wall = ((at if at is not None else time.perf_counter()) - t0) if settings.wall_clock else 0.0
    row = StepRow(step, logical_time(policy, n, step), wall, lr, losses)
    metrics.steps.append(row)
    emit(row)


def _record_eval(model, dataset, metrics, emit, step, settings, staleness=0.0):
    for row in _eval_rows(model, dataset, step, settings.eval_examples, staleness):
        metrics.evals.append(row)
        emit(row)


# ---------------------------------------------------------------- reference mode


@dataclass
class StaleGradientQueue:
    """Per-component FIFO holding body gradients back by a fixed number of updates."""

    delays: list[int]
    queues: list[deque] = field(default_factory=list)
    applied: list[int] = field(default_factory=list)
    observed: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        self.queues = [deque() for _ in self.delays]
        self.applied = [0] * len(self.delays)
        self.observed = [[] for _ in self.delays]

    def push(self, k: int, grads: list[np.ndarray], step: int, lr: float):
        self.queues[k - 1].append((grads, step, lr, self.applied[k - 1]))

    def due(self, k: int):
        q = self.queues[k - 1]
        while len(q) > self.delays[k - 1]:
            yield self._pop(k)

    def drain(self, k: int):
        q = self.queues[k - 1]
        while q:
            yield self._pop(k)

    def _pop(self, k):
        grads, step, lr, mark = self.queues[k - 1].popleft()
        self.observed[k - 1].append(self.applied[k - 1] - mark)
        self.applied[k - 1] += 1
        return grads, step, lr

    def empty(self) -> bool:
        return not any(self.queues)

    def mean_staleness(self) -> list[float]:
        return [float(np.mean(o)) if o else 0.0 for o in self.observed]


def _apply_stale(model, k, opt, grads, step, lr):
    params = model.body_params(k)
    for p, g in zip(params, grads):
        p.grad[...] = g
    opt.apply(params, lr, global_step=step)


def _run_reference(model, policy, dataset, stream, lr_of, body_opts, head_opts, settings, span, metrics, emit):
    n = model.n
    start, steps = span
    hogwild = policy.kind == "hogwild"
    stale = StaleGradientQueue([n - k for k in range(1, n + 1)]) if hogwild else None
    t0 = time.perf_counter()
    for step in range(start + 1, steps + 1):
        batch = next(stream)
        lr = lr_of(step)
        rs = RoutedStep(model, policy, batch.x, batch.y)
        rs.backward()
        for k in range(1, n + 1):
            head_opts[k - 1].apply(model.head_params(k), lr, global_step=step)
            if hogwild:
                body = model.body_params(k)
                stale.push(k, [p.grad.copy() for p in body], step, lr)
                T.zero_grads(body)
                for grads, origin, olr in stale.due(k):
                    _apply_stale(model, k, body_opts[k - 1], grads, origin, olr)
            else:
                body_opts[k - 1].apply(model.body_params(k), lr, global_step=step)
        _record_step(metrics, emit, policy, n, step, t0, lr, rs.losses, settings)
        if settings.eval_every and step % settings.eval_every == 0 and step != steps:
            s = float(np.mean(stale.mean_staleness())) if hogwild else 0.0
            _record_eval(model, dataset, metrics, emit, step, settings, s)
    if hogwild:
        for k in range(1, n + 1):
            for grads, origin, olr in stale.drain(k):
                _apply_stale(model, k, body_opts[k - 1], grads, origin, olr)
        metrics.staleness = stale.mean_staleness()
    else:
        metrics.staleness = [0.0] * n
    _record_eval(model, dataset, metrics, emit, steps, settings, float(np.mean(metrics.staleness)))


# ---------------------------------------------------------------- pipelined mode


class _Mailbox:
    """Inbound channel of one worker; messages are keyed so arrival order does not matter."""

    def __init__(self, failed: threading.Event):
        self.q: queue.Queue = queue.Queue()
        self.held: dict = {}
        self.failed = failed

    def put(self, key, payload):
        self.q.put((key, payload))

    def get(self, key):
        while key not in self.held:
            try:
                k, payload = self.q.get(timeout=0.05)
            except queue.Empty:
                if self.failed.is_set():
                    raise WorkerError("peer worker failed; channel closed") from None
                continue
            self.held[k] = payload
        return self.held.pop(key)


class _Pipeline:
    def __init__(self, model, policy, stream, lr_of, body_opts, head_opts, settings, steps, offset=0):
        self.model = model
        self.policy = policy
        self.stream = stream
        self.lr_of = lr_of
        self.body_opts = body_opts
        self.head_opts = head_opts
        self.settings = settings
        self.steps = steps
        self.offset = offset  # steps taken before this pipeline started
        self.n = model.n
        self.assign = assignment(policy, self.n)
        self.trace = simulate(_pipeline_config(policy, self.n, steps))
        self.failed = threading.Event()
        self.errors: list[BaseException] = []
        self.up = [_Mailbox(self.failed) for _ in range(self.n + 1)]  # activations into k
        self.down = [_Mailbox(self.failed) for _ in range(self.n + 1)]  # cotangents into k
        self.losses: dict[tuple, float] = {}
        self.finished_at: dict[int, float] = {}  # batch -> when the top component logged it
        self.staleness: list[list[int]] = [[] for _ in range(self.n)]
        self.lock = threading.Lock()

    def worker(self, k: int):
        try:
            self._work(k)
        except BaseException as exc:  # noqa: BLE001 - any failure aborts the run
            with self.lock:
                self.errors.append(exc)
            self.failed.set()

    def _work(self, k: int):
        model, a = self.model, self.assign
        comp_boxes = a.boxes(k)
        update_losses = a.param_losses[k - 1]
        weight = self.policy.weight(k, self.n)
        passes: dict[int, ComponentPass] = {}
        pending_updates: dict[int, int] = {}
        applied = 0
        marks: dict[int, int] = {}
        delay = self.settings.phase_delay
        for ev in self.trace.by_accelerator(k):
            if self.failed.is_set():
                return
            outbox = []  # sent once the phase's time has been charged
            i = ev.batch
            gi = i + self.offset
            lr = self.lr_of(gi)
            if ev.phase == "forward":
                if k == 1:
                    batch: Batch = next(self.stream)
                    x, y = batch.x, batch.y
                else:
                    x, y = self.up[k].get(("act", i))
                cp = ComponentPass(model, k, x, y, weight=weight)
                passes[i] = cp
                marks[i] = applied
                pending_updates[i] = len(update_losses & set(comp_boxes))
                with self.lock:
                    self.losses[(k, i)] = cp.loss.item()
                if k < self.n:
                    outbox.append((self.up[k + 1], ("act", i), (cp.activation, y)))
                if k not in comp_boxes:
                    cp.head_only()
                    self.head_opts[k - 1].apply(model.head_params(k), lr, global_step=gi)
                if not comp_boxes:
                    del passes[i]
            else:
                j = ev.loss
                cp = passes[i]
                cot = None if j == k else self.down[k].get(("grad", i, j))
                send = a.sends_down(k, j) and k > 1
                g = cp.box(j, cot, update_body=j in update_losses, send_down=send)
                if g is not None:
                    outbox.append((self.down[k - 1], ("grad", i, j), g))
                if j == k:
                    self.head_opts[k - 1].apply(model.head_params(k), lr, global_step=gi)
                if j in update_losses:
                    pending_updates[i] -= 1
                    if pending_updates[i] == 0:
                        self.body_opts[k - 1].apply(model.body_params(k), lr, global_step=gi)
                        self.staleness[k - 1].append(applied - marks.pop(i))
                        applied += 1
                if j == comp_boxes[-1]:
                    del passes[i]
            if delay:
                time.sleep(delay)
            for box, key, payload in outbox:
                box.put(key, payload)
            if k == self.n and ev.phase == "forward":
                with self.lock:
                    self.finished_at[i] = time.perf_counter()

    def run(self):
        threads = [threading.Thread(target=self.worker, args=(k,), daemon=True) for k in range(1, self.n + 1)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()

    def completed_steps(self) -> int:
        i = 0
        while all((k, i + 1) in self.losses for k in range(1, self.n + 1)):
            i += 1
        return i


def _run_pipelined(model, policy, dataset, stream, lr_of, body_opts, head_opts, settings, span, metrics, emit):
    n = model.n
    start, steps = span
    pipe = _Pipeline(model, policy, stream, lr_of, body_opts, head_opts, settings, steps - start, start)
    t0 = time.perf_counter()
    pipe.run()
    done = pipe.completed_steps() if pipe.errors else steps - start
    for i in range(1, done + 1):
        losses = [pipe.losses[(k, i)] for k in range(1, n + 1)]
        gi = start + i
        _record_step(metrics, emit, policy, n, gi, t0, lr_of(gi), losses, settings, pipe.finished_at.get(i))
    if pipe.errors:
        raise WorkerError(f"pipelined run aborted after {start + done} complete steps: {pipe.errors[0]!r}") from pipe.errors[0]
    metrics.staleness = [float(np.mean(s)) if s else 0.0 for s in pipe.staleness]
    _record_eval(model, dataset, metrics, emit, steps, settings, float(np.mean(metrics.staleness)))
