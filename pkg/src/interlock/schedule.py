"""Discrete-event simulation of pipelined training schedules.

Each of ``a`` accelerators holds one component. Work items are a forward
pass per (component, batch) and one backward "box" per (component, batch,
loss) for every loss whose gradient crosses that component's body.
Auxiliary-head backward work rides along with the component's body work and
costs no slot of its own.

The simulator is a greedy list scheduler in integer time: whenever an
accelerator is idle it starts the highest-priority ready item (backward
before forward, then older batches first).
"""

from __future__ import annotations

import heapq
from collections import defaultdict
from dataclasses import dataclass, field

from .errors import ConfigurationError, DeadlockError
from .routing import RoutingPolicy, assignment

STRATEGIES = ("end_to_end", "n_wise", "grouped_local", "hogwild")


@dataclass(frozen=True)
class PipelineConfig:
    a: int
    b: int
    strategy: str = "n_wise"
    n: int = 1  # N for n_wise, g for grouped_local
    mix_local: bool = False
    forward_cost: int = 1
    backward_cost: int = 1
    comm_latency: int = 0

    def __post_init__(self):
        if self.a < 1 or self.b < 1:
            raise ConfigurationError(f"need a >= 1 and b >= 1, got a={self.a}, b={self.b}")
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.strategy == "n_wise" and not 1 <= self.n <= self.a:
            raise ConfigurationError(f"n_wise needs 1 <= N <= a, got N={self.n}, a={self.a}")
        if self.strategy == "grouped_local" and self.n < 1:
            raise ConfigurationError(f"grouped_local needs g >= 1, got {self.n}")
        if min(self.forward_cost, self.backward_cost) < 1 or self.comm_latency < 0:
            raise ConfigurationError("phase costs must be >= 1 and latency >= 0")

    @property
    def policy(self) -> RoutingPolicy:
        n = self.n if self.strategy in ("n_wise", "grouped_local") else 1
        return RoutingPolicy(self.strategy, n, self.mix_local)

    @property
    def blocking(self) -> bool:
        return self.strategy != "hogwild"


@dataclass(frozen=True)
class Event:
    accelerator: int  # 1-based component index
    slot: int  # start time
    batch: int  # 1-based
    phase: str  # "forward" | "backward"
    loss: int = 0  # loss index carried by a backward box
    duration: int = 1
    updates: bool = False  # backward box that applies this batch's body gradient


@dataclass
class ScheduleTrace:
    config: PipelineConfig
    events: list[Event]
    makespan: int

    def by_accelerator(self, k: int) -> list[Event]:
        return sorted((e for e in self.events if e.accelerator == k), key=lambda e: e.slot)

    @property
    def utilization(self) -> list[float]:
        busy = defaultdict(int)
        for e in self.events:
            busy[e.accelerator] += e.duration
        return [busy[k] / self.makespan for k in range(1, self.config.a + 1)]

    def find(self, k, i, phase, loss=0) -> Event:
        for e in self.events:
            if e.accelerator == k and e.batch == i and e.phase == phase and (phase == "forward" or e.loss == loss):
                return e
        raise KeyError((k, i, phase, loss))


def closed_form_timesteps(strategy: str, a: int, b: int, n: int | None = None) -> int:
    """Total unit timesteps for ``a`` accelerators to finish ``b`` training steps."""
    if a < 1 or b < 1:
        raise ConfigurationError(f"need a >= 1 and b >= 1, got a={a}, b={b}")
    if strategy == "end_to_end":
        return 2 * b * a
    if strategy == "hogwild":
        return 2 * (b + a - 1)
    if strategy == "n_wise":
        if n is None or not 1 <= n <= a:
            raise ConfigurationError(f"n_wise needs 1 <= N <= a, got N={n}, a={a}")
        return 2 * b * n + a - n
    if strategy == "grouped_local":
        if n is None or n < 1:
            raise ConfigurationError(f"grouped_local needs g >= 1, got {n}")
        g = min(n, a)
        top = a - g * ((a - 1) // g)  # size of the topmost (possibly partial) block
        return 2 * g * (b - 1) + a + max(top, g - top)
    raise ConfigurationError(f"unknown strategy {strategy!r}")


def simulate(config: PipelineConfig) -> ScheduleTrace:
    a_count, b_count = config.a, config.b
    assign = assignment(config.policy, a_count)
    fc, bc, lat = config.forward_cost, config.backward_cost, config.comm_latency
    cadence = fc + bc
    blocking = config.blocking

    boxes = [()] + [tuple(assign.boxes(k)) for k in range(1, a_count + 1)]
    updates = [frozenset()] + list(assign.param_losses)
    fwd_done: dict[tuple, int] = {}  # (k, i) -> finish time
    box_done: dict[tuple, int] = {}  # (k, i, j) -> finish time
    fwd_start: dict[int, int] = {}  # batch -> start of its forward on accelerator 1
    next_fwd = [0] + [1] * a_count
    open_boxes: list[list[tuple]] = [[] for _ in range(a_count + 1)]  # (i, j), kept sorted
    busy_until = [0] * (a_count + 1)
    never = 1 << 62

    def forward_ready(k, t) -> bool:
        i = next_fwd[k]
        if i > b_count:
            return False
        if k > 1 and fwd_done.get((k - 1, i), never) + lat > t:
            return False
        if i > 1:
            if blocking:
                for j in updates[k]:
                    if box_done.get((k, i - 1, j), never) > t:
                        return False
            elif k == 1 and fwd_start[i - 1] + cadence > t:
                return False
        return True

    def ready_box(k, t):
        for pos, (i, j) in enumerate(open_boxes[k]):
            if j == k or box_done.get((k + 1, i, j), never) + lat <= t:
                return pos
        return None

    events: list[Event] = []
    remaining = a_count * b_count + sum(len(v) for v in boxes) * b_count
    horizon = 4 * cadence * (a_count + 1) * (b_count + 1) * (a_count + 1) + 16 * lat * a_count * b_count
    # only the finishing accelerator and its two neighbours can gain work
    wake: list[tuple] = [(0, k) for k in range(1, a_count + 1)]
    while remaining:
        if not wake:
            raise DeadlockError(f"deadlock with {remaining} items left for {config}")
        t = wake[0][0]
        if t > horizon:
            raise DeadlockError(f"no progress by t={t} for {config}")
        ks = set()
        while wake and wake[0][0] == t:
            ks.add(heapq.heappop(wake)[1])
        for k in sorted(ks):
            if busy_until[k] > t:
                continue
            pos = ready_box(k, t)
            if pos is not None:
                i, j = open_boxes[k].pop(pos)
                dur = bc
                box_done[(k, i, j)] = t + dur
                events.append(Event(k, t, i, "backward", j, dur, j in updates[k]))
            elif forward_ready(k, t):
                i = next_fwd[k]
                next_fwd[k] += 1
                dur = fc
                fwd_done[(k, i)] = t + dur
                if k == 1:
                    fwd_start[i] = t
                open_boxes[k].extend((i, j) for j in boxes[k])
                events.append(Event(k, t, i, "forward", 0, dur))
            else:
                continue
            remaining -= 1
            busy_until[k] = t + dur
            heapq.heappush(wake, (t + dur, k))
            for nb in (k - 1, k + 1):
                if 1 <= nb <= a_count:
                    heapq.heappush(wake, (t + dur + lat, nb))
            if k == 1 and not blocking:
                heapq.heappush(wake, (t + cadence, 1))
    makespan = max(e.slot + e.duration for e in events)
    events.sort(key=lambda e: (e.slot, e.accelerator))
    return ScheduleTrace(config, events, makespan)


@dataclass
class StalenessRecord:
    """Body-parameter updates applied between a batch's forward and its own update."""

    values: dict[tuple, int] = field(default_factory=dict)  # (k, i) -> count
    a: int = 0
    b: int = 0

    def component(self, k: int) -> list[int]:
        return [self.values[(k, i)] for i in range(1, self.b + 1)]

    def steady_state(self) -> list[int]:
        """Per-component staleness of the last batch."""
        return [self.values[(k, self.b)] for k in range(1, self.a + 1)]

    def max(self) -> int:
        return max(self.values.values(), default=0)


def staleness(trace: ScheduleTrace) -> StalenessRecord:
    cfg = trace.config
    # when each batch's gradient lands on each component: end of its last update box
    applied: dict[tuple, int] = {}
    fwd_start: dict[tuple, int] = {}
    for e in trace.events:
        key = (e.accelerator, e.batch)
        if e.phase == "forward":
            fwd_start[key] = e.slot
        elif e.updates:
            applied[key] = max(applied.get(key, 0), e.slot + e.duration)
    rec = StalenessRecord(a=cfg.a, b=cfg.b)
    for k in range(1, cfg.a + 1):
        lands = sorted((t, i) for (kk, i), t in applied.items() if kk == k)
        for i in range(1, cfg.b + 1):
            s = fwd_start[(k, i)]
            own = applied.get((k, i))
            if own is None:
                rec.values[(k, i)] = 0
                continue
            # the own update starts at own - backward_cost; count others landing before it
            cutoff = own - cfg.backward_cost
            rec.values[(k, i)] = sum(1 for t, ii in lands if ii != i and s < t <= cutoff)
    return rec


def trace_violations(trace: ScheduleTrace) -> list[str]:
    """Check a trace against double-booking and the per-strategy causality rules."""
    cfg = trace.config
    problems = []
    occupied = {}
    for e in trace.events:
        for s in range(e.slot, e.slot + e.duration):
            if (e.accelerator, s) in occupied:
                problems.append(f"accelerator {e.accelerator} double-booked at slot {s}")
            occupied[(e.accelerator, s)] = e
    fwd = {(e.accelerator, e.batch): e for e in trace.events if e.phase == "forward"}
    bwd = {(e.accelerator, e.batch, e.loss): e for e in trace.events if e.phase == "backward"}
    for (k, i), e in fwd.items():
        if k > 1 and fwd[(k - 1, i)].slot + cfg.forward_cost > e.slot:
            problems.append(f"forward({k},{i}) starts before forward({k - 1},{i}) ends")
    for (k, i, j), e in bwd.items():
        if fwd[(k, i)].slot + cfg.forward_cost > e.slot:
            problems.append(f"backward({k},{i},L{j}) before its forward")
        if j > k:
            up = bwd.get((k + 1, i, j))
            if up is None or up.slot + cfg.backward_cost > e.slot:
                problems.append(f"backward({k},{i},L{j}) does not wait for backward({k + 1},{i},L{j})")
    if cfg.blocking:
        for (k, i), e in fwd.items():
            if i == 1:
                continue
            for (kk, ii, j), be in bwd.items():
                if kk == k and ii == i - 1 and be.updates and be.slot + cfg.backward_cost > e.slot:
                    problems.append(f"forward({k},{i}) starts before batch {i - 1}'s update lands")
    return problems
