"""Desk-scale experiments shared by ``scripts/`` and the acceptance suite.

Each run trains a toy-conv model on the synthetic image task and keeps the
numbers the comparisons need: final per-head accuracies and the final task
loss. The dataset is fixed (seed 0); the run seed picks the initialisation
and the batch order.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from .config import strategy_from_label
from .engine import TrainSettings, train
from .model import ArchitectureSpec, build
from .optim import LrSchedule, OptimizerConfig
from .routing import RoutingPolicy

ORDERING_STRATEGIES = ("1-wise", "grouped-2", "2-wise", "end_to_end")


@dataclass(frozen=True)
class DeskSettings:
    steps: int = 250
    batch_size: int = 32
    lr: float = 3e-4
    eval_examples: int = 1000  # training examples scored at the end; the test split is scored in full
    image_size: int = 16
    loss_window: int = 25  # steps averaged into the final loss


@dataclass
class DeskRun:
    strategy: str
    depth: int
    seed: int
    train_heads: list[float]
    test_heads: list[float]
    final_loss: float
    seconds: float

    @property
    def test_acc(self) -> float:
        return self.test_heads[-1]


@dataclass
class Summary:
    """Seed means per strategy label."""

    runs: list[DeskRun] = field(default_factory=list)

    def select(self, strategy: str, depth: int | None = None) -> list[DeskRun]:
        return [r for r in self.runs if r.strategy == strategy and (depth is None or r.depth == depth)]

    def mean_test(self, strategy: str, depth: int | None = None) -> float:
        return float(np.mean([r.test_acc for r in self.select(strategy, depth)]))

    def mean_loss(self, strategy: str, depth: int | None = None) -> float:
        return float(np.mean([r.final_loss for r in self.select(strategy, depth)]))

    def mean_train_heads(self, strategy: str, depth: int | None = None) -> list[float]:
        return np.mean([r.train_heads for r in self.select(strategy, depth)], axis=0).tolist()


def desk_dataset(settings: DeskSettings = DeskSettings()) -> D.Dataset:
    s = settings.image_size
    return D.normalize(D.synth_images(h=s, w=s, seed=0))


def policy_for(label: str) -> RoutingPolicy:
    s = strategy_from_label(label)
    return RoutingPolicy(s.kind, s.n, s.mix_local)


def run(label: str, dataset: D.Dataset, depth: int, seed: int, settings: DeskSettings = DeskSettings()) -> DeskRun:
    spec = ArchitectureSpec("toy_conv", dataset.input_shape, dataset.num_classes, depth=depth)
    model = build(spec, seed=seed)
    t0 = time.perf_counter()
    res = train(
        model,
        policy_for(label),
        dataset,
        OptimizerConfig("adam"),
        LrSchedule(lr=settings.lr),
        TrainSettings(steps=settings.steps, batch_size=settings.batch_size, eval_examples=settings.eval_examples),
        seed=seed,
    )
    m = res.metrics
    return DeskRun(
        label,
        depth,
        seed,
        list(m.final_eval("train").head_accuracy),
        list(m.final_eval("test").head_accuracy),
        m.final_loss(settings.loss_window),
        time.perf_counter() - t0,
    )


def ordering_runs(seeds=range(4), depth: int = 6, settings: DeskSettings = DeskSettings(), on_run=None) -> Summary:
    ds = desk_dataset(settings)
    out = Summary()
    for seed in seeds:
        for label in ORDERING_STRATEGIES:
            r = run(label, ds, depth, seed, settings)
            out.runs.append(r)
            if on_run:
                on_run(r)
    return out


def hogwild_runs(depths=(3, 4, 5), seeds=range(3), settings: DeskSettings = DeskSettings(image_size=8), on_run=None) -> Summary:
    ds = desk_dataset(settings)
    out = Summary()
    for depth in depths:
        for seed in seeds:
            for label in ("1-wise", "hogwild"):
                r = run(label, ds, depth, seed, settings)
                out.runs.append(r)
                if on_run:
                    on_run(r)
    return out


def degradation(summary: Summary, depth: int) -> float:
    """Mean final-loss excess of hogwild over 1-wise at ``depth``."""
    return summary.mean_loss("hogwild", depth) - summary.mean_loss("1-wise", depth)
