"""Config-driven runs: dataset and model construction, training, artifacts."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from . import data as D
from .config import RunConfig, derive_seed, parse_config, serialize_config, strategy_label
from .engine import RunMetrics, RunResult, train
from .io import (
    MetricsWriter,
    append_results,
    model_checkpoint,
    read_checkpoint,
    restore_model,
    restore_optimizers,
    results_row,
    write_checkpoint,
)
from .model import PartitionedModel, build

OUTPUT_ENV = "INTERLOCK_OUTPUT"
METRICS_FILE = "metrics.csv"
CHECKPOINT_FILE = "checkpoint.ilbp"
RESULTS_FILE = "results.csv"


def output_root(cfg: RunConfig) -> Path:
    """``cfg.output``, resolved against ``$INTERLOCK_OUTPUT`` when that is set."""
    root = os.environ.get(OUTPUT_ENV)
    return Path(root) / cfg.output if root else Path(cfg.output)


def data_seed(cfg: RunConfig, seed: int) -> int:
    return cfg.data.seed if cfg.data.seed is not None else derive_seed(seed, "data")


def build_dataset(cfg: RunConfig, seed: int) -> D.Dataset:
    d = cfg.data
    s = data_seed(cfg, seed)
    split = {} if d.test_fraction is None else {"test_fraction": d.test_fraction}
    noise = {} if d.noise is None else {"noise": d.noise}
    if d.kind == "images":
        ds = D.synth_images(d.classes, d.h, d.w, d.channels, d.n, s, **noise, **split)
    elif d.kind == "blobs":
        ds = D.synth_blobs(d.classes, d.dims, d.n, s, d.separation, **split)
    elif d.kind == "spirals":
        ds = D.synth_spirals(d.classes, d.n, seed=s, **noise, **split)
    elif d.kind == "idx":
        ds = D.load_idx(
            d.path,
            d.labels,
            test_images=d.test_path or None,
            test_labels=d.test_labels or None,
            seed=s,
            **split,
        )
    else:
        ds = D.load_csv(d.path, seed=s, **split)
    return D.normalize(ds) if d.normalize else ds


def build_model(cfg: RunConfig, ds: D.Dataset, seed: int) -> PartitionedModel:
    return build(cfg.architecture(ds.input_shape, ds.num_classes), seed=derive_seed(seed, "init"))


@dataclass
class SeedRun:
    seed: int
    model: PartitionedModel
    result: RunResult
    directory: Path | None

    @property
    def metrics(self) -> RunMetrics:
        return self.result.metrics


def run_seed(cfg: RunConfig, seed: int, directory: Path | None = None, dataset: D.Dataset | None = None) -> SeedRun:
    """Train one seed. With ``directory`` set, stream metrics and write a checkpoint there."""
    ds = dataset if dataset is not None else build_dataset(cfg, seed)
    model = build_model(cfg, ds, seed)
    policy, settings = cfg.policy(), cfg.settings()
    batch_seed = derive_seed(seed, "batches")
    if directory is None:
        result = train(model, policy, ds, cfg.optim, cfg.schedule, settings, batch_seed)
        return SeedRun(seed, model, result, None)
    directory.mkdir(parents=True, exist_ok=True)
    with MetricsWriter(directory / METRICS_FILE, model.n) as sink:
        result = train(model, policy, ds, cfg.optim, cfg.schedule, settings, batch_seed, on_row=sink)
    _save(cfg, seed, model, result, directory)
    return SeedRun(seed, model, result, directory)


def _save(cfg: RunConfig, seed: int, model: PartitionedModel, result: RunResult, directory: Path):
    ckpt = model_checkpoint(
        model,
        step=result.steps,
        seed=seed,
        body_opts=result.body_opts,
        head_opts=result.head_opts,
        extra={"strategy": strategy_label(cfg.strategy), "config": serialize_config(cfg)},
    )
    write_checkpoint(directory / CHECKPOINT_FILE, ckpt)


def resume_seed(checkpoint: Path, cfg: RunConfig | None = None) -> SeedRun:
    """Continue the run that wrote ``checkpoint`` up to the budget of ``cfg``.

    ``cfg`` defaults to the config stored in the checkpoint; pass one with a
    larger budget to extend a finished run. Metrics are appended to the run's
    metrics file and the checkpoint is replaced. Hogwild gradients still in
    flight are applied before a checkpoint is written, so a resumed hogwild
    run is not bitwise identical to an uninterrupted one.
    """
    checkpoint = Path(checkpoint)
    ckpt = read_checkpoint(checkpoint)
    cfg = cfg if cfg is not None else parse_config(ckpt.header["config"])
    seed = ckpt.seed
    ds = build_dataset(cfg, seed)
    model = restore_model(ckpt)
    directory = checkpoint.parent
    with MetricsWriter(directory / METRICS_FILE, model.n, append=True) as sink:
        result = train(
            model,
            cfg.policy(),
            ds,
            cfg.optim,
            cfg.schedule,
            cfg.settings(),
            derive_seed(seed, "batches"),
            on_row=sink,
            start_step=ckpt.step,
            body_opts=restore_optimizers(ckpt, "body"),
            head_opts=restore_optimizers(ckpt, "head"),
        )
    _save(cfg, seed, model, result, directory)
    return SeedRun(seed, model, result, directory)


def run_config(cfg: RunConfig, root: Path | None = None) -> list[SeedRun]:
    """Every seed of ``cfg``; one results row per seed appended to the results table."""
    root = root if root is not None else output_root(cfg)
    runs = []
    for seed in cfg.seeds:
        run = run_seed(cfg, seed, root / cfg.name / f"seed{seed}")
        row = results_row(cfg.name, strategy_label(cfg.strategy), run.model.spec, seed, cfg.train.mode, run.metrics)
        append_results(root / cfg.name / RESULTS_FILE, [row])
        runs.append(run)
    return runs
