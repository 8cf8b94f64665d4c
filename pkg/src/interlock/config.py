"""Run configuration: flat ``section.key = value`` text, parsed into dataclasses.

Format rules:

* one ``key = value`` per line; ``#`` starts a comment; blank lines ignored
* tuples are comma-separated (``model.widths = 64,64,64``); an empty value is
  the empty tuple
* ``none`` unsets an optional field; booleans are ``true``/``false``
* ``seeds`` also accepts an inclusive range, ``seeds = 0..3``

Sub-seeds come from the root seed and a role string:
``int.from_bytes(sha256(f"{root}/{role}").digest()[:8], "little") >> 1``.
Roles used: ``init``, ``data``, ``batches``.
"""

from __future__ import annotations

import hashlib
import typing
from dataclasses import dataclass, fields, replace

from .data import AugmentPolicy
from .errors import ConfigurationError
from .model import ArchitectureSpec
from .optim import LrSchedule, OptimizerConfig
from .routing import RoutingPolicy


def derive_seed(root: int, role: str) -> int:
    digest = hashlib.sha256(f"{root}/{role}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass(frozen=True)
class ModelConfig:
    preset: str = "toy_conv"
    depth: int = 6
    widths: tuple = (64, 64, 64)
    blocks: int = 4
    aux_head: str = "linear"
    filters: tuple = (32, 64)
    res_width: int = 16
    head_filters: tuple = (128, 64)


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "n_wise"
    n: int = 1
    mix_local: bool = False
    aux_weights: tuple = ()  # empty: every loss weighted 1


@dataclass(frozen=True)
class DataConfig:
    kind: str = "images"  # images | blobs | spirals | idx | csv
    seed: int | None = None  # None: derived from the root seed
    n: int = 12000
    classes: int = 10
    dims: int = 2
    separation: float = 10.0
    noise: float | None = None  # None: generator default
    h: int = 16
    w: int = 16
    channels: int = 3
    test_fraction: float | None = None
    path: str = ""
    labels: str = ""
    test_path: str = ""
    test_labels: str = ""
    normalize: bool = True
    flip: bool = False
    crop_pad: int = 0


@dataclass(frozen=True)
class BudgetConfig:
    steps: int | None = None
    epochs: int | None = None
    logical_time: int | None = None


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    eval_every: int = 0
    eval_examples: int | None = None
    mode: str = "reference"
    wall_clock: bool = False
    phase_delay: float = 0.0


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = ModelConfig()
    strategy: StrategyConfig = StrategyConfig()
    optim: OptimizerConfig = OptimizerConfig()
    schedule: LrSchedule = LrSchedule()
    data: DataConfig = DataConfig()
    budget: BudgetConfig = BudgetConfig(steps=100)
    train: TrainConfig = TrainConfig()
    seeds: tuple = (0,)
    output: str = "runs"
    name: str = "run"

    def validate(self) -> "RunConfig":
        if not self.seeds:
            raise ConfigurationError("seeds: at least one seed is required")
        self.policy()
        probe = (2,) if self.model.preset == "mlp" else (3, 16, 16)
        self.architecture(probe, 2).validate()
        self.settings()
        if self.data.kind not in ("images", "blobs", "spirals", "idx", "csv"):
            raise ConfigurationError(f"data.kind: unknown dataset kind {self.data.kind!r}")
        if self.data.kind == "idx" and not (self.data.path and self.data.labels):
            raise ConfigurationError("data.path: idx datasets need data.path and data.labels")
        if self.data.kind == "csv" and not self.data.path:
            raise ConfigurationError("data.path: csv datasets need data.path")
        return self

    def policy(self) -> RoutingPolicy:
        s = self.strategy
        return RoutingPolicy(s.kind, s.n, s.mix_local, tuple(s.aux_weights) or None)

    def architecture(self, input_shape: tuple, num_classes: int) -> ArchitectureSpec:
        m = self.model
        return ArchitectureSpec(
            preset=m.preset,
            input_shape=tuple(input_shape),
            num_classes=num_classes,
            depth=m.depth,
            widths=tuple(m.widths),
            blocks=m.blocks,
            aux_head=m.aux_head,
            filters=tuple(m.filters),
            res_width=m.res_width,
            head_filters=tuple(m.head_filters),
        )

    def settings(self):
        from .engine import TrainSettings

        t, b = self.train, self.budget
        return TrainSettings(
            steps=b.steps,
            epochs=b.epochs,
            logical_time=b.logical_time,
            batch_size=t.batch_size,
            eval_every=t.eval_every,
            eval_examples=t.eval_examples,
            mode=t.mode,
            wall_clock=t.wall_clock,
            phase_delay=t.phase_delay,
            augment=AugmentPolicy(flip=self.data.flip, crop_pad=self.data.crop_pad),
        )


# ---------------------------------------------------------------- text format

_SECTIONS = ("model", "strategy", "optim", "schedule", "data", "budget", "train")


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _base_type(tp):
    args = [a for a in typing.get_args(tp) if a is not type(None)]
    optional = type(None) in typing.get_args(tp)
    return (args[0] if optional else tp), optional


def _scalar(text: str):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def _parse_value(key: str, tp, text: str):
    text = text.strip()
    base, optional = _base_type(tp)
    if optional and text.lower() == "none":
        return None
    try:
        if base is bool:
            if text.lower() not in ("true", "false"):
                raise ValueError
            return text.lower() == "true"
        if base is int:
            return int(text)
        if base is float:
            return float(text)
        if base is tuple:
            return tuple(_scalar(t.strip()) for t in text.split(",")) if text else ()
        return text
    except ValueError:
        name = getattr(base, "__name__", str(base))
        raise ConfigurationError(f"{key}: expected {name}, got {text!r}") from None


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    return str(v)


def parse_lines(text: str) -> dict[str, str]:
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def apply_overrides(cfg: RunConfig, pairs: dict[str, str]) -> RunConfig:
    sections = {s: {} for s in _SECTIONS}
    top = {}
    top_hints = _hints(RunConfig)
    for key, value in pairs.items():
        if "." in key:
            sec, name = key.split(".", 1)
            if sec not in sections:
                raise ConfigurationError(f"{key}: unknown section {sec!r}")
            cls = type(getattr(cfg, sec))
            hints = _hints(cls)
            if name not in hints:
                raise ConfigurationError(f"{key}: unknown key")
            sections[sec][name] = _parse_value(key, hints[name], value)
        else:
            if key not in top_hints or key in _SECTIONS:
                raise ConfigurationError(f"{key}: unknown key")
            top[key] = _parse_value(key, top_hints[key], value)
    if "seeds" in pairs:
        text = pairs["seeds"].strip()
        try:
            if ".." in text:
                lo, hi = text.split("..", 1)
                top["seeds"] = tuple(range(int(lo), int(hi) + 1))
            else:
                top["seeds"] = tuple(int(s) for s in top["seeds"])
        except (TypeError, ValueError):
            raise ConfigurationError("seeds: expected comma-separated integers") from None
    changes = dict(top)
    for sec, vals in sections.items():
        if vals:
            if sec == "budget":
                # setting one budget kind replaces the others
                base = BudgetConfig()
            else:
                base = getattr(cfg, sec)
            changes[sec] = _construct(sec, base, vals)
    return replace(cfg, **changes)


def _construct(sec, base, vals):
    try:
        return replace(base, **vals)
    except ConfigurationError as exc:
        msg = str(exc)
        raise ConfigurationError(msg if msg.startswith(f"{sec}.") else f"{sec}: {msg}") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    return apply_overrides(base or RunConfig(), parse_lines(text)).validate()


def load_config(path, overrides: dict[str, str] | None = None) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigurationError(f"config: cannot read {path}: {exc.strerror}") from None
    pairs = parse_lines(text)
    pairs.update(overrides or {})
    return apply_overrides(RunConfig(), pairs).validate()


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for sec in _SECTIONS:
        obj = getattr(cfg, sec)
        for f in fields(obj):
            lines.append(f"{sec}.{f.name} = {_format_value(getattr(obj, f.name))}")
    for name in ("seeds", "output", "name"):
        lines.append(f"{name} = {_format_value(getattr(cfg, name))}")
    return "\n".join(lines) + "\n"


def strategy_from_label(label: str) -> StrategyConfig:
    """``1-wise``, ``3-wise+mix``, ``grouped-2``, ``end_to_end``, ``hogwild``."""
    text = label.strip()
    mix = text.endswith("+mix")
    if mix:
        text = text[: -len("+mix")]
    if text.endswith("-wise"):
        try:
            return StrategyConfig("n_wise", int(text[: -len("-wise")]), mix)
        except ValueError:
            pass
    elif text.startswith("grouped-"):
        try:
            return StrategyConfig("grouped_local", int(text[len("grouped-") :]), mix)
        except ValueError:
            pass
    elif text in ("end_to_end", "hogwild") and not mix:
        return StrategyConfig(text, 1)
    raise ConfigurationError(f"strategy: cannot parse strategy label {label!r}")


def strategy_label(s: StrategyConfig) -> str:
    return RoutingPolicy(s.kind, s.n, s.mix_local).label()
