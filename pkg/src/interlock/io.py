"""Checkpoint container and metrics tables.

Checkpoint layout (all integers little-endian)::

    magic        8 bytes   b"ILBPCKPT"
    version      u32
    header_len   u32
    header       JSON, utf-8 (format_version, architecture, seed, step, ...)
    count        u32
    count records:
        id_len   u16, id utf-8
        ndim     u8, dims u32 * ndim
        data     float64 little-endian, C order

Record ids: parameter ids as-is, ``buffer/<name>`` for batch-norm running
stats, ``optim/<body|head>/<k>/<param id>/<slot>`` for optimizer slots.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ParseError
from .engine import EvalRow, RunMetrics, StepRow
from .model import ArchitectureSpec, PartitionedModel, build
from .optim import OptimizerConfig, OptimizerState

MAGIC = b"ILBPCKPT"
FORMAT_VERSION = 1


def spec_to_dict(spec: ArchitectureSpec) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(spec).items()}


def spec_from_dict(d: dict) -> ArchitectureSpec:
    return ArchitectureSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class Checkpoint:
    header: dict
    records: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.header["step"])

    @property
    def seed(self) -> int:
        return int(self.header["seed"])

    @property
    def architecture(self) -> ArchitectureSpec:
        return spec_from_dict(self.header["architecture"])


def write_checkpoint(path, ckpt: Checkpoint):
    head = json.dumps({"format_version": FORMAT_VERSION, **ckpt.header}, sort_keys=True).encode()
    out = bytearray(MAGIC)
    out += struct.pack("<II", FORMAT_VERSION, len(head)) + head
    out += struct.pack("<I", len(ckpt.records))
    for rid, arr in ckpt.records.items():
        name = rid.encode()
        arr = np.ascontiguousarray(arr, dtype="<f8")
        out += struct.pack("<H", len(name)) + name
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def read_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise ParseError(f"truncated checkpoint while reading {what}", pos)
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(8, "magic") != MAGIC:
        raise ParseError("not a checkpoint file (bad magic)", 0)
    version, hlen = struct.unpack("<II", take(8, "version"))
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", 8)
    try:
        header = json.loads(take(hlen, "header"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"corrupt checkpoint header: {exc.msg}", 16 + exc.pos) from None
    header.pop("format_version", None)
    (count,) = struct.unpack("<I", take(4, "record count"))
    records = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "record id length"))
        rid = take(nlen, "record id").decode()
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        size = int(np.prod(shape, dtype=np.int64))
        records[rid] = np.frombuffer(take(8 * size, f"data of {rid}"), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(buf):
        raise ParseError("trailing bytes after last record", pos)
    return Checkpoint(header, records)


def _optim_records(prefix, opts: list[OptimizerState]) -> tuple[dict, list]:
    recs, steps = {}, []
    for k, st in enumerate(opts, start=1):
        steps.append(st.step)
        for pid, slots in st.slots.items():
            for s, arr in enumerate(slots):
                recs[f"optim/{prefix}/{k}/{pid}/{s}"] = arr
    return recs, steps


def model_checkpoint(model: PartitionedModel, *, step: int, seed: int, body_opts=None, head_opts=None, extra=None) -> Checkpoint:
    header = {"architecture": spec_to_dict(model.spec), "seed": seed, "step": step, "init_seed": model.seed}
    recs = {p.id: p.value for p in model.params()}
    recs.update({f"buffer/{k}": v for k, v in model.buffers().items()})
    for prefix, opts in (("body", body_opts), ("head", head_opts)):
        if opts:
            r, steps = _optim_records(prefix, opts)
            recs.update(r)
            header[f"optim_{prefix}_steps"] = steps
            header["optimizer"] = asdict(opts[0].config)
    if extra:
        header.update(extra)
    return Checkpoint(header, recs)


def restore_model(ckpt: Checkpoint) -> PartitionedModel:
    model = build(ckpt.architecture, seed=int(ckpt.header.get("init_seed", 0)))
    for p in model.params():
        if p.id not in ckpt.records:
            raise DataError(f"checkpoint lacks parameter {p.id}")
        value = ckpt.records[p.id]
        if value.shape != p.value.shape:
            raise DataError(f"checkpoint shape {value.shape} for {p.id} does not match model {p.value.shape}")
        p.value = value.copy()
    model.load_buffers({k[len("buffer/") :]: v.copy() for k, v in ckpt.records.items() if k.startswith("buffer/")})
    return model


def restore_optimizers(ckpt: Checkpoint, prefix: str) -> list[OptimizerState]:
    cfg = OptimizerConfig(**ckpt.header["optimizer"])
    states = [OptimizerState(cfg, step=s) for s in ckpt.header[f"optim_{prefix}_steps"]]
    for rid, arr in ckpt.records.items():
        parts = rid.split("/")
        if parts[0] != "optim" or parts[1] != prefix:
            continue
        k, slot = int(parts[2]), int(parts[-1])
        pid = "/".join(parts[3:-1])
        slots = states[k - 1].slots.setdefault(pid, [])
        while len(slots) <= slot:
            slots.append(None)
        slots[slot] = arr.copy()
    return states


# ---------------------------------------------------------------- metrics table


def metrics_header(n: int) -> list[str]:
    return (
        ["step", "time_logical", "time_wall", "lr"]
        + [f"loss_c{k}" for k in range(1, n + 1)]
        + ["split"]
        + [f"acc_c{k}" for k in range(1, n + 1)]
        + [f"ens_top{m}" for m in range(1, n + 1)]
        + ["staleness"]
    )


def _fmt(x: float) -> str:
    return repr(float(x))


class MetricsWriter:
    """Append-only metrics file; each row is flushed as soon as it is written."""

    def __init__(self, path, n: int, append: bool = False):
        self.n = n
        fresh = not append or not Path(path).exists() or Path(path).stat().st_size == 0
        if not fresh:
            with open(path, newline="") as fh:
                head = next(csv.reader(fh), [])
            if head != metrics_header(n):
                raise DataError(f"{path}: cannot append rows for {n} components to this metrics file")
        self.fh = open(path, "w" if fresh else "a", newline="")
        self.w = csv.writer(self.fh, lineterminator="\n")
        if fresh:
            self.w.writerow(metrics_header(n))
        self.fh.flush()

    def __call__(self, row):
        n = self.n
        blank_eval = [""] * (2 * n + 2)
        if isinstance(row, StepRow):
            cells = [row.step, row.time_logical, _fmt(row.time_wall), _fmt(row.lr)] + [_fmt(v) for v in row.losses] + blank_eval
        elif isinstance(row, EvalRow):
            cells = (
                [row.step, "", "", ""]
                + [""] * n
                + [row.split]
                + [_fmt(v) for v in row.head_accuracy]
                + [_fmt(v) for v in row.ensemble_accuracy]
                + [_fmt(row.staleness)]
            )
        else:
            raise TypeError(f"unexpected metrics row {type(row).__name__}")
        self.w.writerow(cells)
        self.fh.flush()

    def close(self):
        self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> RunMetrics:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:4] != ["step", "time_logical", "time_wall", "lr"]:
        raise DataError(f"{path}: not a metrics file")
    head = rows[0]
    n = sum(1 for h in head if h.startswith("loss_c"))
    if head != metrics_header(n):
        raise DataError(f"{path}: unexpected metrics columns")
    out = RunMetrics(n)
    for line, r in enumerate(rows[1:], start=2):
        if len(r) != len(head):
            raise DataError(f"{path}:{line}: expected {len(head)} fields, got {len(r)}")
        step = int(r[0])
        if r[4 + n] == "":
            out.steps.append(StepRow(step, int(r[1]), float(r[2]), float(r[3]), [float(v) for v in r[4 : 4 + n]]))
        else:
            base = 5 + n
            out.evals.append(
                EvalRow(
                    step,
                    r[4 + n],
                    [float(v) for v in r[base : base + n]],
                    [float(v) for v in r[base + n : base + 2 * n]],
                    float(r[base + 2 * n]),
                )
            )
    return out


RESULTS_HEADER = ["run", "strategy", "preset", "depth", "seed", "mode", "steps", "final_loss", "train_acc", "test_acc", "staleness", "test_acc_heads", "test_ens_top"]


def results_row(run: str, strategy: str, spec: ArchitectureSpec, seed: int, mode: str, metrics: RunMetrics) -> dict:
    test = metrics.final_eval("test")
    train = metrics.final_eval("train")
    return {
        "run": run,
        "strategy": strategy,
        "preset": spec.preset,
        "depth": spec.num_components,
        "seed": seed,
        "mode": mode,
        "steps": metrics.steps[-1].step if metrics.steps else 0,
        "final_loss": _fmt(metrics.final_loss()),
        "train_acc": _fmt(train.head_accuracy[-1]),
        "test_acc": _fmt(test.head_accuracy[-1]),
        "staleness": _fmt(test.staleness),
        "test_acc_heads": ";".join(_fmt(v) for v in test.head_accuracy),
        "test_ens_top": ";".join(_fmt(v) for v in test.ensemble_accuracy),
    }


def append_results(path, rows: list[dict]):
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, RESULTS_HEADER, lineterminator="\n")
        if fresh:
            w.writeheader()
        for r in rows:
            w.writerow(r)


def read_results(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RESULTS_HEADER:
            raise DataError(f"{path}: unexpected results columns {reader.fieldnames}")
        return list(reader)
