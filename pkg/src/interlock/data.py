"""Datasets: seeded synthetic tasks, IDX/CSV ingestion, batching and augmentation."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigurationError, DataError, ParseError


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # (N, ...) float64, train examples first
    targets: np.ndarray  # (N,) int64
    num_classes: int
    n_train: int
    mean: np.ndarray | None = None  # per-channel stats of the train split
    std: np.ndarray | None = None

    def __post_init__(self):
        if len(self.inputs) < 1:
            raise DataError("dataset is empty")
        if len(self.inputs) != len(self.targets):
            raise DataError(f"{len(self.inputs)} inputs but {len(self.targets)} targets")
        if not 0 < self.n_train <= len(self.inputs):
            raise DataError(f"train split size {self.n_train} out of range for {len(self.inputs)} examples")
        if self.targets.min() < 0 or self.targets.max() >= self.num_classes:
            raise DataError(f"targets must lie in [0, {self.num_classes})")

    @property
    def input_shape(self) -> tuple:
        return tuple(self.inputs.shape[1:])

    @property
    def train(self) -> tuple[np.ndarray, np.ndarray]:
        return self.inputs[: self.n_train], self.targets[: self.n_train]

    @property
    def test(self) -> tuple[np.ndarray, np.ndarray]:
        return self.inputs[self.n_train :], self.targets[self.n_train :]

    @property
    def train_indices(self) -> np.ndarray:
        return np.arange(self.n_train)

    @property
    def test_indices(self) -> np.ndarray:
        return np.arange(self.n_train, len(self.inputs))


def _channel_axes(x: np.ndarray) -> tuple:
    # images are (N, C, H, W); tabular data is (N, D) and normalised per feature
    return (0, 2, 3) if x.ndim == 4 else (0,)


def channel_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    axes = _channel_axes(x)
    mean = x.mean(axis=axes)
    std = x.std(axis=axes)
    return mean, np.where(std > 0, std, 1.0)


def normalize(ds: Dataset) -> Dataset:
    """Standardise every example with per-channel statistics of the train split."""
    xtr, _ = ds.train
    mean, std = channel_stats(xtr)
    shape = (1, -1, 1, 1) if ds.inputs.ndim == 4 else (1, -1)
    x = (ds.inputs - mean.reshape(shape)) / std.reshape(shape)
    return replace(ds, inputs=x, mean=mean, std=std)


def _split(x, y, classes, n, test_fraction, rng) -> Dataset:
    order = rng.permutation(n)
    x, y = x[order], y[order]
    n_test = int(round(n * test_fraction))
    return Dataset(np.ascontiguousarray(x, dtype=np.float64), y.astype(np.int64), classes, n - n_test)


def _check_sizes(classes, n):
    if classes < 2:
        raise ConfigurationError(f"need at least 2 classes, got {classes}")
    if n < classes:
        raise ConfigurationError(f"need n >= classes, got n={n}, classes={classes}")


# ---------------------------------------------------------------- synthetic tasks


def synth_blobs(classes=3, dims=2, n=600, seed=0, separation=10.0, test_fraction=0.2) -> Dataset:
    """Isotropic unit-variance Gaussian clusters whose centres sit ``separation`` apart."""
    _check_sizes(classes, n)
    if dims < 1 or separation <= 0:
        raise ConfigurationError("dims and separation must be positive")
    rng = np.random.default_rng(seed)
    if classes <= dims:
        basis = np.linalg.qr(rng.standard_normal((dims, dims)))[0][:, :classes].T
        centres = basis * separation / np.sqrt(2)
    else:
        centres = rng.standard_normal((classes, dims))
        centres *= separation / max(1e-12, min(
            np.linalg.norm(centres[i] - centres[j]) for i in range(classes) for j in range(i)
        ))
    y = np.arange(n) % classes
    x = centres[y] + rng.standard_normal((n, dims))
    return _split(x, y, classes, n, test_fraction, rng)


def synth_spirals(classes=3, n=600, noise=0.0, seed=0, turns=1.0, test_fraction=0.2) -> Dataset:
    """Interleaved 2-d spiral arms, one per class."""
    _check_sizes(classes, n)
    if noise < 0:
        raise ConfigurationError("noise must be non-negative")
    rng = np.random.default_rng(seed)
    y = np.arange(n) % classes
    r = rng.uniform(0.05, 1.0, n)
    theta = 2 * np.pi * (turns * r + y / classes)
    x = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    x += noise * rng.standard_normal(x.shape)
    return _split(x, y, classes, n, test_fraction, rng)


def _texture(rng, channels, size):
    """A small colored oriented-stripe patch."""
    yy, xx = np.mgrid[0:size, 0:size]
    angle = rng.uniform(0, np.pi)
    freq = rng.uniform(0.6, 1.6)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.cos(freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
    colour = rng.standard_normal(channels)
    colour /= np.linalg.norm(colour)
    return colour[:, None, None] * wave[None]


def synth_images(
    classes=10,
    h=16,
    w=16,
    channels=3,
    n=12000,
    seed=0,
    *,
    parts=2,
    part_size=4,
    distractors=1,
    noise=0.3,
    test_fraction=1 / 6,
) -> Dataset:
    """Images whose class is a spatial arrangement of localised textures.

    Every class owns ``parts`` texture patches and fixed offsets between them.
    An image places its class's parts at a random anchor, adds patches
    borrowed from other classes at random positions, and adds Gaussian noise.
    Parts alone are shared across classes through the distractors, so the
    arrangement carries the label.
    """
    _check_sizes(classes, n)
    if min(h, w) < 2 * part_size or channels < 1 or parts < 1:
        raise ConfigurationError(f"image {h}x{w} too small for parts of size {part_size}")
    rng = np.random.default_rng(seed)
    bank = [[_texture(rng, channels, part_size) for _ in range(parts)] for _ in range(classes)]
    span = max(2, min(h, w) // 2 - part_size)
    offsets = [
        [(0, 0)] + [tuple(rng.integers(-span, span + 1, size=2)) for _ in range(parts - 1)] for _ in range(classes)
    ]

    y = np.arange(n) % classes
    x = noise * rng.standard_normal((n, channels, h, w))
    for idx in range(n):
        c = y[idx]
        offs = np.array(offsets[c])
        lo = -offs.min(axis=0)
        hi = np.array([h, w]) - part_size - offs.max(axis=0)
        anchor = np.array([rng.integers(lo[0], hi[0] + 1), rng.integers(lo[1], hi[1] + 1)])
        amp = rng.uniform(0.7, 1.3)
        for p in range(parts):
            r0, c0 = anchor + offs[p]
            x[idx, :, r0 : r0 + part_size, c0 : c0 + part_size] += amp * bank[c][p]
        for _ in range(distractors):
            oc = rng.integers(classes)
            op = rng.integers(parts)
            r0 = rng.integers(0, h - part_size + 1)
            c0 = rng.integers(0, w - part_size + 1)
            x[idx, :, r0 : r0 + part_size, c0 : c0 + part_size] += rng.uniform(0.7, 1.3) * bank[oc][op]
    return _split(x, y, classes, n, test_fraction, rng)


# ---------------------------------------------------------------- external formats

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
_IDX_CODES = {np.dtype(v).newbyteorder("=").str: k for k, v in _IDX_TYPES.items()}


def read_idx(path) -> np.ndarray:
    """Parse one IDX file (magic 0x0000, type code, rank, big-endian dims, data)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ParseError("file shorter than the 4-byte IDX magic", len(raw))
    if raw[0] != 0 or raw[1] != 0:
        raise ParseError("IDX magic must start with two zero bytes", 0)
    code, ndim = raw[2], raw[3]
    if code not in _IDX_TYPES:
        raise ParseError(f"unknown IDX data type code 0x{code:02x}", 2)
    if ndim < 1:
        raise ParseError("IDX rank must be >= 1", 3)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError(f"truncated dimension table, expected {ndim} dims", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = np.dtype(_IDX_TYPES[code])
    expected = header + int(np.prod(dims)) * dtype.itemsize
    if len(raw) != expected:
        raise ParseError(f"expected {expected} bytes for dims {dims}, found {len(raw)}", min(len(raw), expected))
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array: np.ndarray):
    arr = np.asarray(array)
    key = arr.dtype.newbyteorder("=").str
    if key not in _IDX_CODES:
        raise DataError(f"dtype {arr.dtype} has no IDX type code")
    code = _IDX_CODES[key]
    head = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(head + arr.astype(_IDX_TYPES[code]).tobytes())


def load_idx(
    images,
    labels,
    *,
    test_images=None,
    test_labels=None,
    test_fraction=0.2,
    num_classes=None,
    expected_shape=None,
    seed=0,
) -> Dataset:
    """Build a dataset from IDX image/label files.

    Images of rank 3 are read as single-channel (N, H, W); rank 4 files are
    taken as (N, H, W, C) and moved to channels-first. Without separate test
    files a seeded ``test_fraction`` split is taken.
    """

    def chw(a):
        a = a.astype(np.float64)
        if a.ndim == 3:
            return a[:, None]
        if a.ndim == 4:
            return a.transpose(0, 3, 1, 2)
        if a.ndim == 2:
            return a
        raise DataError(f"unsupported IDX image rank {a.ndim}")

    x = chw(read_idx(images))
    y = read_idx(labels).astype(np.int64).reshape(-1)
    if len(x) != len(y):
        raise DataError(f"{len(x)} images but {len(y)} labels")
    if expected_shape is not None and tuple(x.shape[1:]) != tuple(expected_shape):
        raise ConfigurationError(f"IDX images have shape {tuple(x.shape[1:])}, config expects {tuple(expected_shape)}")
    if test_images is not None:
        xt = chw(read_idx(test_images))
        yt = read_idx(test_labels).astype(np.int64).reshape(-1)
        classes = num_classes or int(max(y.max(), yt.max()) + 1)
        return Dataset(np.concatenate([x, xt]), np.concatenate([y, yt]), classes, len(x))
    classes = num_classes or int(y.max() + 1)
    return _split(x, y, classes, len(x), test_fraction, np.random.default_rng(seed))


def write_csv(path, ds: Dataset):
    x = ds.inputs.reshape(len(ds.inputs), -1)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["label"] + [f"feat_{i}" for i in range(x.shape[1])])
        for label, row in zip(ds.targets, x):
            wr.writerow([int(label)] + [repr(float(v)) for v in row])


def load_csv(path, *, test_fraction=0.2, num_classes=None, seed=0) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["label"]:
        raise DataError(f"{path}: CSV header must start with 'label'")
    try:
        y = np.array([int(r[0]) for r in rows[1:]], dtype=np.int64)
        x = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    classes = num_classes or int(y.max() + 1)
    return _split(x, y, classes, len(x), test_fraction, np.random.default_rng(seed))


# ---------------------------------------------------------------- batching


@dataclass(frozen=True)
class AugmentPolicy:
    flip: bool = False  # random horizontal flip with probability 0.5
    crop_pad: int = 0  # zero-pad by this much, then crop back to the original size

    @property
    def identity(self) -> bool:
        return not self.flip and self.crop_pad == 0


def hflip(x: np.ndarray) -> np.ndarray:
    return x[..., ::-1]


def pad_crop(x: np.ndarray, pad: int, dy: int, dx: int) -> np.ndarray:
    """Zero-pad the last two axes by ``pad`` and cut a window at offset (dy, dx)."""
    h, w = x.shape[-2:]
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    return np.pad(x, widths)[..., dy : dy + h, dx : dx + w]


def augment_batch(x: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    if policy.identity:
        return x
    out = np.array(x)
    for i in range(len(out)):
        img = out[i]
        if policy.crop_pad:
            p = policy.crop_pad
            dy, dx = rng.integers(0, 2 * p + 1, size=2)
            img = pad_crop(img, p, dy, dx)
        if policy.flip and rng.random() < 0.5:
            img = hflip(img)
        out[i] = img
    return out


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    indices: np.ndarray


def batches(ds: Dataset, batch_size: int, seed: int, policy: AugmentPolicy = AugmentPolicy()) -> Iterator[Batch]:
    """Endless seeded stream of train-split batches, reshuffled every epoch."""
    if batch_size < 1:
        raise ConfigurationError("batch size must be >= 1")
    order_rng = np.random.default_rng([seed, 0])
    aug_rng = np.random.default_rng([seed, 1])
    n = ds.n_train
    bs = min(batch_size, n)
    while True:
        perm = order_rng.permutation(n)
        for s in range(0, n - bs + 1, bs):
            idx = perm[s : s + bs]
            x = ds.inputs[idx]
            yield Batch(augment_batch(x, policy, aug_rng), ds.targets[idx], idx)


def augment(ds: Dataset, policy: AugmentPolicy, batch_size: int = 64, seed: int = 0) -> Iterator[Batch]:
    return batches(ds, batch_size, seed, policy)


def make_dataset(kind: str, seed: int, **kw) -> Dataset:
    makers = {"blobs": synth_blobs, "spirals": synth_spirals, "images": synth_images}
    if kind not in makers:
        raise ConfigurationError(f"data.kind must be one of {sorted(makers) + ['idx', 'csv']}, got {kind!r}")
    return makers[kind](seed=seed, **kw)
