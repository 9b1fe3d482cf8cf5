"""Datasets: IDX and CSV readers, a synthetic image task, and fixed-size batching."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional
from urllib.parse import parse_qs, urlparse

import numpy as np

from .errors import ConfigError, ConsistencyError, FormatError, PlanError
from .tensor import Tensor

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
STD_FLOOR = 1e-8


@dataclass
class Dataset:
    images: np.ndarray          # N×C×H×W, standardised
    labels: np.ndarray          # N, int64
    num_classes: int
    split: str = "train"
    channel_mean: np.ndarray = field(default_factory=lambda: np.zeros(1))
    channel_std: np.ndarray = field(default_factory=lambda: np.ones(1))

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ConsistencyError(f"images must be N×C×H×W, got {self.images.shape}")
        n = self.images.shape[0]
        if n == 0:
            raise ConsistencyError("dataset is empty")
        if self.labels.shape != (n,):
            raise ConsistencyError(f"{n} images but labels have shape {self.labels.shape}")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ConsistencyError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple:
        return self.images.shape[1:]

    def raw_pixels(self) -> np.ndarray:
        """Undo standardisation: values back in [0, 1]."""
        return self.images * _bcast(self.channel_std) + _bcast(self.channel_mean)


def _bcast(v: np.ndarray) -> np.ndarray:
    return np.asarray(v).reshape(1, -1, 1, 1)


def channel_stats(pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = pixels.mean(axis=(0, 2, 3))
    std = np.maximum(pixels.std(axis=(0, 2, 3)), STD_FLOOR)
    return mean, std


def standardize(pixels: np.ndarray, labels, num_classes: int, split: str,
                stats: Optional[tuple] = None) -> Dataset:
    """Build a Dataset from [0,1] pixels; stats default to this split's own."""
    mean, std = stats if stats is not None else channel_stats(pixels)
    images = (pixels - _bcast(mean)) / _bcast(std)
    return Dataset(images, labels, num_classes, split, np.asarray(mean), np.asarray(std))


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def _parse_idx(buf: bytes, magic: int, what: str) -> np.ndarray:
    if len(buf) < 4:
        raise FormatError(f"{what}: file too short for a magic number", offset=0)
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise FormatError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}", offset=0)
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise FormatError(f"{what}: truncated dimension header", offset=len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:head])
    count = int(np.prod(dims))
    if len(buf) - head != count:
        raise FormatError(f"{what}: expected {count} payload bytes for dims {dims}, "
                          f"found {len(buf) - head}", offset=head)
    return np.frombuffer(buf, dtype=np.uint8, offset=head).reshape(dims)


def read_idx_arrays(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    images = _parse_idx(Path(images_path).read_bytes(), IDX_IMAGES_MAGIC, "images")
    labels = _parse_idx(Path(labels_path).read_bytes(), IDX_LABELS_MAGIC, "labels")
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return images, labels


def load_idx(images_path, labels_path, num_classes: Optional[int] = None, split: str = "train",
             stats: Optional[tuple] = None) -> Dataset:
    """Read an IDX image/label pair (single channel), scale to [0,1], standardise."""
    images, labels = read_idx_arrays(images_path, labels_path)
    pixels = images.astype(np.float64)[:, None, :, :] / 255.0
    c = num_classes if num_classes is not None else max(int(labels.max()) + 1, 2)
    return standardize(pixels, labels.astype(np.int64), c, split, stats)


def write_idx(images_u8: np.ndarray, labels, images_path, labels_path) -> None:
    """Write N×H×W uint8 images and N labels in IDX layout (big-endian dims)."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images_u8.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(images_u8.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def save_idx(ds: Dataset, images_path, labels_path) -> None:
    if ds.images.shape[1] != 1:
        raise ConfigError("IDX export supports single-channel datasets only")
    pix = np.rint(ds.raw_pixels()[:, 0] * 255.0)
    write_idx(np.clip(pix, 0, 255).astype(np.uint8), ds.labels, images_path, labels_path)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def load_csv(path, num_classes: Optional[int] = None, split: str = "train",
             stats: Optional[tuple] = None) -> Dataset:
    """Header ``label,p0,p1,...``; square single-channel images, pixels in [0,255]."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[0] != "label":
            raise FormatError(f"{path}: first header column must be 'label'")
        npix = len(header) - 1
        side = math.isqrt(npix)
        if side * side != npix or npix == 0:
            raise FormatError(f"{path}: {npix} pixel columns do not form a square image")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != npix + 1:
                raise FormatError(f"{path}: line {lineno} has {len(row)} fields, "
                                  f"expected {npix + 1}")
            rows.append(row)
    if not rows:
        raise FormatError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=np.float64)
    labels = arr[:, 0].astype(np.int64)
    pixels = arr[:, 1:].reshape(-1, 1, side, side) / 255.0
    c = num_classes if num_classes is not None else max(int(labels.max()) + 1, 2)
    return standardize(pixels, labels, c, split, stats)


# ---------------------------------------------------------------------------
# synthetic task
# ---------------------------------------------------------------------------

SYNTH_NOISE = 0.9
SYNTH_SIGNAL = 0.35


def _class_templates(num_classes: int, size: int, rng: np.random.Generator):
    """Per class: a grating (frequency, orientation) and a blob centre."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    templates = []
    for k in range(num_classes):
        theta = np.pi * k / num_classes + rng.uniform(0, np.pi / (4 * num_classes))
        freq = 1.5 + 1.0 * k + rng.uniform(0, 0.5)
        grating = np.cos(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)))
        centre = rng.uniform(0.25, 0.75, size=2)
        templates.append((grating, centre))
    return templates


def _render(template, size, rng, noise):
    grating, centre = template
    yy, xx = np.mgrid[0:size, 0:size] / size
    cy, cx = centre + rng.normal(0, 0.12, size=2)
    width = rng.uniform(0.12, 0.22)
    blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
    amp = rng.uniform(0.5, 1.0)
    img = 0.5 + SYNTH_SIGNAL * amp * blob * grating + 0.25 * blob \
        + noise * 0.25 * rng.normal(size=(size, size))
    return np.clip(img, 0.0, 1.0)


def synth_gaussian_task(n_per_class: int = 100, num_classes: int = 3, image_size: int = 16,
                        seed: int = 0, noise: float = SYNTH_NOISE) -> tuple[Dataset, Dataset]:
    """Class-conditional Gaussian-blob images modulated by class-specific gratings.

    Returns (train, test) with an 80/20 split per class; both standardised
    with the train split's channel statistics.
    """
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    if n_per_class < 2:
        raise ConfigError(f"need at least 2 samples per class, got {n_per_class}")
    rng = np.random.default_rng(seed)
    templates = _class_templates(num_classes, image_size, rng)
    n_train = int(round(0.8 * n_per_class))
    tr_x, tr_y, te_x, te_y = [], [], [], []
    for k, tmpl in enumerate(templates):
        imgs = np.stack([_render(tmpl, image_size, rng, noise) for _ in range(n_per_class)])
        order = rng.permutation(n_per_class)
        imgs = imgs[order]
        tr_x.append(imgs[:n_train])
        te_x.append(imgs[n_train:])
        tr_y += [k] * n_train
        te_y += [k] * (n_per_class - n_train)
    tr_x, te_x = np.concatenate(tr_x), np.concatenate(te_x)
    tr_y, te_y = np.asarray(tr_y), np.asarray(te_y)
    p_tr, p_te = rng.permutation(len(tr_y)), rng.permutation(len(te_y))
    tr_px = tr_x[p_tr][:, None]
    te_px = te_x[p_te][:, None]
    stats = channel_stats(tr_px)
    return (standardize(tr_px, tr_y[p_tr], num_classes, "train", stats),
            standardize(te_px, te_y[p_te], num_classes, "test", stats))


def parse_data_uri(uri: str) -> tuple[Dataset, Dataset]:
    """``synth://gauss?C=3&n=100&size=16&seed=7``, or ``idx://train_img,train_lbl,test_img,test_lbl``
    or ``csv://train.csv,test.csv``."""
    parsed = urlparse(uri)
    if parsed.scheme == "synth":
        if parsed.netloc != "gauss":
            raise ConfigError(f"unknown synthetic dataset {parsed.netloc!r} in {uri!r}")
        q = {k: v[-1] for k, v in parse_qs(parsed.query).items()}
        unknown = set(q) - {"C", "n", "size", "seed", "noise"}
        if unknown:
            raise ConfigError(f"unknown synth parameters {sorted(unknown)} in {uri!r}")
        try:
            return synth_gaussian_task(int(q.get("n", 100)), int(q.get("C", 3)),
                                       int(q.get("size", 16)), int(q.get("seed", 0)),
                                       float(q.get("noise", SYNTH_NOISE)))
        except ValueError as exc:
            raise ConfigError(f"bad synth parameter in {uri!r}: {exc}") from exc
    if parsed.scheme not in ("idx", "csv"):
        raise ConfigError(f"unsupported data URI scheme {parsed.scheme!r} in {uri!r}; "
                          "use synth://, idx:// or csv://")
    paths = (parsed.netloc + parsed.path).split(",")
    for p in paths:
        if not Path(p).exists():
            raise ConfigError(f"data file not found: {p}")
    if parsed.scheme == "idx" and len(paths) == 4:
        _, labels = read_idx_arrays(paths[0], paths[1])
        c = max(int(labels.max()) + 1, 2)
        train = load_idx(paths[0], paths[1], c, "train")
        test = load_idx(paths[2], paths[3], c, "test", (train.channel_mean, train.channel_std))
        return train, test
    if parsed.scheme == "csv" and len(paths) == 2:
        train = load_csv(paths[0], split="train")
        test = load_csv(paths[1], train.num_classes, "test",
                        (train.channel_mean, train.channel_std))
        return train, test
    raise ConfigError(f"unsupported data URI {uri!r}")


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BatchPlan:
    batch_size: int
    seed: int = 0
    drop_last: bool = True

    def __post_init__(self):
        if not self.drop_last:
            raise PlanError("ragged batches are not supported; drop_last must be True")
        if self.batch_size < 2:
            raise PlanError(f"batch size must be >= 2 for batch statistics, got {self.batch_size}")


def epoch_order(n: int, plan: BatchPlan, epoch: int) -> np.ndarray:
    """Index permutation for one epoch, keyed on (seed, epoch)."""
    return np.random.default_rng([plan.seed, epoch]).permutation(n)


def batch_indices(n: int, plan: BatchPlan, epoch: int) -> list:
    if plan.batch_size > n:
        raise PlanError(f"batch size {plan.batch_size} exceeds dataset size {n}")
    order = epoch_order(n, plan, epoch)
    nb = n // plan.batch_size
    return [order[i * plan.batch_size:(i + 1) * plan.batch_size] for i in range(nb)]


def batches(ds: Dataset, plan: BatchPlan, epoch: int) -> Iterator[tuple[Tensor, np.ndarray]]:
    for idx in batch_indices(len(ds), plan, epoch):
        yield Tensor(ds.images[idx]), ds.labels[idx]
