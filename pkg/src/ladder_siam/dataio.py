"""Datasets (CIFAR-10 binary, procedural shapes), batching and checkpoints."""
from __future__ import annotations

import csv
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .nn import ParamStore
from .tensor import Tensor

CIFAR_RECORD = 3073
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]


class CorruptDatasetError(ValueError):
    pass


class NotACheckpointError(ValueError):
    pass


class CorruptCheckpointError(ValueError):
    pass


class UnsupportedVersionError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # N x 3 x 32 x 32, float32 in [0, 1]
    labels: np.ndarray  # N ints
    name: str = ""
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("image and label counts differ")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.name, self.split, self.num_classes)


# ---------------------------------------------------------------- CIFAR-10


def read_cifar10_file(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        raise CorruptDatasetError(
            f"{path}: {len(raw)} bytes is not a multiple of the {CIFAR_RECORD}-byte record")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if len(labels) and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise CorruptDatasetError(f"{path}: record {bad} has label byte {labels[bad]} > 9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255.0)
    return images, labels


def load_cifar10(dir_path: str | os.PathLike, split: str = "train",
                 limit: int | None = None) -> Dataset:
    """Read the binary batches of ``split`` (train|test) in file and record order."""
    d = Path(dir_path)
    names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    files = [d / n for n in names if (d / n).exists()]
    if not files:
        files = sorted(d.glob("*.bin"))
    if not files:
        raise FileNotFoundError(f"no CIFAR-10 .bin batches in {d}")
    imgs, labs = zip(*(read_cifar10_file(f) for f in files))
    images, labels = np.concatenate(imgs), np.concatenate(labs)
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return Dataset(images, labels, "cifar10", split, 10)


def write_cifar10_file(path, images: np.ndarray, labels: np.ndarray) -> None:
    """Inverse of read_cifar10_file for uint8-representable images (used for fixtures)."""
    px = np.clip(np.round(np.asarray(images) * 255), 0, 255).astype(np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, np.uint8)[:, None], px], axis=1)
    Path(path).write_bytes(rec.tobytes())


# ---------------------------------------------------------------- synthetic

SHAPES = ("circle", "square", "triangle", "stripes")
# hue centres of the colour families
FAMILIES = (0.0, 0.33, 0.6, 0.14)


def _hsv(h, s, v):
    from .augment import hsv_to_rgb
    return hsv_to_rgb(np.array([[[h]], [[s]], [[v]]], dtype=np.float64))[:, 0, 0]


def render_shape(rng: np.random.Generator, shape: str, hue: float, size: int = 32) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cy, cx = rng.uniform(size * 0.3, size * 0.7, 2)
    r = rng.uniform(size * 0.18, size * 0.32)
    if shape == "circle":
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    elif shape == "square":
        mask = (np.abs(yy - cy) <= r * 0.85) & (np.abs(xx - cx) <= r * 0.85)
    elif shape == "triangle":
        rel_y = (yy - (cy - r)) / (2 * r)
        mask = (rel_y >= 0) & (rel_y <= 1) & (np.abs(xx - cx) <= rel_y * r)
    else:
        period = rng.uniform(4.0, 7.0)
        band = ((xx + yy * rng.uniform(-0.5, 0.5)) // (period / 2)) % 2 == 0
        mask = band & ((yy - cy) ** 2 + (xx - cx) ** 2 <= (1.4 * r) ** 2)
    fg = _hsv((hue + rng.uniform(-0.04, 0.04)) % 1.0, rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0))
    bg = _hsv(rng.uniform(0, 1), rng.uniform(0.0, 0.3), rng.uniform(0.1, 0.5))
    img = np.where(mask[None], fg[:, None, None], bg[:, None, None])
    img = img + rng.normal(0, 0.05, img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


def synth_dataset(n: int, num_classes: int = 10, seed: int = 0, size: int = 32) -> Dataset:
    """Procedural shapes; class = shape type x colour family, balanced within one sample."""
    if n <= 0 or not 2 <= num_classes <= 16:
        raise ValueError("synth_dataset needs n > 0 and 2 <= num_classes <= 16")
    rng = np.random.default_rng([seed, 0x5A47])
    labels = rng.permutation(np.arange(n) % num_classes)
    images = np.empty((n, 3, size, size), np.float32)
    for i, c in enumerate(labels):
        images[i] = render_shape(rng, SHAPES[c % 4], FAMILIES[c // 4], size)
    return Dataset(images, labels.astype(np.int64), f"synth{num_classes}", "train", num_classes)


# ---------------------------------------------------------------- batching


def epoch_permutation(n: int, epoch: int, global_seed: int) -> np.ndarray:
    return np.random.default_rng([global_seed, epoch, 0xBA7C]).permutation(n)


def batch_iter(ds: Dataset | int, batch_size: int, epoch: int, global_seed: int) -> Iterator[np.ndarray]:
    """Shuffled index batches for one epoch; the last partial batch is dropped."""
    n = ds if isinstance(ds, int) else len(ds)
    if not 0 < batch_size <= n:
        raise ValueError(f"batch_size must be in [1, {n}], got {batch_size}")
    perm = epoch_permutation(n, epoch, global_seed)
    for k in range(n // batch_size):
        yield perm[k * batch_size:(k + 1) * batch_size]


# ---------------------------------------------------------------- checkpoints

MAGIC = b"LDRS"
VERSION = 1


@dataclass
class Checkpoint:
    """Everything needed to resume or evaluate a run.

    ``tensors`` holds the flat name -> array view used on disk; the helpers
    below build it from and split it back into stores.
    """

    tensors: dict[str, np.ndarray]
    meta: dict[str, str] = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def store_to_arrays(prefix: str, store: ParamStore) -> dict[str, np.ndarray]:
    out = {f"{prefix}.param.{k}": v.data for k, v in store.params.items()}
    out.update({f"{prefix}.buffer.{k}": v for k, v in store.buffers.items()})
    return out


def arrays_to_store(ckpt: Checkpoint, prefix: str, trainable: bool, arch=None) -> ParamStore:
    g = ckpt.group(prefix)
    params = {k[len("param."):]: Tensor(v.copy(), requires_grad=trainable)
              for k, v in g.items() if k.startswith("param.")}
    buffers = {k[len("buffer."):]: v.copy() for k, v in g.items() if k.startswith("buffer.")}
    return ParamStore(params, buffers, arch)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        a = np.asarray(arr)
        if a.ndim > 255:
            raise ValueError(f"{name}: rank too large")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    meta = "".join(f"{k}={v}\n" for k, v in ckpt.meta.items()).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)))
    parts.append(meta)
    return b"".join(parts)


def decode_checkpoint(raw: bytes) -> Checkpoint:
    if raw[:4] != MAGIC:
        raise NotACheckpointError("missing LDRS magic: not a checkpoint")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CorruptCheckpointError(f"truncated checkpoint at byte {pos} (need {n} more)")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version > VERSION:
        raise UnsupportedVersionError(
            f"checkpoint format version {version} is newer than supported version {VERSION}")
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
        tensors[name] = arr
    (mlen,) = struct.unpack("<I", take(4))
    text = take(mlen).decode("utf-8")
    if pos != len(raw):
        raise CorruptCheckpointError(f"{len(raw) - pos} unexpected trailing bytes")
    meta = {}
    for line in text.splitlines():
        k, _, v = line.partition("=")
        meta[k] = v
    return Checkpoint(tensors, meta)


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    """Atomic write: temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(encode_checkpoint(ckpt))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------- metrics log


def metrics_header(num_stages: int) -> list[str]:
    return ["step", "lr", "tau", "total_loss"] + [f"loss_stage{i}" for i in range(1, num_stages + 1)]


class MetricsWriter:
    """Appends one CSV row per training step."""

    def __init__(self, path: str | os.PathLike, num_stages: int):
        self.path = Path(path)
        self.num_stages = num_stages
        self._f = open(self.path, "w", newline="")
        self._w = csv.writer(self._f)
        self._w.writerow(metrics_header(num_stages))

    def write(self, step: int, lr: float, tau: float, total: float, per_level: dict[int, float]) -> None:
        row = [step, repr(float(lr)), repr(float(tau)), repr(float(total))]
        row += [repr(float(per_level[i])) if i in per_level else ""
                for i in range(1, self.num_stages + 1)]
        self._w.writerow(row)
        self._f.flush()

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
