"""Datasets, class-incremental protocols and codec preprocessing."""
from __future__ import annotations

import csv
import json
import logging
import os
import pickle
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .codecs import CodecError, CodecSpec, PayloadCache, decode, encode

logger = logging.getLogger(__name__)

# Class shuffles use the legacy MT19937 stream (numpy.random.RandomState), whose
# output numpy keeps stable across releases. Bump the tag if that ever changes.
SHUFFLE_PRNG = "mt19937-randomstate-v1"
IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".webp", ".JPEG"}


class ConfigurationError(ValueError):
    pass


@dataclass
class Split:
    """One split of a dataset.

    ``images`` is an ``(N, H, W, 3)`` uint8 array when every image shares a
    shape, otherwise a list of arrays. ``bits`` and ``payloads`` are filled in
    by codec preprocessing (or ingestion of already-encoded sources).
    """

    images: np.ndarray | list
    labels: np.ndarray
    bits: np.ndarray | None = None
    payloads: list | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    def __len__(self):
        return len(self.labels)

    def pixels(self) -> np.ndarray:
        if isinstance(self.images, np.ndarray):
            return np.full(len(self), self.images.shape[1] * self.images.shape[2], dtype=np.int64)
        return np.array([im.shape[0] * im.shape[1] for im in self.images], dtype=np.int64)

    def shapes(self) -> list[tuple[int, int]]:
        if isinstance(self.images, np.ndarray):
            return [tuple(self.images.shape[1:3])] * len(self)
        return [tuple(im.shape[:2]) for im in self.images]

    def subset(self, idx) -> "Split":
        idx = np.asarray(idx, dtype=np.int64)
        if isinstance(self.images, np.ndarray):
            images = self.images[idx]
        else:
            images = [self.images[i] for i in idx]
        return Split(
            images,
            self.labels[idx],
            None if self.bits is None else self.bits[idx],
            None if self.payloads is None else [self.payloads[i] for i in idx],
        )


@dataclass
class DatasetHandle:
    name: str
    train: Split
    test: Split
    codec: CodecSpec | None = None

    @property
    def num_classes(self) -> int:
        return int(max(self.train.labels.max(), self.test.labels.max())) + 1

    def validate(self) -> None:
        train_classes = set(np.unique(self.train.labels).tolist())
        test_classes = set(np.unique(self.test.labels).tolist())
        if train_classes != test_classes:
            raise ConfigurationError(
                f"{self.name}: classes {sorted(train_classes ^ test_classes)} missing from one split"
            )
        if train_classes != set(range(len(train_classes))):
            raise ConfigurationError(f"{self.name}: class ids are not contiguous 0..C-1")


@dataclass(frozen=True)
class ProtocolSpec:
    kind: str = "LFS"
    num_tasks: int = 10
    shuffle_seed: int = 1993

    def __post_init__(self):
        if self.kind not in ("LFS", "LFH"):
            raise ConfigurationError(f"unknown protocol {self.kind!r}")
        if self.num_tasks < 1:
            raise ConfigurationError("num_tasks must be positive")

    def task_sizes(self, num_classes: int) -> list[int]:
        if self.kind == "LFS":
            if num_classes % self.num_tasks:
                raise ConfigurationError(
                    f"LFS: {num_classes} classes cannot be split equally into {self.num_tasks} tasks"
                )
            return [num_classes // self.num_tasks] * self.num_tasks
        if num_classes % 2:
            raise ConfigurationError(f"LFH: {num_classes} classes cannot be halved")
        half = num_classes // 2
        rest = self.num_tasks - 1
        if rest < 1 or half % rest:
            raise ConfigurationError(
                f"LFH: remaining {half} classes cannot be split equally into {rest} tasks"
            )
        return [half] + [half // rest] * rest

    @classmethod
    def lfh(cls, num_classes: int, increment: int = 10, shuffle_seed: int = 1993) -> "ProtocolSpec":
        """LFH protocol with a fixed class increment after the first half."""
        half = num_classes // 2
        if half % increment:
            raise ConfigurationError(f"LFH: {half} classes not divisible by increment {increment}")
        return cls("LFH", 1 + half // increment, shuffle_seed)


@dataclass
class TaskSequence:
    """Ordered class-disjoint tasks.

    ``class_order[k]`` is the original class id that becomes incremental label
    ``k``; tasks are contiguous slices of that order.
    """

    class_order: list[int]
    task_sizes: list[int]
    train_indices: list[np.ndarray]
    test_indices: list[np.ndarray]
    protocol: ProtocolSpec

    @property
    def num_tasks(self) -> int:
        return len(self.task_sizes)

    @property
    def tasks(self) -> list[list[int]]:
        out, start = [], 0
        for size in self.task_sizes:
            out.append(self.class_order[start:start + size])
            start += size
        return out

    def label_map(self) -> np.ndarray:
        lut = np.empty(len(self.class_order), dtype=np.int64)
        lut[np.asarray(self.class_order)] = np.arange(len(self.class_order))
        return lut

    def seen_classes(self, step: int) -> int:
        return int(sum(self.task_sizes[: step + 1]))

    def task_labels(self, step: int) -> range:
        """Incremental labels introduced at ``step``."""
        start = sum(self.task_sizes[:step])
        return range(start, start + self.task_sizes[step])


def shuffle_classes(num_classes: int, seed: int) -> list[int]:
    return np.random.RandomState(seed).permutation(num_classes).tolist()


def build_task_sequence(dataset: DatasetHandle, protocol: ProtocolSpec) -> TaskSequence:
    num_classes = dataset.num_classes
    sizes = protocol.task_sizes(num_classes)
    order = shuffle_classes(num_classes, protocol.shuffle_seed)
    train_idx, test_idx, start = [], [], 0
    for size in sizes:
        classes = order[start:start + size]
        start += size
        train_idx.append(np.flatnonzero(np.isin(dataset.train.labels, classes)))
        test_idx.append(np.flatnonzero(np.isin(dataset.test.labels, classes)))
    return TaskSequence(order, sizes, train_idx, test_idx, protocol)


def split_first_task(seq: TaskSequence, labels: np.ndarray, seed: int = 1993):
    """Split the first task's training samples into two class-balanced halves.

    Each class contributes ``ceil(n/2)`` samples to the first half and the rest
    to the second. Returns two index arrays into the training split.
    """
    labels = np.asarray(labels)
    rng = np.random.RandomState(seed)
    first, second = [], []
    task_idx = seq.train_indices[0]
    # labels may be original or remapped ids; both index the same samples
    for cls in np.unique(labels[task_idx]):
        idx = task_idx[labels[task_idx] == cls]
        if len(idx) < 2:
            raise ConfigurationError(f"class {cls} has {len(idx)} sample(s); cannot split")
        idx = idx[rng.permutation(len(idx))]
        cut = (len(idx) + 1) // 2
        if len(idx) % 2:
            logger.info("class %d has an odd count (%d); extra sample goes to the first half", cls, len(idx))
        first.append(np.sort(idx[:cut]))
        second.append(np.sort(idx[cut:]))
    return np.concatenate(first), np.concatenate(second)


def _preprocess_split(split: Split, codec: CodecSpec, cache: PayloadCache | None, name: str) -> Split:
    images, bits, payloads = [], [], []
    enc = cache.encode if cache is not None else encode
    src = split.images
    for i in range(len(split)):
        try:
            sample = enc(src[i], codec)
            out = decode(sample, codec)
        except CodecError as exc:
            raise CodecError(f"{name} sample {i}: {exc}") from exc
        images.append(out)
        bits.append(sample.bits)
        payloads.append(sample.payload)
    if isinstance(src, np.ndarray):
        images = np.stack(images) if images else src[:0].copy()
    return Split(images, split.labels.copy(), np.asarray(bits, dtype=np.int64), payloads)


def preprocess_with_codec(dataset: DatasetHandle, codec: CodecSpec,
                          cache: PayloadCache | None = None) -> DatasetHandle:
    """Replace every train and test image by ``decode(encode(image))``.

    The returned handle carries the per-image encoded bit counts and payloads
    so the exemplar buffer can account for storage.
    """
    return DatasetHandle(
        dataset.name,
        _preprocess_split(dataset.train, codec, cache, "train"),
        _preprocess_split(dataset.test, codec, cache, "test"),
        codec,
    )


# --- caching of preprocessed datasets ---------------------------------------

def cache_root(default: str | os.PathLike = ".compcil-cache") -> Path:
    return Path(os.environ.get("COMPCIL_CACHE", default))


def _save_split(split: Split, path: Path) -> None:
    payloads = split.payloads or []
    offsets = np.cumsum([0] + [len(p) for p in payloads]).astype(np.int64)
    blob = np.frombuffer(b"".join(payloads), dtype=np.uint8)
    if isinstance(split.images, np.ndarray):
        images = split.images
    else:
        images = np.empty(len(split.images), dtype=object)
        images[:] = split.images
    np.savez(path, images=images, labels=split.labels,
             bits=split.bits if split.bits is not None else np.zeros(0, np.int64),
             blob=blob, offsets=offsets)


def _load_split(path: Path) -> Split:
    with np.load(path, allow_pickle=True) as z:
        images = z["images"]
        if images.dtype == object:
            images = list(images)
        blob, offsets = z["blob"].tobytes(), z["offsets"]
        payloads = [blob[offsets[i]:offsets[i + 1]] for i in range(len(offsets) - 1)] or None
        bits = z["bits"] if len(z["bits"]) else None
        return Split(images, z["labels"], bits, payloads)


def prepared_dir(root, dataset_name: str, codec: CodecSpec) -> Path:
    return Path(root) / "prepared" / dataset_name / codec.key


def prepare_cached(dataset: DatasetHandle, codec: CodecSpec, root=None,
                   payload_cache: PayloadCache | None = None) -> DatasetHandle:
    """Preprocess with disk caching keyed by (dataset, codec, quality).

    Writes a manifest CSV listing per-image encoded bits next to the arrays.
    """
    root = cache_root() if root is None else Path(root)
    out = prepared_dir(root, dataset.name, codec)
    done = out / "manifest.json"
    if done.exists():
        meta = json.loads(done.read_text())
        if meta.get("codec") == codec.key:
            return DatasetHandle(dataset.name, _load_split(out / "train.npz"),
                                 _load_split(out / "test.npz"), codec)
    prepared = preprocess_with_codec(dataset, codec, payload_cache)
    out.mkdir(parents=True, exist_ok=True)
    _save_split(prepared.train, out / "train.npz")
    _save_split(prepared.test, out / "test.npz")
    with open(out / "bits.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "index", "label", "bits", "pixels"])
        for name, split in (("train", prepared.train), ("test", prepared.test)):
            for i, (lab, b, px) in enumerate(zip(split.labels, split.bits, split.pixels())):
                w.writerow([name, i, int(lab), int(b), int(px)])
    done.write_text(json.dumps({"dataset": dataset.name, "codec": codec.key,
                                "method": codec.method, "quality": codec.quality}))
    return prepared


# --- ingestion --------------------------------------------------------------

def _remap(labels_by_split, names=None):
    classes = sorted(set(np.concatenate(labels_by_split).tolist()))
    lut = {c: i for i, c in enumerate(classes)}
    return [np.array([lut[c] for c in labs], dtype=np.int64) for labs in labels_by_split], classes


def _stack_if_uniform(images):
    if images and all(im.shape == images[0].shape for im in images):
        return np.stack(images)
    return images


def load_image_folder(root, name: str | None = None, keep_source_bits: bool = True) -> DatasetHandle:
    """Load ``root/{train,test}/<class>/<image>`` into a handle.

    Class folder names are sorted and remapped to contiguous ids. When
    ``keep_source_bits`` is set, the stored file sizes are recorded as bits so
    an already-compressed source (e.g. JPEG) can serve as the original rate.
    """
    root = Path(root)
    splits = {}
    for split in ("train", "test"):
        images, labels, bits = [], [], []
        for cls_dir in sorted(p for p in (root / split).iterdir() if p.is_dir()):
            for f in sorted(cls_dir.iterdir()):
                if f.suffix not in IMAGE_EXTENSIONS:
                    continue
                with Image.open(f) as im:
                    images.append(np.asarray(im.convert("RGB")))
                labels.append(cls_dir.name)
                bits.append(8 * f.stat().st_size)
        splits[split] = (images, labels, bits)
    (tr_lab, te_lab), _ = _remap([np.array(splits["train"][1]), np.array(splits["test"][1])])
    ds = DatasetHandle(
        name or root.name,
        Split(_stack_if_uniform(splits["train"][0]), tr_lab,
              np.array(splits["train"][2], np.int64) if keep_source_bits else None),
        Split(_stack_if_uniform(splits["test"][0]), te_lab,
              np.array(splits["test"][2], np.int64) if keep_source_bits else None),
    )
    ds.validate()
    return ds


def _cifar_pickle(path):
    with open(path, "rb") as fh:
        d = pickle.load(fh, encoding="bytes")
    x = np.asarray(d[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    y = d.get(b"fine_labels", d.get(b"labels"))
    return np.ascontiguousarray(x), np.asarray(y)


def load_packed(path, name: str | None = None) -> DatasetHandle:
    """Load a packed array dataset.

    Accepts an ``.npz`` with ``x_train, y_train, x_test, y_test`` (NHWC uint8)
    or a CIFAR "python version" directory holding ``train`` and ``test`` pickles.
    """
    path = Path(path)
    if path.is_dir():
        xtr, ytr = _cifar_pickle(path / "train")
        xte, yte = _cifar_pickle(path / "test")
    else:
        with np.load(path) as z:
            xtr, ytr, xte, yte = z["x_train"], z["y_train"], z["x_test"], z["y_test"]
    (ytr, yte), _ = _remap([np.asarray(ytr).ravel(), np.asarray(yte).ravel()])
    ds = DatasetHandle(name or path.stem, Split(np.asarray(xtr, np.uint8), ytr),
                       Split(np.asarray(xte, np.uint8), yte))
    ds.validate()
    return ds


def make_synthetic(num_classes: int = 10, train_per_class: int = 100, test_per_class: int = 50,
                   size: int = 32, modes: int = 8, noise: float = 3.0, class_strength: float = 0.3,
                   shared_strength: float = 1.0, detail_strength: float = 0.0, detail_band=(4.0, 10.0),
                   contrast: float = 40.0, seed: int = 0, name: str | None = None) -> DatasetHandle:
    """Procedural image-classification benchmark for desk-scale experiments.

    Each class is a mixture of ``modes`` smooth colour textures built from a
    few low-frequency gratings; samples are jittered copies plus pixel noise.
    Class identity lives mostly in the low-frequency content, the noise costs
    bits but carries no label information.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    # shared gratings make classes overlap, so the task is not trivially separable
    shared = [_grating(rng, xx, yy) for _ in range(6)]

    protos = []
    for _ in range(num_classes):
        base = class_strength * sum(_grating(rng, xx, yy) for _ in range(2))
        base = base + detail_strength * sum(_grating(rng, xx, yy, detail_band[0], detail_band[1]) for _ in range(2))
        cls_modes = []
        for _ in range(modes):
            mix = rng.normal(0, shared_strength, size=len(shared))
            field_ = base + sum(m * g for m, g in zip(mix, shared))
            cls_modes.append(field_ / field_.std())
        protos.append(cls_modes)

    def sample(c, n):
        out = np.empty((n, size, size, 3), dtype=np.uint8)
        for i in range(n):
            img = protos[c][rng.integers(modes)]
            img = np.roll(img, tuple(rng.integers(-3, 4, size=2)), axis=(0, 1))
            img = img * rng.uniform(0.8, 1.2) + rng.normal(0, 0.1, size=3)
            img = 128 + contrast * img + rng.normal(0, noise, size=img.shape)
            out[i] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        return out

    def build(per_class):
        xs = [sample(c, per_class) for c in range(num_classes)]
        ys = [np.full(per_class, c) for c in range(num_classes)]
        return Split(np.concatenate(xs), np.concatenate(ys))

    train = build(train_per_class)
    test = build(test_per_class)
    return DatasetHandle(name or f"synthetic{num_classes}-s{seed}", train, test)


def _grating(rng, xx, yy, fmin=0.5, fmax=3.0):
    freq = rng.uniform(fmin, fmax)
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.cos(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    colour = rng.normal(0, 1, size=3)
    return wave[..., None] * colour[None, None, :]
