"""Byte-budgeted exemplar buffer with herding selection."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .codecs import CodecSpec, CompressedSample, decode

logger = logging.getLogger(__name__)


class BudgetError(ValueError):
    pass


@dataclass(frozen=True)
class MemoryBudget:
    """A storage budget in bytes and the rates used to size it in images.

    ``reference_image_count`` is the number of original images the budget
    was defined by; ``bpp_ori`` and ``bpp_comp`` are pooled dataset rates.
    """

    bytes: int
    reference_image_count: int
    bpp_ori: float
    bpp_comp: float

    def __post_init__(self):
        if self.bytes <= 0:
            raise BudgetError("budget bytes must be positive")
        if not (self.bpp_ori > 0 and self.bpp_comp > 0):
            raise BudgetError(f"bpp values must be positive (ori={self.bpp_ori}, comp={self.bpp_comp})")

    @property
    def bits(self) -> int:
        return 8 * self.bytes

    @classmethod
    def from_reference(cls, reference_image_count: int, bytes_per_image: float,
                       bpp_ori: float, bpp_comp: float) -> "MemoryBudget":
        """Budget equivalent to ``reference_image_count`` originals of the given mean size."""
        return cls(int(round(reference_image_count * bytes_per_image)),
                   int(reference_image_count), float(bpp_ori), float(bpp_comp))

    def with_rate(self, bpp_comp: float) -> "MemoryBudget":
        return MemoryBudget(self.bytes, self.reference_image_count, self.bpp_ori, float(bpp_comp))

    def scaled(self, fraction: float) -> "MemoryBudget":
        return MemoryBudget(max(1, int(self.bytes * fraction)),
                            max(1, int(self.reference_image_count * fraction)),
                            self.bpp_ori, self.bpp_comp)


def equivalent_capacity(budget: MemoryBudget) -> int:
    """Number of compressed exemplars that fit the budget: floor(B * ori / comp).

    Computed in exact rational arithmetic on the float inputs so integral
    ratios never lose a unit to rounding.
    """
    if budget.bpp_ori <= 0 or budget.bpp_comp <= 0:
        raise BudgetError("bpp values must be positive")
    ratio = Fraction(budget.reference_image_count) * Fraction(budget.bpp_ori) / Fraction(budget.bpp_comp)
    return math.floor(ratio)


def herding_select(features, k: int) -> list[int]:
    """Greedy herding order over rows of ``features``; returns the first ``k`` indices.

    At step t the candidate minimising ||mu - (S + f_i) / t|| is added, where
    S is the sum of already selected rows. Ties go to the lowest index.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("herding needs a non-empty (n, d) feature matrix")
    if not np.all(np.isfinite(x)):
        raise ValueError("features must be finite")
    n = len(x)
    if not 0 <= k <= n:
        raise ValueError(f"cannot select {k} exemplars from {n} samples")
    total = x.sum(axis=0)
    selected: list[int] = []
    running = np.zeros(x.shape[1])
    available = np.ones(n, dtype=bool)
    for t in range(1, k + 1):
        # ||mu - (S+f)/t|| scaled by n*t
        gap = t * total - n * (running + x)
        dist = np.einsum("ij,ij->i", gap, gap)
        dist[~available] = np.inf
        best = dist.min()
        near = np.flatnonzero(dist <= best + 1e-9 * best + 1e-300)
        i = int(near[0]) if len(near) == 1 else _exact_argmin(x, near, selected, t)
        selected.append(i)
        available[i] = False
        running += x[i]
    return selected


def _exact_argmin(x: np.ndarray, candidates, selected: list[int], t: int) -> int:
    """Resolve a floating-point near-tie in rational arithmetic; lowest index wins exact ties."""
    rows = [[Fraction(float(v)) for v in r] for r in x]
    n = len(rows)
    total = [sum(col) for col in zip(*rows)]
    running = [sum(rows[j][d] for j in selected) for d in range(len(total))]

    def dist(i):
        return sum((t * tot - n * (run + v)) ** 2 for tot, run, v in zip(total, running, rows[i]))

    return min((int(i) for i in candidates), key=lambda i: (dist(i), i))


def allocate(num_classes: int, capacity: int) -> list[int]:
    """Split ``capacity`` equally; the remainder goes to the lowest class ids."""
    base, extra = divmod(capacity, num_classes)
    return [base + (1 if c < extra else 0) for c in range(num_classes)]


@dataclass
class BufferEntry:
    label: int
    sample_id: int
    bits: int


@dataclass
class ExemplarBuffer:
    """Exemplars stored as encoded payloads.

    ``entries`` are grouped by class in herding order. ``payloads`` holds the
    encoded bytes for each entry; ``load`` decodes them.
    """

    capacity: int
    budget_bits: int
    entries: list[BufferEntry] = field(default_factory=list)
    payloads: list[CompressedSample] = field(default_factory=list)
    codec: CodecSpec | None = None
    herding_order: dict[int, list[int]] = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    @property
    def total_bits(self) -> int:
        return sum(e.bits for e in self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    @property
    def sample_ids(self) -> np.ndarray:
        return np.array([e.sample_id for e in self.entries], dtype=np.int64)

    def counts(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for e in self.entries:
            out[e.label] = out.get(e.label, 0) + 1
        return out

    def load(self) -> np.ndarray | list:
        """Decode stored payloads back to pixels."""
        images = [decode(p, self.codec) for p in self.payloads]
        if images and all(im.shape == images[0].shape for im in images):
            return np.stack(images)
        return images

    def write_manifest(self, path, step: int, append: bool = False) -> None:
        with open(path, "a" if append else "w", newline="") as fh:
            w = csv.writer(fh)
            if not append or fh.tell() == 0:
                w.writerow(["step", "class", "sample_id", "bits"])
            for e in self.entries:
                w.writerow([step, e.label, e.sample_id, e.bits])


def read_manifest(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: int(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def minimum_budget_bytes(num_classes: int, budget: MemoryBudget) -> int:
    """Smallest budget (bytes) whose equivalent capacity covers one exemplar per class."""
    per_image = budget.bytes / budget.reference_image_count
    ref = math.ceil(Fraction(num_classes) * Fraction(budget.bpp_comp) / Fraction(budget.bpp_ori))
    return int(math.ceil(ref * per_image))


def _trim_to_budget(per_class: dict[int, list[int]], bits_of, budget_bits: int) -> None:
    """Drop tail exemplars from the largest classes until the bit sum fits."""
    total = sum(bits_of(i) for ids in per_class.values() for i in ids)
    while total > budget_bits:
        label = max(per_class, key=lambda c: (len(per_class[c]), c))
        if len(per_class[label]) <= 1:
            raise BudgetError(f"budget of {budget_bits} bits cannot hold one exemplar per class")
        total -= bits_of(per_class[label].pop())


def rebuild_buffer(split, candidates, features, seen_classes: Sequence[int],
                   budget: MemoryBudget, codec: CodecSpec,
                   previous: ExemplarBuffer | None = None, normalize: bool = True) -> ExemplarBuffer:
    """Rebuild the buffer over every seen class after a task.

    ``split`` is a preprocessed training split (labels, per-image bits and
    payloads). ``candidates`` indexes the samples that may be herded (the
    current task's data) and ``features`` are their backbone features, row
    aligned. Classes absent from ``candidates`` are old classes: their data is
    gone, so they keep a prefix of the herding order stored in ``previous``.

    The equivalent capacity is split equally across classes and a final bit
    audit trims tail exemplars if variable image sizes overflow the budget.
    """
    if split.bits is None or split.payloads is None:
        raise ValueError("split must be codec-preprocessed (bits and payloads required)")
    candidates = np.asarray(candidates, dtype=np.int64)
    feats = np.asarray(features, dtype=np.float64)
    if len(feats) != len(candidates):
        raise ValueError("features and candidates are misaligned")
    if normalize and len(feats):
        feats = feats / (np.linalg.norm(feats, axis=1, keepdims=True) + 1e-12)
    seen = sorted(int(c) for c in seen_classes)
    capacity = equivalent_capacity(budget)
    if capacity < len(seen):
        raise BudgetError(
            f"capacity {capacity} < {len(seen)} classes; need at least "
            f"{minimum_budget_bytes(len(seen), budget)} bytes at bpp {budget.bpp_comp:.4f}"
        )
    cand_labels = split.labels[candidates]
    per_class: dict[int, list[int]] = {}
    herding: dict[int, list[int]] = {}
    for c, quota in zip(seen, allocate(len(seen), capacity)):
        rows = np.flatnonzero(cand_labels == c)
        if len(rows):
            order = herding_select(feats[rows], min(quota, len(rows)))
            herding[c] = [int(candidates[rows[i]]) for i in order]
        elif previous is not None and c in previous.herding_order:
            herding[c] = list(previous.herding_order[c])
        else:
            raise BudgetError(f"no samples or stored exemplars for seen class {c}")
        per_class[c] = herding[c][:quota]
    _trim_to_budget(per_class, lambda i: int(split.bits[i]), budget.bits)

    shapes = split.shapes()
    buf = ExemplarBuffer(capacity, budget.bits, codec=codec, herding_order=herding)
    for c in seen:
        for i in per_class[c]:
            buf.entries.append(BufferEntry(c, i, int(split.bits[i])))
            buf.payloads.append(CompressedSample(split.payloads[i], *shapes[i]))
    assert buf.total_bits <= budget.bits
    return buf
