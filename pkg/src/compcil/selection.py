"""Compression rate selection by a forgetting probe and codec selection by feature MSE."""
from __future__ import annotations

import csv
import logging
import math
from decimal import Decimal
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .buffer import MemoryBudget, rebuild_buffer
from .codecs import CodecSpec, PayloadCache, decode, encode, psnr
from .tasks import DatasetHandle, TaskSequence, split_first_task
from .trainer import (ModelSnapshot, TrainConfig, TrainingDivergence, compute_class_means, evaluate,
                      extract_features, train_step)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ForgettingProbeResult:
    codec: CodecSpec
    acc_step1: float
    acc_step2: float
    bpp: float = math.nan
    capacity: int = 0
    forgetting: float = field(init=False)

    def __post_init__(self):
        # exact decimal difference, rounded once: 0.9 - 0.7 gives 0.2, not 0.20000000000000007
        diff = Decimal(repr(float(self.acc_step1))) - Decimal(repr(float(self.acc_step2)))
        object.__setattr__(self, "forgetting", float(diff))

    @property
    def quality(self) -> int:
        return self.codec.quality


@dataclass(frozen=True)
class CodecScore:
    codec: CodecSpec
    f_mse: float
    mean_bpp: float = math.nan
    mean_psnr: float = math.nan


def forgetting_probe(dataset: DatasetHandle, seq: TaskSequence, budget: MemoryBudget, cfg: TrainConfig,
                     method: str = "finetune", split_seed: int = 1993) -> ForgettingProbeResult:
    """Two-step probe on the first task of a codec-preprocessed dataset.

    The first task's training data is split in two class-balanced halves.
    Model 1 learns the first half; an exemplar buffer is herded from it at the
    codec's equivalent capacity; model 2 continues on the second half plus the
    buffer. Both are scored on the held-out test images of the first task's
    classes; forgetting is the drop from model 1 to model 2.

    ``dataset`` labels must already be incremental labels (see
    :func:`compcil.experiments.remap_labels`).
    """
    codec = dataset.codec or CodecSpec.identity()
    if dataset.train.bits is None:
        raise ValueError("probe dataset must be codec-preprocessed")
    bpp = float(dataset.train.bits.sum() / dataset.train.pixels().sum())
    budget = budget.with_rate(bpp)
    first, second = split_first_task(seq, dataset.train.labels, split_seed)
    classes = sorted(set(dataset.train.labels[first].tolist()))
    test_idx = seq.test_indices[0]
    x, y = dataset.train.images, dataset.train.labels
    xt, yt = dataset.test.images[test_idx], dataset.test.labels[test_idx]
    try:
        model = train_step(ModelSnapshot.create(cfg), x[first], y[first], method, cfg)
        buf = rebuild_buffer(dataset.train, first, extract_features(model, x[first]), classes, budget, codec)
        ex_images = buf.load()
        if method == "icarl":
            compute_class_means(model, ex_images, buf.labels)
        acc1 = evaluate(model, xt, yt, method)
        model2 = train_step(model, x[second], y[second], method, cfg, ex_images, buf.labels)
        if method == "icarl":
            compute_class_means(model2, ex_images, buf.labels)
        acc2 = evaluate(model2, xt, yt, method)
    except TrainingDivergence as exc:
        raise TrainingDivergence(f"probe {codec.key}: {exc}") from exc
    result = ForgettingProbeResult(codec, acc1, acc2, bpp, len(buf))
    logger.info("probe %s: bpp=%.3f exemplars=%d acc1=%.4f acc2=%.4f forgetting=%.4f",
                codec.key, bpp, len(buf), acc1, acc2, result.forgetting)
    return result


def select_rate(results: Sequence[ForgettingProbeResult]) -> int:
    """Quality with the least forgetting; ties go to the lower bpp."""
    return best_probe(results).quality


def best_probe(results: Sequence[ForgettingProbeResult]) -> ForgettingProbeResult:
    results = list(results)
    if not results:
        raise ValueError("no probe results to select from")
    if not all(math.isfinite(r.forgetting) for r in results):
        raise ValueError("probe results must be finite")
    return min(results, key=lambda r: (r.forgetting, r.bpp, r.codec.method, r.codec.quality))


def features_mse(original_features, compressed_features) -> float:
    """Mean over samples and feature dimensions of squared feature differences."""
    a = np.asarray(original_features, dtype=np.float64)
    b = np.asarray(compressed_features, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"misaligned feature pairs: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("no feature pairs")
    return float(np.mean((a - b) ** 2))


def feature_mse(model: ModelSnapshot, originals, compressed) -> float:
    if len(originals) != len(compressed):
        raise ValueError(f"misaligned pairs: {len(originals)} originals vs {len(compressed)} compressed")
    return features_mse(extract_features(model, originals), extract_features(model, compressed))


def score_codec(model: ModelSnapshot, images, codec: CodecSpec, cache: PayloadCache | None = None) -> CodecScore:
    """F_MSE, pooled bpp and mean PSNR of ``codec`` on a fixed image sample."""
    enc = cache.encode if cache is not None else encode
    decoded, bits, pixels, scores = [], 0, 0, []
    for img in images:
        s = enc(img, codec)
        out = decode(s, codec)
        decoded.append(out)
        bits += s.bits
        pixels += s.pixels
        scores.append(psnr(img, out))
    decoded = np.stack(decoded) if isinstance(images, np.ndarray) else decoded
    finite = [p for p in scores if math.isfinite(p)]
    mean_psnr = float(np.mean(finite)) if len(finite) == len(scores) else math.inf
    return CodecScore(codec, feature_mse(model, images, decoded), bits / pixels, mean_psnr)


def select_codec(scores: Sequence[CodecScore]) -> CodecSpec:
    scores = list(scores)
    if not scores:
        raise ValueError("no codec scores to select from")
    best = min(scores, key=lambda s: (s.f_mse, s.mean_bpp, s.codec.method, s.codec.quality))
    for s in sorted(scores, key=lambda s: s.f_mse):
        logger.info("codec %-14s f_mse=%.5f bpp=%.3f psnr=%.2f%s", s.codec.key, s.f_mse,
                    s.mean_bpp, s.mean_psnr, "  <- selected" if s is best else "")
    return best.codec


def write_probe_csv(results: Sequence[ForgettingProbeResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "quality", "bpp", "acc1", "acc2", "forgetting"])
        for r in results:
            w.writerow([r.codec.method, r.codec.quality, f"{r.bpp:.6f}", f"{r.acc_step1:.6f}",
                        f"{r.acc_step2:.6f}", f"{r.forgetting:.6f}"])


def write_scores_csv(scores: Sequence[CodecScore], selected: CodecSpec, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "quality", "bpp", "psnr", "f_mse", "selected"])
        for s in scores:
            w.writerow([s.codec.method, s.codec.quality, f"{s.mean_bpp:.6f}", f"{s.mean_psnr:.6f}",
                        f"{s.f_mse:.8f}", int(s.codec == selected)])


def plot_forgetting(results: Sequence[ForgettingProbeResult], path, selected=None) -> None:
    """Forgetting against quality per codec; selected points drawn as pentagons."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    selected = set(selected or [])
    fig, ax = plt.subplots(figsize=(5, 4))
    by_method: dict[str, list[ForgettingProbeResult]] = {}
    for r in results:
        by_method.setdefault(r.codec.method, []).append(r)
    for method, rs in by_method.items():
        rs = sorted(rs, key=lambda r: r.quality)
        line, = ax.plot([r.quality for r in rs], [100 * r.forgetting for r in rs], marker="o", label=method)
        for r in rs:
            if r.codec in selected:
                ax.plot(r.quality, 100 * r.forgetting, marker="p", markersize=14,
                        color=line.get_color(), markeredgecolor="k")
    ax.set_xlabel("quality")
    ax.set_ylabel("forgetting (accuracy points)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def probe_rank_correlation(forgetting: Sequence[float], final_accuracy: Sequence[float]) -> float:
    """Spearman correlation between probe forgetting and full-run final accuracy."""
    from scipy.stats import spearmanr

    return float(spearmanr(forgetting, final_accuracy).statistic)
