"""Experiment configuration, the incremental run loop and reporting."""
from __future__ import annotations

import copy
import csv
import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import buffer as buffer_mod
from .buffer import BufferEntry, ExemplarBuffer, MemoryBudget, rebuild_buffer
from .codecs import CodecError, CodecSpec, CompressedSample
from .selection import (CodecScore, ForgettingProbeResult, best_probe, forgetting_probe, plot_forgetting,
                        score_codec, select_codec, write_probe_csv, write_scores_csv)
from .tasks import (ConfigurationError, DatasetHandle, ProtocolSpec, Split, TaskSequence,
                    build_task_sequence, load_image_folder, load_packed, make_synthetic,
                    prepare_cached, preprocess_with_codec)
from .trainer import (ModelSnapshot, TrainConfig, compute_class_means, extract_features, load_checkpoint,
                      predict, save_checkpoint, train_step)

logger = logging.getLogger(__name__)

INCOMPLETE_MARKER = "RUN_INCOMPLETE"
PREPROCESS_MODES = ("matched", "mismatched")


class StageFailure(RuntimeError):
    pass


# --- configuration ----------------------------------------------------------

@dataclass
class CodecCandidate:
    method: str
    qualities: list = field(default_factory=list)
    external_command: str | None = None

    def specs(self) -> list[CodecSpec]:
        return [CodecSpec(self.method, int(q), self.external_command) for q in self.qualities]


@dataclass
class ProbeConfig:
    method: str = "finetune"
    train: dict = field(default_factory=dict)
    budget_fraction: float | None = None
    fmse_samples: int = 200


@dataclass
class RunConfig:
    dataset: dict = field(default_factory=lambda: {"name": "synthetic"})
    protocol: dict = field(default_factory=lambda: {"kind": "LFS", "num_tasks": 10, "shuffle_seed": 1993})
    codecs: list = field(default_factory=list)
    codec: dict | None = None
    budget: dict = field(default_factory=lambda: {"reference_images": 1000})
    method: str = "icarl"
    train: dict = field(default_factory=dict)
    probe: dict = field(default_factory=dict)
    preprocess: str = "matched"
    output_dir: str = "runs/default"
    seed: int = 1993

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**copy.deepcopy(d))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides: Sequence[str] = ()) -> "RunConfig":
        with open(path) as fh:
            d = yaml.safe_load(fh) or {}
        return cls.from_dict(apply_overrides(d, overrides))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    # typed views
    def protocol_spec(self) -> ProtocolSpec:
        return ProtocolSpec(**self.protocol)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{"seed": self.seed, **self.train})

    def probe_config(self) -> ProbeConfig:
        return ProbeConfig(**self.probe)

    def probe_train_config(self) -> TrainConfig:
        return TrainConfig(**{"seed": self.seed, **self.train, **self.probe_config().train})

    def candidates(self) -> list[CodecCandidate]:
        return [CodecCandidate(**c) for c in self.codecs]

    def fixed_codec(self) -> CodecSpec | None:
        return None if self.codec is None else CodecSpec(**self.codec)

    def validate(self) -> None:
        try:
            self.protocol_spec()
            self.train_config()
            self.probe_train_config()
            for cand in self.candidates():
                if not cand.qualities:
                    raise ConfigurationError(f"codec candidate {cand.method} has an empty quality grid")
                cand.specs()
            self.fixed_codec()
        except (TypeError, ValueError, CodecError) as exc:
            raise ConfigurationError(str(exc)) from exc
        if self.method not in ("icarl", "wa"):
            raise ConfigurationError(f"method must be icarl or wa, got {self.method!r}")
        if self.preprocess not in PREPROCESS_MODES:
            raise ConfigurationError(f"preprocess must be one of {PREPROCESS_MODES}")
        if not ("reference_images" in self.budget or "bytes" in self.budget):
            raise ConfigurationError("budget needs reference_images or bytes")
        if "name" not in self.dataset:
            raise ConfigurationError("dataset.name is required")
        if self.dataset["name"] != "synthetic" and "path" not in self.dataset:
            raise ConfigurationError("dataset.path is required for non-synthetic datasets")


def apply_overrides(d: dict, overrides: Sequence[str]) -> dict:
    """Apply ``key.sub=value`` overrides; values are parsed as YAML scalars."""
    d = copy.deepcopy(d)
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"override {key}: {p} is not a section")
        node[parts[-1]] = yaml.safe_load(raw)
    return d


# --- data plumbing ----------------------------------------------------------

def load_dataset(cfg: RunConfig) -> DatasetHandle:
    spec = dict(cfg.dataset)
    name = spec.pop("name")
    if name == "synthetic":
        return make_synthetic(**spec)
    fmt = spec.get("format", "folder")
    if fmt == "folder":
        return load_image_folder(spec["path"], name)
    if fmt == "packed":
        return load_packed(spec["path"], name)
    raise ConfigurationError(f"unknown dataset format {fmt!r}")


def remap_labels(dataset: DatasetHandle, seq: TaskSequence) -> DatasetHandle:
    """Relabel both splits so class ``seq.class_order[k]`` becomes label ``k``."""
    lut = seq.label_map()

    def relabel(s: Split) -> Split:
        return Split(s.images, lut[s.labels], s.bits, s.payloads)

    return DatasetHandle(dataset.name, relabel(dataset.train), relabel(dataset.test), dataset.codec)


def source_rate(dataset: DatasetHandle) -> tuple[float, float]:
    """(bpp_ori, mean original bytes per image) of the training split.

    Uses recorded source bits when the dataset was ingested from encoded
    files, otherwise 24 bpp raw RGB.
    """
    pixels = dataset.train.pixels()
    if dataset.codec is None and dataset.train.bits is not None:
        bits = dataset.train.bits
        logger.info("source data carries encoded sizes: bpp_ori=%.4f", bits.sum() / pixels.sum())
    else:
        bits = pixels * 24
    return float(bits.sum() / pixels.sum()), float(bits.mean() / 8)


def make_budget(cfg: RunConfig, dataset: DatasetHandle, bpp_comp: float | None = None) -> MemoryBudget:
    bpp_ori, per_image = source_rate(dataset)
    if "bytes" in cfg.budget:
        nbytes = int(cfg.budget["bytes"])
        ref = int(nbytes // per_image)
        logger.info("budget %d bytes corresponds to %d original images (%.1f bytes each)", nbytes, ref, per_image)
        return MemoryBudget(nbytes, ref, bpp_ori, bpp_comp or bpp_ori)
    return MemoryBudget.from_reference(int(cfg.budget["reference_images"]), per_image, bpp_ori,
                                       bpp_comp or bpp_ori)


def dataset_rate(dataset: DatasetHandle) -> float:
    return float(dataset.train.bits.sum() / dataset.train.pixels().sum())


# --- records ----------------------------------------------------------------

def aggregate_metrics(accuracies: Sequence[float]) -> tuple[float, float]:
    """Average incremental accuracy and last-step accuracy."""
    accuracies = list(accuracies)
    if not accuracies:
        raise ValueError("no accuracies to aggregate")
    return float(np.mean(accuracies)), float(accuracies[-1])


@dataclass
class RunRecord:
    accuracies: list = field(default_factory=list)
    old_accuracies: list = field(default_factory=list)
    new_accuracies: list = field(default_factory=list)
    buffer_sizes: list = field(default_factory=list)
    buffer_bits: list = field(default_factory=list)
    budget_bits: int = 0
    codec: str = "raw"
    method: str = "icarl"
    preprocess: str = "matched"
    provenance: dict = field(default_factory=dict)
    num_tasks: int = 0

    @property
    def average(self) -> float:
        return aggregate_metrics(self.accuracies)[0]

    @property
    def last(self) -> float:
        return aggregate_metrics(self.accuracies)[1]

    @property
    def complete(self) -> bool:
        return len(self.accuracies) == self.num_tasks

    @property
    def mean_old_accuracy(self) -> float:
        vals = [a for a in self.old_accuracies if a is not None and not math.isnan(a)]
        return float(np.mean(vals)) if vals else math.nan

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if self.accuracies:
            d["average"], d["last"] = aggregate_metrics(self.accuracies)
        d["complete"] = self.complete
        return d


def _split_accuracy(pred: np.ndarray, labels: np.ndarray, lo: int, hi: int) -> float:
    mask = (labels >= lo) & (labels < hi)
    return float(np.mean(pred[mask] == labels[mask])) if mask.any() else math.nan


def _jsonable(x):
    if isinstance(x, float) and math.isnan(x):
        return None
    return x


# --- the incremental loop ---------------------------------------------------

def _save_buffer_state(buf: ExemplarBuffer, path: Path) -> None:
    path.write_text(json.dumps({
        "capacity": buf.capacity,
        "budget_bits": buf.budget_bits,
        "entries": [[e.label, e.sample_id, e.bits] for e in buf.entries],
        "herding_order": {str(k): v for k, v in buf.herding_order.items()},
    }))


def _load_buffer_state(path: Path, split: Split, codec: CodecSpec) -> ExemplarBuffer:
    d = json.loads(path.read_text())
    shapes = split.shapes()
    buf = ExemplarBuffer(d["capacity"], d["budget_bits"], codec=codec,
                         herding_order={int(k): v for k, v in d["herding_order"].items()})
    for label, sid, bits in d["entries"]:
        buf.entries.append(BufferEntry(label, sid, bits))
        buf.payloads.append(CompressedSample(split.payloads[sid], *shapes[sid]))
    return buf


def run_incremental(original: DatasetHandle, prepared: DatasetHandle, seq: TaskSequence,
                    budget: MemoryBudget, method: str, cfg: TrainConfig, mode: str = "matched",
                    out_dir=None, resume: bool = True) -> RunRecord:
    """Train and evaluate over every task of ``seq``.

    ``original`` and ``prepared`` carry incremental labels; ``prepared`` is the
    codec-preprocessed copy whose payloads fill the exemplar buffer. In
    ``matched`` mode all training and test images come from ``prepared``; in
    ``mismatched`` mode new-task training and test images are the originals and
    only the exemplars are compressed.
    """
    if mode not in PREPROCESS_MODES:
        raise ConfigurationError(f"unknown preprocessing mode {mode!r}")
    codec = prepared.codec or CodecSpec.identity()
    budget = budget.with_rate(dataset_rate(prepared))
    source = prepared if mode == "matched" else original
    record = RunRecord(budget_bits=budget.bits, codec=codec.key, method=method, preprocess=mode,
                       num_tasks=seq.num_tasks)
    out = Path(out_dir) if out_dir is not None else None
    start = 0
    model, buf = ModelSnapshot.create(cfg), None
    if out is not None:
        for sub in ("state", "predictions", "checkpoints"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        if resume:
            start, model, buf = _resume(out, record, prepared.train, codec, model)
        elif (out / "metrics.jsonl").exists():
            (out / "metrics.jsonl").unlink()
            if (out / "buffer_manifest.csv").exists():
                (out / "buffer_manifest.csv").unlink()

    if out is not None:
        (out / "run.json").write_text(json.dumps({
            "num_tasks": seq.num_tasks, "task_sizes": seq.task_sizes, "class_order": seq.class_order,
            "codec": codec.key, "method": method, "preprocess": mode, "budget_bits": budget.bits,
        }))
    for step in range(start, seq.num_tasks):
        t0 = time.time()
        idx = seq.train_indices[step]
        ex_images, ex_labels = (buf.load(), buf.labels) if buf is not None and len(buf) else (None, None)
        model = train_step(model, source.train.images[idx], source.train.labels[idx], method, cfg,
                           ex_images, ex_labels)
        seen = seq.seen_classes(step)
        feats = extract_features(model, source.train.images[idx])
        buf = rebuild_buffer(prepared.train, idx, feats, range(seen), budget, codec, buf)
        if method == "icarl":
            compute_class_means(model, buf.load(), buf.labels, seen)

        test_idx = np.concatenate(seq.test_indices[: step + 1])
        labels = source.test.labels[test_idx]
        pred = predict(model, source.test.images[test_idx], method)
        num_old = seq.seen_classes(step - 1) if step else 0
        acc = float(np.mean(pred == labels))
        old = _split_accuracy(pred, labels, 0, num_old)
        new = _split_accuracy(pred, labels, num_old, seen)
        record.accuracies.append(acc)
        record.old_accuracies.append(old)
        record.new_accuracies.append(new)
        record.buffer_sizes.append(len(buf))
        record.buffer_bits.append(buf.total_bits)
        logger.info("step %d: seen=%d acc=%.4f old=%.4f new=%.4f buffer=%d (%d/%d bits) %.1fs",
                    step, seen, acc, old, new, len(buf), buf.total_bits, budget.bits, time.time() - t0)
        if out is not None:
            np.savez(out / "predictions" / f"step_{step}.npz", test_index=test_idx, labels=labels,
                     predictions=pred, num_old=num_old, seen=seen)
            buf.write_manifest(out / "buffer_manifest.csv", step, append=True)
            _save_buffer_state(buf, out / "state" / f"buffer_{step}.json")
            save_checkpoint(model, out / "checkpoints" / f"step_{step}.pt",
                            {"accuracy": acc, "old_accuracy": _jsonable(old), "codec": codec.key})
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps({
                    "step": step, "seen_classes": seen, "accuracy": acc, "old_accuracy": _jsonable(old),
                    "new_accuracy": _jsonable(new), "buffer_size": len(buf), "buffer_bits": buf.total_bits,
                    "budget_bits": budget.bits, "capacity": buf.capacity,
                }) + "\n")
    return record


def _resume(out: Path, record: RunRecord, split: Split, codec: CodecSpec, model):
    metrics = out / "metrics.jsonl"
    if not metrics.exists():
        return 0, model, None
    rows = [json.loads(line) for line in metrics.read_text().splitlines() if line.strip()]
    done = 0
    while (done < len(rows) and (out / "checkpoints" / f"step_{done}.pt").exists()
           and (out / "state" / f"buffer_{done}.json").exists()):
        done += 1
    rows = rows[:done]
    if not rows:
        return 0, model, None
    for r in rows:
        record.accuracies.append(r["accuracy"])
        record.old_accuracies.append(math.nan if r["old_accuracy"] is None else r["old_accuracy"])
        record.new_accuracies.append(math.nan if r["new_accuracy"] is None else r["new_accuracy"])
        record.buffer_sizes.append(r["buffer_size"])
        record.buffer_bits.append(r["buffer_bits"])
    # rewrite logs so they only hold completed steps
    metrics.write_text("".join(json.dumps(r) + "\n" for r in rows))
    manifest = out / "buffer_manifest.csv"
    if manifest.exists():
        keep = [r for r in buffer_mod.read_manifest(manifest) if r["step"] < done]
        with open(manifest, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "class", "sample_id", "bits"])
            for r in keep:
                w.writerow([r["step"], r["class"], r["sample_id"], r["bits"]])
    last = done - 1
    logger.info("resuming after step %d", last)
    model = load_checkpoint(out / "checkpoints" / f"step_{last}.pt")
    buf = _load_buffer_state(out / "state" / f"buffer_{last}.json", split, codec)
    return done, model, buf


# --- selection stages -------------------------------------------------------

@dataclass
class SelectionResult:
    probes: list
    rate_choice: dict
    scores: list
    selected: CodecSpec


def probe_rates(cfg: RunConfig, original: DatasetHandle, seq: TaskSequence, raw_dataset: DatasetHandle,
                root=None) -> list[ForgettingProbeResult]:
    """Forgetting probe for every candidate codec and quality."""
    probe = cfg.probe_config()
    tcfg = cfg.probe_train_config()
    frac = probe.budget_fraction
    if frac is None:
        frac = seq.task_sizes[0] / sum(seq.task_sizes)
    budget = make_budget(cfg, raw_dataset).scaled(frac)
    results = []
    for cand in cfg.candidates():
        for codec in cand.specs():
            prepared = remap_labels(prepare_cached(raw_dataset, codec, root), seq)
            results.append(forgetting_probe(prepared, seq, budget, tcfg, probe.method))
    return results


def rate_choices(results: Sequence[ForgettingProbeResult]) -> dict[str, ForgettingProbeResult]:
    by_method: dict[str, list] = {}
    for r in results:
        by_method.setdefault(r.codec.method, []).append(r)
    return {m: best_probe(rs) for m, rs in by_method.items()}


def select_codec_by_fmse(cfg: RunConfig, original: DatasetHandle, seq: TaskSequence,
                         codecs: Sequence[CodecSpec]) -> tuple[list[CodecScore], CodecSpec]:
    """Score each codec by feature MSE under a backbone trained on the first task."""
    probe = cfg.probe_config()
    tcfg = cfg.probe_train_config()
    idx = seq.train_indices[0]
    model = train_step(ModelSnapshot.create(tcfg), original.train.images[idx],
                       original.train.labels[idx], "finetune", tcfg)
    sample = original.train.images[idx[: probe.fmse_samples]]
    scores = [score_codec(model, sample, c) for c in codecs]
    return scores, select_codec(scores)


def run_selection(cfg: RunConfig, original: DatasetHandle, seq: TaskSequence, raw_dataset: DatasetHandle,
                  out: Path | None = None, root=None) -> SelectionResult:
    probes = probe_rates(cfg, original, seq, raw_dataset, root)
    choices = rate_choices(probes)
    scores, selected = select_codec_by_fmse(cfg, original, seq, [r.codec for r in choices.values()])
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_probe_csv(probes, out / "probe.csv")
        plot_forgetting(probes, out / "forgetting.png", [r.codec for r in choices.values()])
        write_scores_csv(scores, selected, out / "codec_scores.csv")
        (out / "selected_codec.json").write_text(json.dumps(dataclasses.asdict(selected)))
    return SelectionResult(probes, {m: r.codec.quality for m, r in choices.items()}, scores, selected)


# --- pipeline ---------------------------------------------------------------

def run_pipeline(cfg: RunConfig, resume: bool = True) -> RunRecord:
    """prepare -> probe -> select -> train -> report, persisted under ``cfg.output_dir``."""
    cfg.validate()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / INCOMPLETE_MARKER
    marker.write_text("started\n")
    cfg.save(out / "config.yaml")
    stage = "prepare"
    try:
        raw = load_dataset(cfg)
        seq = build_task_sequence(raw, cfg.protocol_spec())
        original = remap_labels(raw, seq)
        root = Path(cfg.output_dir) / "cache" if "COMPCIL_CACHE" not in os.environ else None
        provenance = {"class_order": seq.class_order, "task_sizes": seq.task_sizes}

        codec = cfg.fixed_codec()
        if codec is None and cfg.codecs:
            stage = "select"
            sel = run_selection(cfg, original, seq, raw, out / "selection", root)
            codec = sel.selected
            provenance["rate_choice"] = sel.rate_choice
            provenance["codec_scores"] = [
                {"codec": s.codec.key, "f_mse": s.f_mse, "bpp": s.mean_bpp, "psnr": s.mean_psnr}
                for s in sel.scores
            ]
        codec = codec or CodecSpec.identity()
        provenance["codec"] = dataclasses.asdict(codec)

        stage = "prepare"
        prepared = remap_labels(prepare_cached(raw, codec, root), seq)
        budget = make_budget(cfg, raw, dataset_rate(prepared))
        provenance["budget"] = dataclasses.asdict(budget)
        provenance["capacity"] = buffer_mod.equivalent_capacity(budget)

        stage = "train"
        record = run_incremental(original, prepared, seq, budget, cfg.method, cfg.train_config(),
                                 cfg.preprocess, out, resume)
        record.provenance = provenance
        (out / "summary.json").write_text(json.dumps(_clean(record.to_dict()), indent=2))
        stage = "report"
        emit_report(out)
    except ConfigurationError:
        marker.write_text(f"failed at stage {stage}\n")
        raise
    except Exception as exc:
        marker.write_text(f"failed at stage {stage}: {exc}\n")
        raise StageFailure(f"stage {stage} failed: {exc}") from exc
    marker.unlink()
    return record


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# --- domain shift -----------------------------------------------------------

def domain_shift_report(cfg_matched: RunConfig, cfg_mismatched: RunConfig, out_dir=None) -> dict:
    """Run the matched and mismatched preprocessing variants and pair their old-class curves."""
    a, b = cfg_matched.to_dict(), cfg_mismatched.to_dict()
    for d in (a, b):
        d.pop("preprocess")
        d.pop("output_dir")
    if a != b:
        diff = sorted(k for k in a if a[k] != b[k])
        raise ConfigurationError(f"domain-shift configs differ beyond the preprocessing flag: {diff}")
    if cfg_matched.preprocess != "matched" or cfg_mismatched.preprocess != "mismatched":
        raise ConfigurationError("expected one matched and one mismatched config")
    codec = cfg_matched.fixed_codec()
    if codec is None:
        raise ConfigurationError("domain-shift comparison needs a fixed codec")

    raw = load_dataset(cfg_matched)
    seq = build_task_sequence(raw, cfg_matched.protocol_spec())
    original = remap_labels(raw, seq)
    prepared = remap_labels(preprocess_with_codec(raw, codec), seq)
    budget = make_budget(cfg_matched, raw, dataset_rate(prepared))
    tcfg = cfg_matched.train_config()
    curves = {}
    for mode in PREPROCESS_MODES:
        curves[mode] = run_incremental(original, prepared, seq, budget, cfg_matched.method, tcfg, mode)
    report = {
        "codec": codec.key,
        "matched": curves["matched"].old_accuracies,
        "mismatched": curves["mismatched"].old_accuracies,
        "matched_accuracy": curves["matched"].accuracies,
        "mismatched_accuracy": curves["mismatched"].accuracies,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "domain_shift.json").write_text(json.dumps(_clean(report), indent=2))
        _plot_pair(report, out / "domain_shift.png")
    return report


def _plot_pair(report: dict, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for mode, style in (("mismatched", "--"), ("matched", "-")):
        ys = [np.nan if v is None else 100 * v for v in report[mode]]
        ax.plot(range(len(ys)), ys, style, marker="o", label=f"{mode} test preprocessing")
    ax.set_xlabel("incremental step")
    ax.set_ylabel("old-class accuracy (%)")
    ax.set_title(report["codec"])
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# --- comparison helpers -----------------------------------------------------

def compare_with_uncompressed(cfg: RunConfig, codec: CodecSpec) -> tuple[RunRecord, RunRecord]:
    """Same budget, same seed: ``codec``-preprocessed run versus raw exemplars."""
    raw = load_dataset(cfg)
    seq = build_task_sequence(raw, cfg.protocol_spec())
    original = remap_labels(raw, seq)
    tcfg = cfg.train_config()
    records = []
    for c in (codec, CodecSpec.identity()):
        prepared = remap_labels(preprocess_with_codec(raw, c), seq)
        budget = make_budget(cfg, raw, dataset_rate(prepared))
        records.append(run_incremental(original, prepared, seq, budget, cfg.method, tcfg, "matched"))
    return records[0], records[1]


# --- reporting --------------------------------------------------------------

def recompute_accuracies(run_dir) -> dict[int, dict]:
    """Per-step accuracies recomputed from saved predictions."""
    out = {}
    for f in sorted(Path(run_dir, "predictions").glob("step_*.npz"), key=lambda p: int(p.stem[5:])):
        step = int(f.stem[5:])
        with np.load(f) as z:
            labels, pred = z["labels"], z["predictions"]
            num_old, seen = int(z["num_old"]), int(z["seen"])
        out[step] = {
            "accuracy": float(np.mean(pred == labels)),
            "old_accuracy": _split_accuracy(pred, labels, 0, num_old),
            "new_accuracy": _split_accuracy(pred, labels, num_old, seen),
        }
    return out


def emit_report(run_dir) -> dict[str, Path]:
    """Summary table, metrics CSV/JSON and plots recomputed from persisted predictions.

    Works on partial runs: steps without predictions are marked missing.
    """
    run_dir = Path(run_dir)
    cfg_path = run_dir / "config.yaml"
    cfg = yaml.safe_load(cfg_path.read_text()) if cfg_path.exists() else {}
    steps = recompute_accuracies(run_dir)
    summary_path = run_dir / "summary.json"
    summary = json.loads(summary_path.read_text()) if summary_path.exists() else {}
    run_path = run_dir / "run.json"
    run_meta = json.loads(run_path.read_text()) if run_path.exists() else {}
    num_tasks = run_meta.get("num_tasks") or (max(steps) + 1 if steps else 0)

    accs = [steps[s]["accuracy"] for s in sorted(steps)]
    missing = [s for s in range(num_tasks) if s not in steps]
    paths = {}

    with open(run_dir / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "accuracy", "old_accuracy", "new_accuracy"])
        for s in range(num_tasks):
            if s in steps:
                m = steps[s]
                w.writerow([s, f"{m['accuracy']:.6f}", _fmt(m["old_accuracy"]), _fmt(m["new_accuracy"])])
            else:
                w.writerow([s, "missing", "missing", "missing"])
    paths["metrics_csv"] = run_dir / "metrics.csv"

    result = {"steps": {str(k): _clean(v) for k, v in steps.items()}, "missing_steps": missing,
              "num_tasks": num_tasks, "complete": not missing and bool(steps)}
    if accs:
        result["average"], result["last"] = aggregate_metrics(accs)
    (run_dir / "report.json").write_text(json.dumps(result, indent=2))
    paths["report_json"] = run_dir / "report.json"

    method = cfg.get("method", "?")
    codec = (summary.get("provenance") or {}).get("codec") or cfg.get("codec") or {"method": "raw"}
    codec_name = codec.get("method", "raw") + (f" q{codec['quality']}" if codec.get("quality") else "")
    budget = cfg.get("budget", {})
    lines = [
        f"# Run report: {run_dir.name}",
        "",
        f"method: {method}  codec: {codec_name}  budget: {budget}  preprocessing: {cfg.get('preprocess', '?')}",
        "",
        "| Method | Codec | Avg (%) | Last (%) | Steps |",
        "|---|---|---|---|---|",
    ]
    if accs:
        avg, last = aggregate_metrics(accs)
        lines.append(f"| {method} | {codec_name} | {100 * avg:.2f} | {100 * last:.2f} | "
                     f"{len(accs)}/{num_tasks} |")
    else:
        lines.append(f"| {method} | {codec_name} | - | - | 0/{num_tasks} |")
    lines += ["", "| Step | Acc (%) | Old (%) | New (%) |", "|---|---|---|---|"]
    for s in range(num_tasks):
        if s in steps:
            m = steps[s]
            lines.append(f"| {s} | {100 * m['accuracy']:.2f} | {_pct(m['old_accuracy'])} | "
                         f"{_pct(m['new_accuracy'])} |")
        else:
            lines.append(f"| {s} | missing | missing | missing |")
    if missing:
        lines += ["", f"Partial run: steps {missing} missing."]
    if cfg:
        lines += ["", "## Configuration", "", "```yaml", yaml.safe_dump(cfg, sort_keys=False).rstrip(), "```"]
    (run_dir / "summary.md").write_text("\n".join(lines) + "\n")
    paths["summary_md"] = run_dir / "summary.md"

    if accs:
        _plot_accuracy(steps, run_dir / "accuracy.png")
        paths["accuracy_png"] = run_dir / "accuracy.png"
    return paths


def _fmt(v):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"


def _pct(v):
    return "-" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{100 * v:.2f}"


def _plot_accuracy(steps: dict, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = sorted(steps)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(xs, [100 * steps[s]["accuracy"] for s in xs], marker="o", label="all seen classes")
    ax.plot(xs, [100 * steps[s]["old_accuracy"] for s in xs], marker="s", label="old classes")
    ax.set_xlabel("incremental step")
    ax.set_ylabel("top-1 accuracy (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
