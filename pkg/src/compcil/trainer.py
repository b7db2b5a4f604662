"""Replay-based class-incremental trainers (iCaRL-style and WA-style)."""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

logger = logging.getLogger(__name__)

METHODS = ("icarl", "wa", "finetune")
CHECKPOINT_VERSION = 1
KD_TEMPERATURE = 2.0
EPSILON = 1e-8


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs_initial: int = 200
    epochs_incremental: int = 170
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    milestones: tuple = (80, 120)
    lr_decay: float = 0.1
    augment: bool = True
    seed: int = 1993
    backbone: str = "resnet32"
    width: int = 16
    image_size: int | None = None

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        for name in ("epochs_initial", "epochs_incremental", "batch_size"):
            if getattr(self, name) < 0 or (name == "batch_size" and self.batch_size == 0):
                raise ValueError(f"{name} must be positive")
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ValueError("invalid lr/momentum")
        top = max(self.epochs_initial, self.epochs_incremental)
        if any(m <= 0 or m > top for m in self.milestones):
            raise ValueError(f"milestones {self.milestones} outside epoch range 1..{top}")

    def epochs(self, step: int) -> int:
        return self.epochs_initial if step == 0 else self.epochs_incremental


# --- backbones --------------------------------------------------------------

class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + (x if self.shortcut is None else self.shortcut(x)))


class CifarResNet(nn.Module):
    """ResNet for 32x32 inputs with depth 6n+2 (resnet8, resnet20, resnet32...)."""

    def __init__(self, depth: int = 32, width: int = 16):
        super().__init__()
        if (depth - 2) % 6:
            raise ValueError("CIFAR ResNet depth must be 6n+2")
        n = (depth - 2) // 6
        self.stem = nn.Sequential(nn.Conv2d(3, width, 3, 1, 1, bias=False), nn.BatchNorm2d(width), nn.ReLU())
        layers, cin = [], width
        for stage, cout in enumerate((width, 2 * width, 4 * width)):
            for b in range(n):
                layers.append(BasicBlock(cin, cout, 2 if stage and b == 0 else 1))
                cin = cout
        self.layers = nn.Sequential(*layers)
        self.out_dim = cin

    def forward(self, x):
        x = self.layers(self.stem(x))
        return F.adaptive_avg_pool2d(x, 1).flatten(1)


def _resnet18(width: int = 64):
    import torchvision

    net = torchvision.models.resnet18(weights=None)
    net.out_dim = net.fc.in_features
    net.fc = nn.Identity()
    return net


def make_backbone(name: str, width: int = 16) -> nn.Module:
    if name == "resnet18":
        return _resnet18()
    if name.startswith("resnet"):
        return CifarResNet(int(name[len("resnet"):]), width)
    raise ValueError(f"unknown backbone {name!r}")


class _Head(nn.Linear):
    def reset_parameters(self):
        # an empty head has nothing to initialise
        if self.out_features:
            super().reset_parameters()


class ModelSnapshot(nn.Module):
    """Backbone plus an expanding linear head over incremental labels."""

    def __init__(self, backbone: nn.Module, backbone_name: str = "custom", width: int = 16,
                 image_size: int | None = None):
        super().__init__()
        self.backbone = backbone
        self.backbone_name = backbone_name
        self.width = width
        self.image_size = image_size
        self.feature_dim = backbone.out_dim
        self.head = _Head(self.feature_dim, 0)
        self.step = -1
        self.class_means: torch.Tensor | None = None

    @classmethod
    def create(cls, cfg: TrainConfig) -> "ModelSnapshot":
        torch.manual_seed(cfg.seed)
        return cls(make_backbone(cfg.backbone, cfg.width), cfg.backbone, cfg.width, cfg.image_size)

    @property
    def num_classes(self) -> int:
        return self.head.out_features

    def expand(self, total: int) -> None:
        old = self.head
        if total <= old.out_features:
            return
        head = _Head(self.feature_dim, total)
        with torch.no_grad():
            head.weight[: old.out_features] = old.weight
            head.bias[: old.out_features] = old.bias
        self.head = head

    def forward(self, x):
        return self.head(self.backbone(x))


# --- data -------------------------------------------------------------------

def to_tensor(images, size: int | None = None) -> torch.Tensor:
    """uint8 NHWC images (array or list) -> normalised NCHW float tensor."""
    if isinstance(images, np.ndarray) and size in (None, images.shape[1]) and images.ndim == 4:
        arr = images
    else:
        if size is None:
            shapes = {im.shape for im in images}
            if len(shapes) > 1:
                raise ValueError("images differ in size; set image_size")
            arr = np.stack(list(images))
        else:
            arr = np.stack([
                im if im.shape[:2] == (size, size)
                else np.asarray(Image.fromarray(im).resize((size, size), Image.BILINEAR))
                for im in images
            ])
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"expected NHWC RGB batch, got {arr.shape}")
    x = torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2).float()
    return (x / 255.0 - 0.5) / 0.25


def _augment(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Random horizontal flip and 4-pixel padded random crop."""
    n, _, h, w = x.shape
    flip = torch.rand(n, generator=gen) < 0.5
    x = torch.where(flip[:, None, None, None], x.flip(3), x)
    padded = F.pad(x, (4, 4, 4, 4))
    dy = torch.randint(0, 9, (n,), generator=gen).tolist()
    dx = torch.randint(0, 9, (n,), generator=gen).tolist()
    return torch.stack([padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(n)])


# --- training ---------------------------------------------------------------

def _kd_loss(logits, old_logits, temperature):
    log_p = F.log_softmax(logits / temperature, dim=1)
    q = F.softmax(old_logits / temperature, dim=1)
    return -(q * log_p).sum(dim=1).mean()


def align_weights(model: ModelSnapshot, num_old: int) -> float:
    """Rescale new-class head rows so their mean norm equals the old-class mean norm."""
    with torch.no_grad():
        w = model.head.weight
        norms = w.norm(dim=1)
        gamma = norms[:num_old].mean() / norms[num_old:].mean()
        w[num_old:] *= gamma
    return float(gamma)


def weight_norm_ratio(model: ModelSnapshot, num_old: int) -> float:
    norms = model.head.weight.detach().double().norm(dim=1)
    return float(norms[num_old:].mean() / norms[:num_old].mean())


def train_step(model: ModelSnapshot, images, labels, method: str, cfg: TrainConfig,
               exemplar_images=None, exemplar_labels=None) -> ModelSnapshot:
    """Learn one task on its data plus replayed exemplars; return a new snapshot.

    ``labels`` are incremental labels. The head grows to cover every label in
    the task. ``icarl`` and ``wa`` add temperature-2 distillation against the
    previous snapshot on old classes, weighted by old/total classes; ``wa``
    then aligns new-class weight norms. ``finetune`` is plain cross-entropy.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    labels = np.asarray(labels, dtype=np.int64)
    num_old = model.num_classes
    total = max(num_old, int(labels.max()) + 1)
    if method != "finetune" and num_old and total == num_old:
        raise ValueError(f"{method} step introduces no new classes")

    old = None
    if num_old and method != "finetune":
        old = copy.deepcopy(model).eval()
        for p in old.parameters():
            p.requires_grad_(False)
    new = copy.deepcopy(model)
    new.step = model.step + 1
    torch.manual_seed(cfg.seed + 1000 * new.step)
    new.expand(total)
    new.class_means = None

    x = to_tensor(images, new.image_size)
    y = torch.from_numpy(labels)
    if exemplar_images is not None and len(exemplar_images):
        x = torch.cat([x, to_tensor(exemplar_images, new.image_size)])
        y = torch.cat([y, torch.from_numpy(np.asarray(exemplar_labels, dtype=np.int64))])

    epochs = cfg.epochs(new.step)
    lam = num_old / total if old is not None else 0.0
    gen = torch.Generator().manual_seed(cfg.seed + new.step)
    opt = torch.optim.SGD(new.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, [m for m in cfg.milestones if m <= epochs], cfg.lr_decay)
    new.train()
    for epoch in range(epochs):
        perm = torch.randperm(len(y), generator=gen)
        for start in range(0, len(y), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            xb, yb = x[idx], y[idx]
            if cfg.augment:
                xb = _augment(xb, gen)
            logits = new(xb)
            loss = F.cross_entropy(logits, yb)
            if old is not None:
                with torch.no_grad():
                    old_logits = old(xb)
                kd = _kd_loss(logits[:, :num_old], old_logits, KD_TEMPERATURE)
                loss = (1 - lam) * loss + lam * kd
            if not torch.isfinite(loss):
                raise TrainingDivergence(
                    f"non-finite loss at step {new.step} epoch {epoch} batch {start // cfg.batch_size} "
                    f"(lr={opt.param_groups[0]['lr']:.4g}, method={method})"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
        sched.step()
    new.eval()
    if method == "wa" and num_old and total > num_old:
        gamma = align_weights(new, num_old)
        logger.info("step %d: WA gamma=%.4f", new.step, gamma)
    return new


# --- inference --------------------------------------------------------------

@torch.no_grad()
def extract_features(model: ModelSnapshot, images, batch_size: int = 256) -> np.ndarray:
    model.eval()
    if len(images) == 0:
        return np.zeros((0, model.feature_dim), dtype=np.float32)
    x = to_tensor(images, model.image_size)
    out = [model.backbone(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    return torch.cat(out).numpy()


@torch.no_grad()
def logits(model: ModelSnapshot, images, batch_size: int = 256) -> np.ndarray:
    model.eval()
    x = to_tensor(images, model.image_size)
    return torch.cat([model(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]).numpy()


def _normalize(v: np.ndarray) -> np.ndarray:
    return v / (np.linalg.norm(v, axis=-1, keepdims=True) + EPSILON)


def compute_class_means(model: ModelSnapshot, images, labels, num_classes: int | None = None) -> np.ndarray:
    """Normalised mean of normalised exemplar features per class."""
    num_classes = model.num_classes if num_classes is None else num_classes
    labels = np.asarray(labels)
    feats = _normalize(extract_features(model, images))
    means = np.zeros((num_classes, model.feature_dim))
    for c in range(num_classes):
        rows = feats[labels == c]
        if len(rows) == 0:
            raise ValueError(f"no exemplars for class {c}")
        means[c] = _normalize(rows.mean(axis=0))
    model.class_means = torch.from_numpy(means)
    return means


def nearest_mean(features: np.ndarray, class_means: np.ndarray) -> np.ndarray:
    d = ((features[:, None, :] - class_means[None, :, :]) ** 2).sum(-1)
    return d.argmin(axis=1)


def predict(model: ModelSnapshot, images, method: str) -> np.ndarray:
    if method == "icarl":
        if model.class_means is None:
            raise ValueError("icarl prediction needs class means; call compute_class_means first")
        return nearest_mean(_normalize(extract_features(model, images)), model.class_means.numpy())
    return logits(model, images).argmax(axis=1)


def evaluate(model: ModelSnapshot, images, labels, method: str) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty test set")
    if labels.max() >= model.num_classes or labels.min() < 0:
        raise ValueError(f"test labels include classes the model has not seen (head={model.num_classes})")
    return float(np.mean(predict(model, images, method) == labels))


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(model: ModelSnapshot, path, meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "version": CHECKPOINT_VERSION,
        "backbone": model.backbone_name,
        "width": model.width,
        "image_size": model.image_size,
        "num_classes": model.num_classes,
        "step": model.step,
        "state": model.state_dict(),
        "class_means": model.class_means,
    }
    torch.save(blob, path)
    sidecar = {"version": CHECKPOINT_VERSION, "step": model.step, "seen_classes": model.num_classes}
    sidecar.update(meta or {})
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))


def load_checkpoint(path) -> ModelSnapshot:
    blob = torch.load(path, weights_only=False)
    if blob["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob['version']}")
    model = ModelSnapshot(make_backbone(blob["backbone"], blob["width"]), blob["backbone"],
                          blob["width"], blob["image_size"])
    model.expand(blob["num_classes"])
    model.load_state_dict(blob["state"])
    model.step = blob["step"]
    model.class_means = blob["class_means"]
    return model.eval()
