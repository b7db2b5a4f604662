"""Lossy image codecs with exact bit accounting.

Every codec maps an 8-bit RGB array to a byte payload and back. Rates are
always measured from the payload length, so ``bits == 8 * len(payload)``
holds for every :class:`CompressedSample`.
"""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

METHODS = ("raw", "jpeg", "webp", "external")

# Inclusive quality ranges. ``raw`` ignores quality.
QUALITY_RANGE = {
    "raw": (0, 0),
    "jpeg": (0, 100),
    "webp": (0, 100),
    "external": (0, 1000),
}

# Documented defaults for RD sweeps; not taken from any published grid.
DEFAULT_QUALITY_GRID = {
    "jpeg": (5, 10, 15, 20, 30, 40, 50, 60, 75, 90),
    "webp": (0, 5, 10, 20, 30, 40, 50, 60, 75, 90),
    "raw": (0,),
}

PSNR_IDENTICAL = math.inf


class CodecError(RuntimeError):
    """Raised when an encode/decode fails or a codec is misconfigured."""


@dataclass(frozen=True)
class CodecSpec:
    method: str
    quality: int = 0
    external_command: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise CodecError(f"unknown codec method {self.method!r}; expected one of {METHODS}")
        lo, hi = QUALITY_RANGE[self.method]
        if self.method != "raw" and not lo <= int(self.quality) <= hi:
            raise CodecError(f"{self.method} quality {self.quality} outside [{lo}, {hi}]")
        if self.method == "external" and not self.external_command:
            raise CodecError("external codec requires external_command")

    @property
    def key(self) -> str:
        if self.method == "raw":
            return "raw"
        if self.method == "external":
            digest = hashlib.sha1(self.external_command.encode()).hexdigest()[:8]
            return f"external-{digest}-q{self.quality}"
        return f"{self.method}-q{self.quality}"

    @property
    def is_lossless(self) -> bool:
        return self.method == "raw"

    @classmethod
    def identity(cls) -> "CodecSpec":
        return cls("raw", 0)


@dataclass(frozen=True)
class CompressedSample:
    payload: bytes
    height: int
    width: int

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise CodecError("compressed sample must cover a positive pixel count")

    @property
    def bits(self) -> int:
        return 8 * len(self.payload)

    @property
    def pixels(self) -> int:
        return self.height * self.width

    @property
    def bpp(self) -> float:
        return self.bits / self.pixels


@dataclass(frozen=True)
class RatePoint:
    codec: CodecSpec
    mean_bpp: float
    mean_psnr: float


def _check_image(image) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise CodecError(f"expected HxWx3 uint8 image, got {image.dtype} {image.shape}")
    return image


def _pil_encode(image: np.ndarray, fmt: str, quality: int) -> bytes:
    buf = io.BytesIO()
    kwargs = {"quality": int(quality)}
    if fmt == "WEBP":
        kwargs["method"] = 6
    Image.fromarray(image, "RGB").save(buf, format=fmt, **kwargs)
    return buf.getvalue()


def _pil_decode(payload: bytes) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(payload)) as im:
            return np.asarray(im.convert("RGB"))
    except Exception as exc:  # PIL raises several unrelated types
        raise CodecError(f"corrupt payload: {exc}") from exc


def _external_argv(codec: CodecSpec, *args: str) -> list[str]:
    cmd = codec.external_command.replace("{quality}", str(codec.quality))
    return [*shlex.split(cmd), *args]


def _run_external(codec: CodecSpec, *args: str):
    env = dict(os.environ, CODEC_QUALITY=str(codec.quality))
    proc = subprocess.run(_external_argv(codec, *args), capture_output=True, env=env)
    if proc.returncode != 0:
        raise CodecError(
            f"external codec {codec.key} exited {proc.returncode}: "
            f"{proc.stderr.decode(errors='replace').strip()}"
        )


def _external_encode(image: np.ndarray, codec: CodecSpec) -> bytes:
    with tempfile.TemporaryDirectory() as tmp:
        src, dst = os.path.join(tmp, "in.png"), os.path.join(tmp, "out.bin")
        Image.fromarray(image, "RGB").save(src)
        _run_external(codec, "enc", src, dst)
        return Path(dst).read_bytes()


def _external_decode(payload: bytes, codec: CodecSpec) -> np.ndarray:
    with tempfile.TemporaryDirectory() as tmp:
        src, dst = os.path.join(tmp, "in.bin"), os.path.join(tmp, "out.png")
        Path(src).write_bytes(payload)
        _run_external(codec, "dec", src, dst)
        return _pil_decode(Path(dst).read_bytes())


_verified_external: set[str] = set()


def verify_external(codec: CodecSpec, probe: np.ndarray | None = None) -> None:
    """Round-trip a probe image through an external codec before batch use."""
    if codec.method != "external" or codec.key in _verified_external:
        return
    if probe is None:
        rng = np.random.default_rng(0)
        probe = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
    payload = _external_encode(probe, codec)
    if not payload:
        raise CodecError(f"external codec {codec.key} produced an empty payload")
    out = _external_decode(payload, codec)
    if out.shape != probe.shape:
        raise CodecError(
            f"external codec {codec.key} self-test changed shape {probe.shape} -> {out.shape}"
        )
    _verified_external.add(codec.key)


def encode(image, codec: CodecSpec) -> CompressedSample:
    image = _check_image(image)
    h, w = image.shape[:2]
    if codec.method == "raw":
        payload = np.ascontiguousarray(image).tobytes()
    elif codec.method == "jpeg":
        payload = _pil_encode(image, "JPEG", codec.quality)
    elif codec.method == "webp":
        payload = _pil_encode(image, "WEBP", codec.quality)
    else:
        verify_external(codec)
        payload = _external_encode(image, codec)
    return CompressedSample(payload, h, w)


def decode(sample: CompressedSample, codec: CodecSpec) -> np.ndarray:
    if codec.method == "raw":
        expected = sample.pixels * 3
        if len(sample.payload) != expected:
            raise CodecError(f"raw payload has {len(sample.payload)} bytes, expected {expected}")
        out = np.frombuffer(sample.payload, dtype=np.uint8).reshape(sample.height, sample.width, 3)
        return out.copy()
    if codec.method == "external":
        out = _external_decode(sample.payload, codec)
    else:
        out = _pil_decode(sample.payload)
    if out.shape[:2] != (sample.height, sample.width):
        raise CodecError(f"decoded shape {out.shape[:2]} != source {(sample.height, sample.width)}")
    return out


class PayloadCache:
    """On-disk cache of encoded payloads keyed by image content and codec.

    Writes go through a temp file and an atomic rename, so concurrent writers
    of the same key are harmless.
    """

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    def _path(self, image: np.ndarray, codec: CodecSpec) -> Path:
        h = hashlib.sha256()
        h.update(str(image.shape).encode())
        h.update(np.ascontiguousarray(image).tobytes())
        digest = h.hexdigest()
        return self.root / codec.key / digest[:2] / f"{digest}.bin"

    def encode(self, image, codec: CodecSpec) -> CompressedSample:
        image = _check_image(image)
        path = self._path(image, codec)
        if path.exists():
            return CompressedSample(path.read_bytes(), *image.shape[:2])
        sample = encode(image, codec)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent)
        with os.fdopen(fd, "wb") as fh:
            fh.write(sample.payload)
        os.replace(tmp, path)
        return sample


def default_cache() -> PayloadCache | None:
    root = os.environ.get("COMPCIL_CACHE")
    return PayloadCache(Path(root) / "payloads") if root else None


def psnr(reference, distorted) -> float:
    """PSNR in dB over all RGB channels with peak 255; ``inf`` when identical."""
    a = np.asarray(reference, dtype=np.float64)
    b = np.asarray(distorted, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(255.0**2 / mse)


def pooled_bpp(bits: Iterable[int], pixels: Iterable[int]) -> float:
    """Total bits over total pixels (not the mean of per-image rates)."""
    bits = [int(b) for b in bits]
    pixels = [int(p) for p in pixels]
    if not bits:
        raise ValueError("cannot compute bpp of an empty set")
    if len(bits) != len(pixels):
        raise ValueError("bits and pixels must align")
    return sum(bits) / sum(pixels)


def _iter_images(images) -> Sequence[np.ndarray]:
    return images if isinstance(images, (list, tuple)) else list(images)


def dataset_bpp(images, codec: CodecSpec, cache: PayloadCache | None = None) -> float:
    """Pooled bpp of ``images`` under ``codec``.

    ``images`` may be a sequence of arrays or anything with a ``train`` split
    (a :class:`~compcil.tasks.DatasetHandle`), in which case the training
    images are measured.
    """
    if hasattr(images, "train"):
        images = images.train.images
    images = _iter_images(images)
    if len(images) == 0:
        raise ValueError("cannot compute bpp of an empty dataset")
    enc = cache.encode if cache is not None else encode
    bits, pixels = [], []
    for img in images:
        s = enc(img, codec)
        bits.append(s.bits)
        pixels.append(s.pixels)
    return pooled_bpp(bits, pixels)


def rate_point(images, codec: CodecSpec, cache: PayloadCache | None = None) -> RatePoint:
    images = _iter_images(images)
    if len(images) == 0:
        raise ValueError("cannot measure an empty image set")
    enc = cache.encode if cache is not None else encode
    bits, pixels, scores = 0, 0, []
    for img in images:
        s = enc(img, codec)
        bits += s.bits
        pixels += s.pixels
        scores.append(psnr(img, decode(s, codec)))
    finite = [p for p in scores if math.isfinite(p)]
    mean_psnr = float(np.mean(finite)) if len(finite) == len(scores) else PSNR_IDENTICAL
    return RatePoint(codec, bits / pixels, mean_psnr)


def rd_curve(images, method: str, qualities: Iterable[int], cache: PayloadCache | None = None,
             external_command: str | None = None) -> list[RatePoint]:
    if hasattr(images, "train"):
        images = images.train.images
    qualities = list(qualities)
    if not qualities:
        raise ValueError("quality grid is empty")
    points = []
    for q in qualities:
        try:
            codec = CodecSpec(method, q, external_command)
            points.append(rate_point(images, codec, cache))
        except CodecError as exc:
            raise CodecError(f"{method} quality {q}: {exc}") from exc
    return sorted(points, key=lambda p: (p.mean_bpp, p.codec.quality))


def write_rd_csv(points: Sequence[RatePoint], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "quality", "bpp", "psnr"])
        for p in points:
            w.writerow([p.codec.method, p.codec.quality, f"{p.mean_bpp:.6f}", f"{p.mean_psnr:.6f}"])


def plot_rd_curve(points: Sequence[RatePoint], path, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    by_method: dict[str, list[RatePoint]] = {}
    for p in points:
        by_method.setdefault(p.codec.method, []).append(p)
    for method, pts in by_method.items():
        pts = sorted(pts, key=lambda p: p.mean_bpp)
        xs = [p.mean_bpp for p in pts]
        ys = [p.mean_psnr if math.isfinite(p.mean_psnr) else np.nan for p in pts]
        ax.plot(xs, ys, marker="o", label=method)
        for p, x, y in zip(pts, xs, ys):
            ax.annotate(str(p.codec.quality), (x, y), fontsize=7)
    ax.set_xlabel("bpp")
    ax.set_ylabel("PSNR (dB)")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
