"""How much more fits in the same memory once exemplars are compressed?

Walks through bpp accounting, an RD curve and the equivalent-memory sizing
on the procedural benchmark. Runs in a few seconds; writes rd.png to the
current directory.
"""
import numpy as np

from compcil.buffer import MemoryBudget, equivalent_capacity, herding_select
from compcil.codecs import CodecSpec, dataset_bpp, plot_rd_curve, rd_curve
from compcil.tasks import make_synthetic

ds = make_synthetic(seed=0)
images = ds.train.images[:200]
print("images:", images.shape, images.dtype)

# uncompressed 8-bit RGB costs 24 bits per pixel, whatever the content
print("raw bpp:", dataset_bpp(images, CodecSpec.identity()))

# a small JPEG sweep; the header is a large share of a 32x32 file
points = rd_curve(images, "jpeg", [10, 25, 50, 75, 90]) + rd_curve(images, "webp", [10, 50, 90])
for p in points:
    print(f"  {p.codec.key:10s} {p.mean_bpp:6.3f} bpp  {p.mean_psnr:5.2f} dB")
plot_rd_curve(points, "rd.png", "synthetic 32x32")

# a budget worth 20 raw images, re-expressed in compressed images
budget = MemoryBudget.from_reference(20, 32 * 32 * 3, 24.0, 24.0)
print(f"budget: {budget.bytes} bytes")
for p in points:
    cap = equivalent_capacity(budget.with_rate(p.mean_bpp))
    print(f"  {p.codec.key:10s} -> {cap:4d} exemplars")

# herding picks exemplars whose running mean tracks the class mean
rng = np.random.default_rng(0)
feats = rng.normal(size=(50, 8))
order = herding_select(feats, 10)
mu = feats.mean(0)
for k in (1, 3, 10):
    gap = np.linalg.norm(feats[order[:k]].mean(0) - mu)
    print(f"herding: first {k:2d} exemplars, mean gap {gap:.3f}")
