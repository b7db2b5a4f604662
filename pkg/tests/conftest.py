import numpy as np
import pytest
import torch

from compcil.tasks import make_synthetic

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def smooth_images(rng):
    """Twenty smooth 32x32 RGB images: compressible, so JPEG behaves sensibly."""
    yy, xx = np.mgrid[0:32, 0:32] / 32.0
    out = []
    for _ in range(20):
        f = rng.uniform(0.5, 3, size=3)
        ph = rng.uniform(0, 2 * np.pi, size=3)
        img = np.stack([np.sin(2 * np.pi * f[c] * (xx + yy) + ph[c]) for c in range(3)], axis=-1)
        out.append(np.clip(128 + 80 * img + rng.normal(0, 4, img.shape), 0, 255).astype(np.uint8))
    return np.stack(out)


@pytest.fixture(scope="session")
def tiny_synthetic():
    return make_synthetic(num_classes=4, train_per_class=30, test_per_class=10, size=16, seed=3)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""
    def record(number, ok, detail):
        _ACCEPTANCE[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_ACCEPTANCE[number])
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])
