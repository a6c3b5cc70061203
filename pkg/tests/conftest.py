import numpy as np
import pytest

from lsmae import model as M
from lsmae.masking import sample_mask
from lsmae.specs import derive_mask_plan


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


def rel_err(a, b, floor=1e-12):
    """``|a - b| / max(|a|, |b|, floor)``; the floor keeps exact zeros from dividing noise by noise."""
    a, b = float(a), float(b)
    return abs(a - b) / max(abs(a), abs(b), floor)


def numeric_grad(f, x: np.ndarray, index, h=1e-6):
    """Central difference of scalar ``f`` w.r.t. ``x[index]`` (float64)."""
    old = x[index]
    x[index] = old + h
    up = f()
    x[index] = old - h
    down = f()
    x[index] = old
    return (up - down) / (2 * h)


def tiny_setup(image_size=32, patch_size=4, mask_size=2, ratio=0.75, batch=2, seed=0, **overrides):
    cfg = M.preset("tiny", image_size, patch_size, **overrides)
    plan = derive_mask_plan(cfg.spec, mask_size, ratio, cfg.decoder_downsample)
    rng = np.random.default_rng(seed)
    images = rng.random((batch, image_size, image_size, 3)).astype(np.float32)
    masks = [sample_mask(plan, seed, i) for i in range(batch)]
    return cfg, plan, images, masks


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
