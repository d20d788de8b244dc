import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("ci", deadline=None, max_examples=60)
settings.load_profile("ci")

MNIST_DIR = Path(os.environ.get("AUTOFUSION_MNIST_DIR", "/root/data/mnist"))
FASHION_DIR = Path(os.environ.get("AUTOFUSION_FASHION_DIR", "/root/data/fashion"))


def _has_idx(d):
    return (d / "train-images-idx3-ubyte").exists() or (d / "train-images-idx3-ubyte.gz").exists()


needs_mnist = pytest.mark.skipif(not _has_idx(MNIST_DIR), reason="MNIST IDX files not found")
needs_fashion = pytest.mark.skipif(not _has_idx(FASHION_DIR), reason="Fashion-MNIST IDX files not found")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_grad(f, x, h=1e-3):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
