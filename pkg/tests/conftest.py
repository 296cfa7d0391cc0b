import numpy as np
import pytest
import torch

from builtcount.backbone import tiny_backbone
from builtcount.dataset import ImageTile
from builtcount.ssnet import SSNet, SSNetArch

torch.set_num_threads(1)


def central_difference(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Numerical gradient of a scalar function of an array, entry by entry."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f(x)
        x[i] = old - eps
        fm = f(x)
        x[i] = old
        grad[i] = (fp - fm) / (2 * eps)
    return grad


def rel_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_ssnet():
    torch.manual_seed(0)
    return SSNet(SSNetArch(width_mult=0.125)).eval()


@pytest.fixture(scope="session")
def backbone():
    return tiny_backbone(0)


def make_tile(h=96, w=96, count=3, seed=0, mask=True, id_="t"):
    r = np.random.default_rng(seed)
    px = r.integers(0, 256, (h, w, 3), dtype=np.uint8)
    m = r.random((h, w)) > 0.7 if mask else None
    return ImageTile(id_, px, count, mask=m)


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, title: str, ok: bool, detail: str) -> bool:
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
