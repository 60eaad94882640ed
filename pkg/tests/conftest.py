import numpy as np
import pytest

from v2s import autodiff as ad


def numeric_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to array ``x``, perturbed in place."""
    g = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return g


def max_rel_err(a, n, floor=1e-7):
    a, n = np.ravel(a), np.ravel(n)
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)))


def grad_error(build, nodes, eps=1e-5):
    """Max relative error of backprop against the central-difference oracle for every node."""
    for n in nodes:
        n.zero_grad()
    ad.backward(build())
    worst = 0.0
    for n in nodes:
        num = numeric_grad(lambda: float(build().value), n.value, eps)
        worst = max(worst, max_rel_err(n.grad, num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -------------------------------------------------------- acceptance report

ACCEPTANCE: dict[int, list] = {}
CRITERIA = {
    2: "gradient integrity",
    3: "overfit capability",
    4: "learnability above baseline",
    5: "vocoder fidelity",
    6: "metric oracles",
    7: "exemplar synthesis exactness",
    8: "shape contracts",
    9: "ablation harness",
    10: "overlap protocol",
}


class _Check:
    def __init__(self, number: int, part: str):
        self.number, self.part, self.detail = number, part, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None
        detail = self.detail if ok else f"{self.detail} {exc_type.__name__}: {exc}".strip()
        ACCEPTANCE.setdefault(self.number, []).append((self.part, ok, detail))
        return False


@pytest.fixture
def criterion():
    """``with criterion(n, part) as c:`` records PASS/FAIL for acceptance criterion ``n``."""
    return _Check


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, title in CRITERIA.items():
        parts = ACCEPTANCE.get(n)
        if not parts:
            tr.write_line(f"NOT RUN  {n:2d}. {title}")
            continue
        ok = all(p[1] for p in parts)
        tr.write_line(f"{'PASS' if ok else 'FAIL'}     {n:2d}. {title}")
        for part, pok, detail in parts:
            tr.write_line(f"           {'ok ' if pok else 'BAD'} {part}: {detail}")
