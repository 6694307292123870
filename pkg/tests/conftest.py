import numpy as np
import pytest

from longcast import tensor as T


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x`` (float64)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = f(x)
        flat[i] = keep - h
        down = f(x)
        flat[i] = keep
        out[i] = (up - down) / (2 * h)
    return grad


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def gradcheck(build, arrays, h: float = 1e-5):
    """Max relative error between tape gradients and finite differences.

    ``build`` maps a list of Tensors to a scalar Tensor.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [T.Tensor(a, requires_grad=True) for a in arrays]
    build(tensors).backward()
    worst = 0.0
    for i, a in enumerate(arrays):
        def f(x, i=i):
            with T.no_grad():
                args = [T.Tensor(x if j == i else arrays[j]) for j in range(len(arrays))]
                return build(args).item()
        worst = max(worst, rel_err(tensors[i].grad, numeric_grad(f, a, h)))
    return worst


@pytest.fixture
def f64():
    with T.default_dtype(np.float64):
        yield


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


# one line per acceptance criterion, filled by test_acceptance and echoed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
