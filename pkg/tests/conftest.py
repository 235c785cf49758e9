import numpy as np
import pytest

from lfsr.tensor import Tensor, backward

ACCEPTANCE = pytest.StashKey[list]()  # verdict lines from test_acceptance.py


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


def numeric_grad(f, arrays, h=1e-5):
    """Central differences of scalar ``f(*arrays)`` w.r.t. every array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + h
            fp = f(*arrays)
            a[idx] = old - h
            fm = f(*arrays)
            a[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


def check_grad(op, arrays, seed=0, h=1e-5):
    """Compare autograd against finite differences for sum(op(*tensors) * R)."""
    rng = np.random.default_rng(seed)
    probe = [None]

    def scalar(*arrs):
        out = op(*[Tensor(a) for a in arrs]).data
        if probe[0] is None:
            probe[0] = rng.normal(size=out.shape)
        return float(np.sum(out * probe[0]))

    scalar(*arrays)
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*tensors)
    loss = (out * Tensor(probe[0]))
    from lfsr.tensor import sum as tsum
    backward(tsum(loss))
    num = numeric_grad(scalar, [a.copy() for a in arrays], h=h)
    return max(rel_err(t.grad, n) for t, n in zip(tensors, num))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
