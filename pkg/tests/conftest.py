import pathlib
import sys

import numpy as np
import pytest

sys.path.insert(0, str(pathlib.Path(__file__).parent.parent / "src"))

from smokediff import tensor as T  # noqa: E402


def rel_err(a: float, b: float, floor: float = 1e-3) -> float:
    """Relative error with an absolute floor: entries smaller than the floor
    are effectively compared absolutely at tol*floor."""
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_gradients(make_loss, tensors, h: float = 1e-5, tol: float = 1e-4) -> float:
    """Central-finite-difference check of every element of every tensor.

    make_loss() must rebuild the scalar loss from the (mutated) tensors.
    Returns the max relative error; asserts it is below tol.
    """
    T.reset_tape()
    loss = make_loss()
    T.backward(loss)
    grads = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    for t in tensors:
        t.zero_grad()
    worst = 0.0
    for t, g in zip(tensors, grads):
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with T.no_grad():
                lp = make_loss().item()
            flat[i] = orig - h
            with T.no_grad():
                lm = make_loss().item()
            flat[i] = orig
            fd = (lp - lm) / (2.0 * h)
            worst = max(worst, rel_err(gflat[i], fd))
    assert worst < tol, f"gradient mismatch: max rel err {worst:.3e} >= {tol}"
    return worst


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)
