import numpy as np
import pytest

from skelact.numerics import Tape, Tensor


def fd_gradient(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Independent central-difference gradient of a scalar function of one
    numpy array, element by element.  Used as the oracle for tape adjoints."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        lp = f()
        flat[i] = orig - h
        lm = f()
        flat[i] = orig
        gflat[i] = (lp - lm) / (2.0 * h)
    return grad


def tape_gradient(op, inputs: list[Tensor]) -> list[np.ndarray]:
    """Run op under a tape, reduce with sum-of-values, return input grads."""
    with Tape() as tape:
        for t in inputs:
            tape.watch(t)
        out = op()
        total = _sum_all(out)
        tape.backward(total)
        return [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in inputs]


def _sum_all(t: Tensor) -> Tensor:
    from skelact.numerics import ops

    if t.ndim == 0:
        return t
    s = ops.mean(t, axis=tuple(range(t.ndim)))
    return ops.scale(s, float(t.size))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
