import numpy as np
import pytest


def central_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences (x is perturbed in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        g[i] = (up - down) / (2 * h)
    return grad


def gauss_jordan_inverse(a: np.ndarray) -> np.ndarray:
    """Dense inverse by Gauss-Jordan elimination with partial pivoting."""
    n = a.shape[0]
    aug = np.hstack([np.array(a, dtype=np.float64), np.eye(n)])
    for col in range(n):
        pivot = col + int(np.argmax(np.abs(aug[col:, col])))
        aug[[col, pivot]] = aug[[pivot, col]]
        aug[col] /= aug[col, col]
        for row in range(n):
            if row != col:
                aug[row] -= aug[row, col] * aug[col]
    return aug[:, n:]


def lu_logdet(a: np.ndarray) -> float:
    """log|det a| from a Doolittle LU factorization with partial pivoting."""
    u = np.array(a, dtype=np.float64)
    n = u.shape[0]
    total = 0.0
    for col in range(n):
        pivot = col + int(np.argmax(np.abs(u[col:, col])))
        u[[col, pivot]] = u[[pivot, col]]
        total += np.log(abs(u[col, col]))
        for row in range(col + 1, n):
            u[row, col:] -= (u[row, col] / u[col, col]) * u[col, col:]
    return total


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
