"""Diagonal-plus-low-rank covariance algebra.

A covariance ``Sigma = diag(lam) + Phi Phi^T`` is inverted by starting from
``diag(1/lam)`` and folding in one column of ``Phi`` at a time with the
Sherman-Morrison identity; the log-determinant accumulates the matching
determinant-lemma terms.  The recursion is written with autodiff primitives,
so both outputs are differentiable in ``lam`` and ``Phi``, and it is batched
over any leading dimensions (e.g. one covariance per class).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .tensor import Tensor

DIAG_FLOOR = 0.1


class CovarianceError(ArithmeticError):
    """A covariance invariant was violated (non-positive diagonal or pivot)."""


def _check_inputs(diag: Tensor, factors: Tensor) -> None:
    if factors.ndim != diag.ndim + 1 or factors.shape[:-1] != diag.shape:
        raise tt.ShapeError(
            f"low-rank covariance: diag shape {diag.shape} incompatible with factors {factors.shape}"
        )
    if np.any(diag.data <= 0):
        raise CovarianceError(f"diagonal entries must be positive, min={diag.data.min():.3g}")


def inverse_and_logdet(diag, factors) -> tuple[Tensor, Tensor]:
    """Return ``(Sigma^-1, log|Sigma|)`` for ``Sigma = diag(diag) + factors factors^T``.

    ``diag`` has shape ``(..., d)`` and ``factors`` shape ``(..., d, r)``.
    Columns of ``factors`` are folded in left to right.
    """
    diag, factors = tt.as_tensor(diag), tt.as_tensor(factors)
    _check_inputs(diag, factors)
    d = diag.shape[-1]
    eye = np.eye(d)
    inv_diag = 1.0 / diag
    precision = tt.reshape(inv_diag, inv_diag.shape + (1,)) * eye
    logdet = tt.sum(tt.log(diag), axis=-1)
    for j in range(factors.shape[-1]):
        phi = factors[..., j : j + 1]  # (..., d, 1)
        u = precision @ phi  # (..., d, 1)
        denom = 1.0 + tt.sum(phi * u, axis=(-2, -1))  # (...)
        if np.any(denom.data <= 0) or not np.all(np.isfinite(denom.data)):
            raise CovarianceError("Sherman-Morrison denominator is not positive")
        outer = u @ tt.transpose(u)
        precision = precision - outer / tt.reshape(denom, denom.shape + (1, 1))
        logdet = logdet + tt.log(denom)
    return precision, logdet


def recursive_inverse(diag, factors) -> Tensor:
    return inverse_and_logdet(diag, factors)[0]


def recursive_logdet(diag, factors) -> Tensor:
    return inverse_and_logdet(diag, factors)[1]


def mahalanobis_sq(precision, delta):
    """``delta^T P delta`` batched over leading dims of ``delta``.

    ``precision`` is ``(..., d, d)`` and ``delta`` is ``(..., d)``; leading
    dimensions broadcast.  Passing a :class:`LowRankCovariance` instead
    evaluates a single quadratic form and returns a float.
    """
    if isinstance(precision, LowRankCovariance):
        return precision.mahalanobis_sq(delta)
    precision, delta = tt.as_tensor(precision), tt.as_tensor(delta)
    if precision.shape[-1] != delta.shape[-1]:
        raise tt.ShapeError(
            f"mahalanobis_sq: precision {precision.shape} and delta {delta.shape} disagree"
        )
    row = tt.reshape(delta, delta.shape[:-1] + (1, delta.shape[-1]))
    projected = tt.reshape(row @ precision, delta.shape[:-1] + (delta.shape[-1],))
    return tt.sum(projected * delta, axis=-1)


@dataclass(frozen=True)
class LowRankCovariance:
    """A concrete ``diag(diag) + factors factors^T`` with cached inverse and logdet."""

    diag: np.ndarray
    factors: np.ndarray
    inverse: np.ndarray
    logdet: float

    @property
    def dim(self) -> int:
        return self.diag.shape[0]

    @property
    def rank(self) -> int:
        return self.factors.shape[1]

    @property
    def dense(self) -> np.ndarray:
        return np.diag(self.diag) + self.factors @ self.factors.T

    def mahalanobis_sq(self, delta) -> float:
        delta = np.asarray(delta, dtype=np.float64)
        if delta.shape != (self.dim,):
            raise tt.ShapeError(f"mahalanobis_sq: expected delta of length {self.dim}, got {delta.shape}")
        return float(delta @ self.inverse @ delta)


def build_covariance(diag, factors=None) -> LowRankCovariance:
    diag = np.asarray(diag, dtype=np.float64)
    if factors is None:
        factors = np.zeros((diag.shape[0], 0))
    factors = np.asarray(factors, dtype=np.float64)
    if factors.ndim == 1:
        factors = factors[:, None]
    if factors.size == 0:
        factors = factors.reshape(diag.shape[0], 0)
    precision, logdet = inverse_and_logdet(diag, factors)
    return LowRankCovariance(diag.copy(), factors.copy(), precision.data, float(logdet.data))


# ---------------------------------------------------------------------------
# symmetric eigendecomposition (cyclic Jacobi)
# ---------------------------------------------------------------------------


def symmetric_eigen(
    matrix, tol: float = 1e-12, max_sweeps: int = 100, sym_tol: float = 1e-10
) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decompose a symmetric matrix with cyclic Jacobi rotations.

    Returns eigenvalues in descending order and the matching orthonormal
    eigenvectors as columns.
    """
    a = np.array(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"symmetric_eigen: expected a square matrix, got shape {a.shape}")
    scale = max(1.0, np.abs(a).max(initial=0.0))
    if np.abs(a - a.T).max(initial=0.0) > sym_tol * scale:
        raise ValueError("symmetric_eigen: matrix is not symmetric")
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    q = np.eye(n)
    off_mask = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(a[off_mask] ** 2))
        if off < tol * scale:
            break
        for p in range(n - 1):
            for r in range(p + 1, n):
                apr = a[p, r]
                if abs(apr) < 1e-300:
                    continue
                theta = (a[r, r] - a[p, p]) / (2.0 * apr)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                ar = a[:, r].copy()
                a[:, p] = c * ap - s * ar
                a[:, r] = s * ap + c * ar
                ap = a[p, :].copy()
                ar = a[r, :].copy()
                a[p, :] = c * ap - s * ar
                a[r, :] = s * ap + c * ar
                a[p, r] = a[r, p] = 0.0
                qp = q[:, p].copy()
                qr = q[:, r].copy()
                q[:, p] = c * qp - s * qr
                q[:, r] = s * qp + c * qr
    values = np.diag(a).copy()
    order = np.argsort(-values, kind="stable")
    return values[order], q[:, order]
