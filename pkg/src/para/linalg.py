"""Dense 64-bit matrix kernels: Householder QR for tall-thin matrices and one-sided Jacobi SVD
for small square matrices.

All kernels are pure functions of their inputs. Accuracy contracts:

- ``householder_qr``: ``qᵀq = I`` and ``q @ r_upper = m`` to about 1e-10; entries below the
  diagonal of ``r_upper`` are literal zeros and its diagonal is non-negative.
- ``svd_square``: singular values are non-negative and non-increasing, ``u`` and ``v`` are
  orthogonal and ``u @ diag(sigma) @ v.T`` reproduces the input to about 1e-10.
"""

import logging
import math
from typing import Any, NamedTuple

import numpy as np
import numpy.typing as npt

from .errors import DimensionError, DomainError

logger = logging.getLogger(__name__)

Matrix = npt.NDArray[np.float64]

_EPS = float(np.finfo(np.float64).eps)
_JACOBI_MAX_SWEEPS = 80


class QrFactors(NamedTuple):
    q: Matrix  # m x n, orthonormal columns
    r_upper: Matrix  # n x n, upper triangular


class SvdFactors(NamedTuple):
    u: Matrix
    sigma: npt.NDArray[np.float64]
    v: Matrix


def as_matrix(data: Any, *, name: str = "matrix") -> Matrix:
    """Coerce ``data`` to a C-contiguous 2-D float64 array with finite entries.

    Raises:
        DimensionError: Input is not 2-D or has an empty dimension
        DomainError: Input is not numeric or contains NaN or Inf
    """
    try:
        m = np.ascontiguousarray(data, dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise DomainError(f"{name} is not a numeric array: {e}") from e
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise DimensionError(f"{name} must have positive dimensions, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise DomainError(f"{name} contains non-finite entries")
    return m


def matmul(a: Any, b: Any) -> Matrix:
    """Matrix product with shape checking.

    Raises:
        DimensionError: ``a.cols != b.rows``
    """
    a = as_matrix(a, name="left operand")
    b = as_matrix(b, name="right operand")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"Cannot multiply {a.shape} by {b.shape}")
    return a @ b


def householder_qr(m: Any) -> QrFactors:
    """Thin QR decomposition of a matrix with ``rows >= cols`` via Householder reflections.

    Reflectors are accumulated backwards onto the first ``cols`` columns of the identity, so
    ``q`` stays orthonormal even when some columns of ``m`` are zero (those reflections are
    skipped and the matching diagonal entry of ``r_upper`` is zero).

    Raises:
        DimensionError: ``rows < cols``; callers transpose first
    """
    a = as_matrix(m)
    rows, cols = a.shape
    if rows < cols:
        raise DimensionError(f"QR needs rows >= cols, got {rows}x{cols}; transpose first")

    r = a.copy()
    reflectors: list[Matrix | None] = []
    for j in range(cols):
        x = r[j:, j]
        norm_x = float(np.linalg.norm(x))
        if norm_x == 0.0:
            reflectors.append(None)
            continue
        v = x.copy()
        v[0] += math.copysign(norm_x, v[0])
        v /= np.linalg.norm(v)
        r[j:, j:] -= 2.0 * np.outer(v, v @ r[j:, j:])
        reflectors.append(v)

    q = np.eye(rows, cols)
    for j in range(cols - 1, -1, -1):
        v = reflectors[j]
        if v is None:
            continue
        q[j:, :] -= 2.0 * np.outer(v, v @ q[j:, :])

    # Fix signs so the diagonal of r_upper is non-negative; Q S S R = Q R.
    signs = np.where(np.diag(r[:cols, :]) < 0.0, -1.0, 1.0)
    r_upper = np.triu(r[:cols, :] * signs[:, np.newaxis])
    return QrFactors(q * signs, r_upper)


def svd_square(m: Any) -> SvdFactors:
    """Full SVD of a small square matrix by one-sided (Hestenes) Jacobi rotations.

    Columns of a working copy are rotated pairwise until all pairs are orthogonal to machine
    precision; their norms are the singular values. Columns of ``u`` belonging to exactly null
    directions are completed to an orthonormal basis.

    Raises:
        DimensionError: Input is not square
    """
    a = as_matrix(m)
    n, cols = a.shape
    if n != cols:
        raise DimensionError(f"svd_square needs a square matrix, got {n}x{cols}")

    g = a.copy()
    v = np.eye(n)
    tolerance = n * _EPS

    for sweep in range(_JACOBI_MAX_SWEEPS):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                gp = g[:, p]
                gq = g[:, q]
                alpha = float(gp @ gp)
                beta = float(gq @ gq)
                gamma = float(gp @ gq)
                if gamma == 0.0 or abs(gamma) <= tolerance * math.sqrt(alpha) * math.sqrt(beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                _rotate_columns(g, p, q, c, s)
                _rotate_columns(v, p, q, c, s)
        if not rotated:
            logger.debug(f"Jacobi SVD of order {n} converged after {sweep + 1} sweeps")
            break
    else:
        logger.warning(f"Jacobi SVD of order {n} did not converge in {_JACOBI_MAX_SWEEPS} sweeps")

    sigma = np.linalg.norm(g, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    g = g[:, order]
    v = v[:, order]

    # Columns whose norm is at rounding level carry no reliable direction.
    cutoff = tolerance * sigma[0]
    live = int(np.count_nonzero(sigma > cutoff))
    u = g[:, :live] / sigma[:live]
    if live < n:
        u = _orthonormal_completion(u, n)
    return SvdFactors(u, sigma, v)


def _rotate_columns(x: Matrix, p: int, q: int, c: float, s: float) -> None:
    xp = x[:, p].copy()
    xq = x[:, q]
    x[:, p] = c * xp - s * xq
    x[:, q] = s * xp + c * xq


def _orthonormal_completion(basis: Matrix, n: int) -> Matrix:
    """Extend orthonormal columns ``basis`` (n x k) to an n x n orthogonal matrix.

    At each step the identity column with the largest residual against the current basis is
    orthogonalized twice and appended; that residual is at least sqrt((n - k) / n).
    """
    b = basis
    identity = np.eye(n)
    while b.shape[1] < n:
        residual = identity - b @ b.T
        j = int(np.argmax(np.linalg.norm(residual, axis=0)))
        w = residual[:, j]
        w = w - b @ (b.T @ w)
        w /= np.linalg.norm(w)
        b = np.column_stack([b, w])
    return b
