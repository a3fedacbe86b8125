"""Brute-force reference for the QR-route spectral decomposition.

Materializes ``scale * B @ A`` in the ambient d1 x d2 space and runs LAPACK's SVD on it. Nothing
here goes through ``para.linalg`` or ``para.spectral``; tests and the verify command compare
those against this module.
"""

import logging
from typing import Callable

import numpy as np
import numpy.typing as npt

from .adapter.layer import AdapterLayer
from .errors import DimensionError, SizeGuardError

logger = logging.getLogger(__name__)

DEFAULT_MAX_ENTRIES = 16_777_216

Truncation = Callable[[int], npt.NDArray[np.float64]]


def materialize(layer: AdapterLayer, max_entries: int = DEFAULT_MAX_ENTRIES) -> npt.NDArray[np.float64]:
    """Dense effective update ``scale * b @ a``.

    Raises:
        SizeGuardError: ``d1 * d2`` exceeds ``max_entries``
    """
    entries = layer.d1 * layer.d2
    if entries > max_entries:
        raise SizeGuardError(
            f"Refusing to materialize {layer.d1}x{layer.d2} update of {layer.key.module_path} "
            f"({entries} entries > {max_entries})")
    return layer.scale * np.dot(np.asarray(layer.b), np.asarray(layer.a))


def oracle_svd(layer: AdapterLayer, max_entries: int = DEFAULT_MAX_ENTRIES) -> tuple[npt.NDArray[np.float64], Truncation]:
    """Full SVD of the materialized update.

    Returns:
        ``(sigma, truncate)``: all ``min(d1, d2)`` singular values in non-increasing order, and
        a function mapping k to the rank-k truncation ``sum_{i<=k} sigma_i u_i v_i^T``

    Raises:
        SizeGuardError: ``d1 * d2`` exceeds ``max_entries``
    """
    phi = materialize(layer, max_entries)
    u, sigma, vt = np.linalg.svd(phi, full_matrices=False)
    logger.debug(f"Oracle SVD of {layer.key.module_path}: top sigma {sigma[0]:.6g}")

    def truncate(k: int) -> npt.NDArray[np.float64]:
        if k < 0:
            raise ValueError(f"Truncation rank must be non-negative, got {k}")
        k = min(k, len(sigma))
        return (u[:, :k] * sigma[:k]) @ vt[:k, :]

    return sigma, truncate


def frobenius_distance(x: npt.ArrayLike, y: npt.ArrayLike) -> float:
    """``sqrt(sum((x - y) ** 2))``.

    Raises:
        DimensionError: Shapes differ
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"Cannot compare shapes {x.shape} and {y.shape}")
    return float(np.linalg.norm(x - y))
