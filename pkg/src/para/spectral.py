"""Per-layer SVD of ``scale * B @ A`` through QR factors of the LoRA pair, and global pooling of
the resulting singular values.

The update is never materialized: with ``B = Q_B R_B`` and ``A^T = Q_A R_A`` the product equals
``Q_B (R_B R_A^T) Q_A^T``, so the SVD of the r x r interaction matrix ``M = R_B R_A^T`` gives
the singular values directly and the singular vectors as ``Q_B U~`` and ``Q_A V~``. Cost is
O((d1 + d2) r^2 + r^3).
"""

import logging
from dataclasses import dataclass
from typing import Iterable, Iterator, NamedTuple

import numpy as np
import numpy.typing as npt

from .adapter.layer import AdapterLayer, LayerKey
from .errors import DomainError, EmptyInputError
from .linalg import Matrix, householder_qr, matmul, svd_square

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SpectralDecomposition:
    """Compact SVD ``u diag(sigma) v^T`` of one layer's effective update.

    ``sigma`` holds effective singular values (the layer scale is folded in) in non-increasing
    order; ``u`` is d1 x r and ``v`` is d2 x r, both with orthonormal columns.
    """
    key: LayerKey
    u: Matrix
    sigma: npt.NDArray[np.float64]
    v: Matrix
    original_rank: int

    def __post_init__(self):
        for array in (self.u, self.sigma, self.v):
            array.setflags(write=False)

    @property
    def d1(self) -> int:
        return self.u.shape[0]

    @property
    def d2(self) -> int:
        return self.v.shape[0]

    @property
    def energy(self) -> float:
        """Spectral energy, equal to the squared Frobenius norm of the update."""
        return float(np.sum(self.sigma ** 2))

    def reconstruct(self) -> Matrix:
        """Materialize ``u diag(sigma) v^T`` (d1 x d2)."""
        return (self.u * self.sigma) @ self.v.T


class SpectrumEntry(NamedTuple):
    value: float
    key: LayerKey
    position: int


@dataclass(frozen=True, eq=False)
class GlobalSpectrum:
    """Pooled singular values of every layer, sorted non-increasing.

    Ties are broken by (layer_index, layer type order, module path, position), so the order is
    total and reproducible. ``owners[i]`` indexes ``keys`` for the i-th pooled value.
    """
    keys: tuple[LayerKey, ...]
    ranks: tuple[int, ...]
    values: npt.NDArray[np.float64]
    owners: npt.NDArray[np.intp]
    positions: npt.NDArray[np.intp]

    def __len__(self) -> int:
        return len(self.values)

    def __iter__(self) -> Iterator[SpectrumEntry]:
        for value, owner, position in zip(self.values, self.owners, self.positions):
            yield SpectrumEntry(float(value), self.keys[owner], int(position))

    @property
    def budget(self) -> int:
        """B_init: total number of pooled values."""
        return len(self.values)

    @property
    def total_energy(self) -> float:
        return float(np.sum(self.values ** 2))


def decompose_layer(layer: AdapterLayer) -> SpectralDecomposition:
    """Compact SVD of ``layer.scale * layer.b @ layer.a`` via QR of B and A^T.

    Raises:
        DimensionError: The rank exceeds d1 or d2 (QR needs tall-thin inputs)
        DomainError: The factors are too large for float64 arithmetic
    """
    try:
        with np.errstate(over='ignore', invalid='ignore'):
            qr_b = householder_qr(layer.b)
            qr_a = householder_qr(layer.a.T)
            interaction = matmul(qr_b.r_upper, qr_a.r_upper.T)
            svd = svd_square(interaction)

            u = matmul(qr_b.q, svd.u)
            v = matmul(qr_a.q, svd.v)
            sigma = svd.sigma * abs(layer.scale)
    except DomainError as e:
        raise DomainError(f"{layer.key.module_path}: decomposition overflowed: {e}") from e
    if not np.isfinite(sigma).all():
        raise DomainError(f"{layer.key.module_path}: singular values overflow float64")
    if layer.scale < 0.0:
        u = -u

    logger.debug(f"Decomposed {layer.key.module_path}: rank {layer.rank}, top sigma {sigma[0]:.6g}")
    return SpectralDecomposition(layer.key, u, sigma, v, layer.rank)


def pool_spectrum(decomps: Iterable[SpectralDecomposition]) -> GlobalSpectrum:
    """Collect every layer's singular values into one deterministically sorted spectrum.

    Raises:
        EmptyInputError: No decompositions were given
    """
    ordered = sorted(decomps, key=lambda d: d.key.sort_key)
    if not ordered:
        raise EmptyInputError("Cannot pool the spectrum of an empty adapter set")

    values = np.concatenate([d.sigma for d in ordered])
    owners = np.concatenate([np.full(len(d.sigma), i, dtype=np.intp) for i, d in enumerate(ordered)])
    positions = np.concatenate([np.arange(len(d.sigma), dtype=np.intp) for d in ordered])

    # np.lexsort treats its last key as primary.
    order = np.lexsort((positions, owners, -values))
    spectrum = GlobalSpectrum(
        keys=tuple(d.key for d in ordered),
        ranks=tuple(d.original_rank for d in ordered),
        values=values[order],
        owners=owners[order],
        positions=positions[order],
    )
    for array in (spectrum.values, spectrum.owners, spectrum.positions):
        array.setflags(write=False)
    return spectrum
