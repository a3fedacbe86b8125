"""Synthetic adapter sets with planted singular spectra.

Each layer is built as ``U diag(sigma) V^T`` from random orthonormal factors and split
symmetrically, ``B = U sqrt(diag(sigma / scale))`` and ``A = sqrt(diag(sigma / scale)) V^T``, so
the effective update ``scale * B @ A`` has exactly the planted singular values.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import DimensionError
from ..linalg import householder_qr
from .layer import AdapterLayer, AdapterSet, LayerKey, LayerType, StorageDtype

logger = logging.getLogger(__name__)

_MODULE_PATHS = {
    LayerType.Q: 'self_attn.q_proj',
    LayerType.K: 'self_attn.k_proj',
    LayerType.V: 'self_attn.v_proj',
    LayerType.O: 'self_attn.o_proj',
    LayerType.M1: 'mlp.up_proj',
    LayerType.M2: 'mlp.down_proj',
}


class SpectrumProfile(ABC):
    @abstractmethod
    def values(self, rank: int) -> np.ndarray:
        """Planted singular values for a rank-``rank`` layer, non-increasing."""


@dataclass(frozen=True)
class PowerLaw(SpectrumProfile):
    """sigma_i = decay ** (i - 1)."""
    decay: float

    def values(self, rank: int) -> np.ndarray:
        return self.decay ** np.arange(rank, dtype=np.float64)


@dataclass(frozen=True)
class Flat(SpectrumProfile):
    value: float = 1.0

    def values(self, rank: int) -> np.ndarray:
        return np.full(rank, self.value, dtype=np.float64)


@dataclass(frozen=True)
class Bimodal(SpectrumProfile):
    """``big_count`` values at ``big_val`` followed by ``small_val`` for the rest."""
    big_count: int
    big_val: float
    small_val: float

    def values(self, rank: int) -> np.ndarray:
        sigma = np.full(rank, self.small_val, dtype=np.float64)
        sigma[:min(self.big_count, rank)] = self.big_val
        return np.sort(sigma)[::-1].copy()


def parse_profile(text: str) -> SpectrumProfile:
    """Parse ``power_law:<decay>``, ``flat[:<value>]`` or ``bimodal:<count>,<big>,<small>``.

    Raises:
        ValueError: Unknown profile name or malformed parameters
    """
    name, _, params = text.partition(':')
    args = [p for p in params.split(',') if p] if params else []
    try:
        if name == 'power_law' and len(args) == 1:
            return PowerLaw(float(args[0]))
        if name == 'flat' and len(args) <= 1:
            return Flat(*(float(a) for a in args))
        if name == 'bimodal' and len(args) == 3:
            return Bimodal(int(args[0]), float(args[1]), float(args[2]))
    except ValueError:
        pass
    raise ValueError(
        f"Invalid spectrum profile {text!r}; expected power_law:<decay>, flat[:<value>] or "
        "bimodal:<count>,<big>,<small>")


def synthetic_module_path(layer_index: int, layer_type: LayerType) -> str:
    return f"base_model.model.model.layers.{layer_index - 1}.{_MODULE_PATHS[layer_type]}"


def generate_synthetic(
        n_layers: int,
        dims: tuple[int, int],
        rank: int,
        spectrum_profile: SpectrumProfile | Sequence[SpectrumProfile],
        seed: int,
        *,
        layer_types: Sequence[LayerType] = tuple(LayerType),
        alpha: float | None = None,
        storage_dtype: StorageDtype = StorageDtype.F32) -> AdapterSet:
    """Generate an adapter set whose layers carry a planted singular spectrum.

    Args:
        n_layers: Number of transformer layers N
        dims: (d1, d2) shape of every effective update
        rank: LoRA rank r of every layer
        spectrum_profile: Profile applied to every layer, or a sequence cycled over layers in
            canonical order
        seed: Seed for the orthonormal factors; equal seeds give bit-identical sets
        layer_types: Layer types adapted in every transformer layer
        alpha: lora_alpha; defaults to ``rank`` (scale 1)
        storage_dtype: dtype recorded for writing the set

    Raises:
        DimensionError: ``rank`` exceeds ``min(d1, d2)`` or a size is not positive
    """
    d1, d2 = dims
    if n_layers < 1 or rank < 1 or d1 < 1 or d2 < 1:
        raise DimensionError(f"Sizes must be positive: n_layers={n_layers}, dims={dims}, rank={rank}")
    if rank > min(d1, d2):
        raise DimensionError(f"rank {rank} exceeds min(d1, d2) = {min(d1, d2)}")
    if not layer_types:
        raise DimensionError("At least one layer type is required")

    profiles = [spectrum_profile] if isinstance(spectrum_profile, SpectrumProfile) else list(spectrum_profile)
    alpha = float(rank) if alpha is None else float(alpha)
    scale = alpha / rank
    rng = np.random.default_rng(seed)

    layers = []
    slot = 0
    for layer_index in range(1, n_layers + 1):
        for layer_type in sorted(layer_types, key=lambda t: t.order):
            sigma = profiles[slot % len(profiles)].values(rank)
            slot += 1
            u = householder_qr(rng.standard_normal((d1, rank))).q
            v = householder_qr(rng.standard_normal((d2, rank))).q
            root = np.sqrt(sigma / scale)
            layers.append(AdapterLayer(
                key=LayerKey(layer_index, layer_type, synthetic_module_path(layer_index, layer_type)),
                b=u * root,
                a=root[:, np.newaxis] * v.T,
                scale=scale,
                storage_dtype=storage_dtype,
            ))

    logger.info(f"Generated {len(layers)} synthetic layers ({d1}x{d2}, rank {rank}, seed {seed})")
    return AdapterSet(
        layers=tuple(layers),
        alpha=alpha,
        init_rank=rank,
        config={'peft_type': 'LORA', 'task_type': None},
    )
