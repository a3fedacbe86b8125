"""Synth command: write a synthetic adapter with a planted spectrum."""

import logging
from pathlib import Path
from typing import NamedTuple, Sequence

from ..adapter.layer import AdapterSet, LayerType, StorageDtype
from ..adapter.store import save_adapter
from ..adapter.synthetic import SpectrumProfile, generate_synthetic

logger = logging.getLogger(__name__)


class SynthArgs(NamedTuple):
    """Arguments for synth command operations."""
    output_path: Path  # Adapter directory to create
    n_layers: int  # Transformer layers N
    d1: int  # Output dimension of every update
    d2: int  # Input dimension of every update
    rank: int  # LoRA rank of every layer
    profiles: Sequence[SpectrumProfile]  # Planted spectra, cycled over layers
    seed: int  # Seed for the random orthonormal factors
    alpha: float | None  # lora_alpha; None means alpha = rank
    storage_dtype: StorageDtype  # Tensor dtype on disk
    layer_types: Sequence[LayerType]  # Adapted layer types per transformer layer


def do_synth(args: SynthArgs) -> AdapterSet:
    """Generate and save a synthetic adapter; equal seeds give byte-identical directories.

    Raises:
        DimensionError: Invalid sizes
        IoError: Output cannot be written
    """
    adapter = generate_synthetic(
        args.n_layers, (args.d1, args.d2), args.rank, list(args.profiles), args.seed,
        layer_types=args.layer_types, alpha=args.alpha, storage_dtype=args.storage_dtype)
    save_adapter(adapter, args.output_path)
    return adapter
