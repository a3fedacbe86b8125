"""Pruning and reconstruction of compacted LoRA factors from a keep plan."""

import logging
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np
import numpy.typing as npt

from .adapter.layer import AdapterLayer, AdapterSet, LayerKey
from .allocation import KeepPlan
from .errors import MaskLengthError, PlanMismatchError
from .linalg import Matrix
from .report.compression import CompressionReport, LayerSummary
from .spectral import SpectralDecomposition, decompose_layer

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class CompressedLayer:
    """Compacted factors of one layer.

    ``b_hat @ a_hat`` is the best rank-``new_rank`` approximation of the layer's effective
    update; both factors are ``None`` when every position was dropped. ``frobenius_error`` is
    ``sqrt(sum of dropped sigma**2)``.
    """
    key: LayerKey
    b_hat: Matrix | None
    a_hat: Matrix | None
    new_rank: int
    frobenius_error: float
    original_rank: int
    d1: int
    d2: int
    retained_energy: float
    pruned_energy: float

    @property
    def parameter_count(self) -> int:
        return self.new_rank * (self.d1 + self.d2)

    @property
    def original_parameter_count(self) -> int:
        return self.original_rank * (self.d1 + self.d2)

    def summary(self) -> LayerSummary:
        total = self.retained_energy + self.pruned_energy
        return LayerSummary(
            module_path=self.key.module_path,
            layer_index=self.key.layer_index,
            layer_type=self.key.layer_type,
            original_rank=self.original_rank,
            new_rank=self.new_rank,
            d1=self.d1,
            d2=self.d2,
            energy=total,
            retained_energy=self.retained_energy / total if total > 0.0 else 1.0,
            frobenius_error=self.frobenius_error,
        )


def prune_and_reconstruct(decomp: SpectralDecomposition, mask: npt.ArrayLike) -> CompressedLayer:
    """Drop the masked-out singular triplets and split the rest symmetrically.

    ``b_hat = u_kept sqrt(diag(sigma_kept))`` and ``a_hat = sqrt(diag(sigma_kept)) v_kept^T``, so
    column i of b_hat and row i of a_hat both have norm ``sqrt(sigma_i)``.

    Raises:
        MaskLengthError: ``len(mask) != decomp.original_rank``
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 1 or mask.shape[0] != decomp.original_rank:
        raise MaskLengthError(
            f"Mask of shape {mask.shape} does not match rank {decomp.original_rank} of {decomp.key.module_path}")

    energies = decomp.sigma ** 2
    pruned_energy = float(np.sum(energies[~mask]))
    retained_energy = float(np.sum(energies[mask]))
    new_rank = int(np.count_nonzero(mask))

    b_hat = a_hat = None
    if new_rank > 0:
        root = np.sqrt(decomp.sigma[mask])
        b_hat = decomp.u[:, mask] * root
        a_hat = root[:, np.newaxis] * decomp.v[:, mask].T

    logger.debug(f"{decomp.key.module_path}: rank {decomp.original_rank} -> {new_rank}")
    return CompressedLayer(
        key=decomp.key,
        b_hat=b_hat,
        a_hat=a_hat,
        new_rank=new_rank,
        frobenius_error=math.sqrt(pruned_energy),
        original_rank=decomp.original_rank,
        d1=decomp.d1,
        d2=decomp.d2,
        retained_energy=retained_energy,
        pruned_energy=pruned_energy,
    )


def compress(
        adapter: AdapterSet,
        plan: KeepPlan,
        decomps: Iterable[SpectralDecomposition] | None = None,
        *,
        parent_fingerprint: str | None = None) -> tuple[list[CompressedLayer], CompressionReport]:
    """Apply a keep plan to every layer of ``adapter`` and assemble the report.

    Args:
        adapter: Parent adapter set
        plan: Keep plan covering exactly the layers of ``adapter``
        decomps: Cached decompositions of ``adapter``; computed here when omitted
        parent_fingerprint: Recorded in the report when given

    Raises:
        PlanMismatchError: The plan's layers differ from the adapter's
    """
    check_plan_covers(adapter, plan)

    by_key = {d.key: d for d in decomps} if decomps is not None else {}
    layers = []
    for layer in adapter.layers:
        decomp = by_key.get(layer.key)
        if decomp is None:
            decomp = decompose_layer(layer)
        layers.append(prune_and_reconstruct(decomp, plan.keep[layer.key]))

    return layers, assemble_report(adapter, plan, layers, parent_fingerprint=parent_fingerprint)


def check_plan_covers(adapter: AdapterSet, plan: KeepPlan) -> None:
    """Raises PlanMismatchError unless the plan has exactly one mask per adapter layer."""
    expected = set(adapter.keys)
    planned = set(plan.keep)
    if expected != planned:
        missing = sorted(str(k) for k in expected - planned)
        extra = sorted(str(k) for k in planned - expected)
        raise PlanMismatchError(f"Keep plan does not match the adapter set; missing {missing}, unexpected {extra}")


def assemble_report(
        adapter: AdapterSet,
        plan: KeepPlan,
        layers: list[CompressedLayer],
        *,
        parent_fingerprint: str | None = None) -> CompressionReport:
    """Reduce compressed layers (in canonical order) into a CompressionReport."""
    report = CompressionReport.build(
        [c.summary() for c in layers],
        threshold=plan.threshold_or_none,
        policy=str(plan.policy) if plan.policy is not None else None,
        n_layers=adapter.n_layers,
        skipped_tensors=list(adapter.skipped_tensors),
        parent_fingerprint=parent_fingerprint,
    )
    logger.info(
        f"Compressed {len(layers)} layers: kept {report.totals.kept_total} of {report.totals.b_init} "
        f"(reduction {report.totals.reduction_fraction:.4f})")
    return report


def compressed_adapter_set(parent: AdapterSet, layers: Iterable[CompressedLayer]) -> AdapterSet:
    """Build a writable adapter set from compressed layers.

    Factors carry the effective update, so each layer gets scale 1 (alpha equal to its new rank,
    or its square root under rsLoRA). Layers pruned to rank 0 are left out; storage dtypes follow
    the parent.
    """
    kept = []
    for compressed in layers:
        if compressed.new_rank == 0:
            continue
        source = parent.layer(compressed.key)
        kept.append(AdapterLayer(
            key=compressed.key,
            b=compressed.b_hat,
            a=compressed.a_hat,
            scale=1.0,
            storage_dtype=source.storage_dtype,
        ))

    return AdapterSet(
        layers=tuple(kept),
        alpha=parent.alpha,
        init_rank=max((layer.rank for layer in kept), default=None),
        use_rslora=parent.use_rslora,
        config=parent.config,
    )
