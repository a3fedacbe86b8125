"""Phase-1 cache: an adapter set together with its per-layer decompositions and pooled spectrum.

Decomposition is the expensive step; once cached, any number of keep plans (children) are
derived from it without touching the parent factors again.
"""

import logging
from dataclasses import dataclass

from .adapter.layer import AdapterSet
from .adapter.store import fingerprint
from .allocation import KeepPlan, Policy, make_plan
from .reconstruct import CompressedLayer, assemble_report, check_plan_covers
from .report.compression import CompressionReport
from .spectral import GlobalSpectrum, SpectralDecomposition, pool_spectrum
from .utils.processor import Processor

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class DecomposedAdapter:
    adapter: AdapterSet
    decomps: tuple[SpectralDecomposition, ...]
    spectrum: GlobalSpectrum
    fingerprint: str

    def plan(self, policy: Policy) -> KeepPlan:
        return make_plan(policy, list(self.decomps), self.spectrum)

    async def compress(self, processor: Processor, policy: Policy) -> tuple[KeepPlan, list[CompressedLayer], CompressionReport]:
        """Plan and reconstruct every layer on the processor; layers come back in canonical order.

        Raises:
            DomainError: Policy value outside its range
            DegenerateError: Energy policy on an all-zero spectrum
        """
        plan = self.plan(policy)
        check_plan_covers(self.adapter, plan)
        layers = await processor.reconstruct_all((decomp, plan.keep[decomp.key]) for decomp in self.decomps)
        report = assemble_report(self.adapter, plan, layers, parent_fingerprint=self.fingerprint)
        return plan, layers, report


async def decompose_adapter(processor: Processor, adapter: AdapterSet) -> DecomposedAdapter:
    """Decompose every layer of ``adapter`` once and pool the spectrum.

    Raises:
        EmptyInputError: The adapter has no layers
    """
    logger.info(f"Decomposing {len(adapter)} layers with concurrency {processor.concurrency}")
    decomps = await processor.decompose_all(adapter.layers)
    spectrum = pool_spectrum(decomps)
    logger.info(f"Pooled {spectrum.budget} singular values, total energy {spectrum.total_energy:.6g}")
    return DecomposedAdapter(adapter, tuple(decomps), spectrum, fingerprint(adapter))
