"""Analyze command: pooled spectrum, histogram, energy curve and sweeps of one adapter."""

import logging
from pathlib import Path
from typing import NamedTuple, Sequence

from ..adapter.layer import LayerTypeTable
from ..adapter.store import load_adapter
from ..cache import decompose_adapter
from ..report.analysis import SpectrumAnalysis, analyze_spectrum
from ..utils.processor import Processor

logger = logging.getLogger(__name__)


class AnalyzeArgs(NamedTuple):
    """Arguments for analyze command operations."""
    processor: Processor  # Worker pool for per-layer decomposition
    input_path: Path  # Adapter directory to analyze
    output_path: Path  # Directory receiving the analysis files
    bins: int  # Histogram bin count
    epsilons: Sequence[float]  # Energy ratios of the epsilon sweep
    layer_types: LayerTypeTable  # Module path to layer type mapping


async def do_analyze(args: AnalyzeArgs) -> SpectrumAnalysis:
    """Decompose every layer and write spectrum.json plus the CSV data products.

    Raises:
        FormatError: The adapter cannot be loaded
        IoError: Output cannot be written
    """
    logger.info(f"Analyzing {args.input_path}")
    adapter = load_adapter(args.input_path, args.layer_types)
    decomposed = await decompose_adapter(args.processor, adapter)
    analysis = analyze_spectrum(decomposed.spectrum, decomposed.decomps, bins=args.bins, epsilons=args.epsilons)
    analysis.write(args.output_path)
    return analysis
