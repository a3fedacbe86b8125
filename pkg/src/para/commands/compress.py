"""Compress command: load, decompose, plan, reconstruct and write one child adapter."""

import logging
from pathlib import Path
from typing import NamedTuple

from ..adapter.layer import LayerTypeTable
from ..adapter.store import load_adapter, save_adapter
from ..allocation import Policy
from ..cache import DecomposedAdapter, decompose_adapter
from ..reconstruct import compressed_adapter_set
from ..report.compression import CompressionReport
from ..utils.processor import Processor

logger = logging.getLogger(__name__)


class CompressArgs(NamedTuple):
    """Arguments for compress command operations."""
    processor: Processor  # Worker pool for per-layer decomposition and reconstruction
    input_path: Path  # Parent adapter directory
    output_path: Path  # Directory receiving the child adapter and its report
    policy: Policy  # Validated selection policy
    report_format: str  # 'json' or 'csv'
    layer_types: LayerTypeTable  # Module path to layer type mapping


async def write_child(
        processor: Processor,
        decomposed: DecomposedAdapter,
        policy: Policy,
        output_path: Path,
        report_format: str) -> CompressionReport:
    """Compress a cached parent with ``policy`` and write adapter files plus report.

    Raises:
        EmptySetError: Every layer was pruned to rank 0
        IoError: Output cannot be written
    """
    _, layers, report = await decomposed.compress(processor, policy)
    child = compressed_adapter_set(decomposed.adapter, layers)
    save_adapter(child, output_path)
    report.write(output_path, report_format)
    logger.info(f"Wrote {policy} child to {output_path}")
    return report


async def do_compress(args: CompressArgs) -> CompressionReport:
    """Run the full pipeline for one policy value.

    Raises:
        FormatError: The parent cannot be loaded
        EmptySetError: Every layer was pruned to rank 0
        IoError: Output cannot be written
    """
    logger.info(f"Compressing {args.input_path} with {args.policy}")
    adapter = load_adapter(args.input_path, args.layer_types)
    decomposed = await decompose_adapter(args.processor, adapter)
    return await write_child(args.processor, decomposed, args.policy, args.output_path, args.report_format)
