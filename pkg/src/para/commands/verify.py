"""Verify command: check a compressed child against its parent with the dense oracle.

For every parent layer the child's effective update is materialized (zero when the child
dropped the layer) and the measured Frobenius distance is compared with the error the child's
report claims.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np

from ..adapter.layer import LayerTypeTable
from ..adapter.store import fingerprint, load_adapter
from ..errors import IoError, VerificationError
from ..oracle import frobenius_distance, materialize
from ..report.compression import read_claimed_errors

logger = logging.getLogger(__name__)

VERIFICATION_JSON_NAME = 'verification.json'

_ABSOLUTE_SLACK = 1e-12


class VerifyArgs(NamedTuple):
    """Arguments for verify command operations."""
    parent_path: Path  # Parent adapter directory
    child_path: Path  # Compressed child directory (adapter files plus report)
    output_path: Path | None  # Directory for verification.json; None to skip writing
    tolerance: float  # Relative tolerance for f32/f64 storage
    low_precision_tolerance: float  # Relative tolerance when either side is stored in f16/bf16
    max_entries: int  # Size guard for materialized updates
    layer_types: LayerTypeTable  # Module path to layer type mapping


class LayerCheck(NamedTuple):
    module_path: str
    new_rank: int
    claimed_error: float | None
    measured_error: float
    tolerance: float
    passed: bool


@dataclass
class VerificationResult:
    parent_fingerprint: str
    fingerprint_matches: bool | None
    layers: list[LayerCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.layers)

    @property
    def failed_layers(self) -> list[str]:
        return [check.module_path for check in self.layers if not check.passed]

    def to_dict(self) -> dict[str, Any]:
        return {
            'passed': self.passed,
            'parent_fingerprint': self.parent_fingerprint,
            'fingerprint_matches': self.fingerprint_matches,
            'layers': [check._asdict() for check in self.layers],
        }


def do_verify(args: VerifyArgs) -> VerificationResult:
    """Compare measured and claimed per-layer errors.

    A layer passes when ``|measured - claimed| <= tol * ||parent update||_F``; tol is the
    low-precision tolerance when either side stores f16/bf16 tensors.

    Raises:
        FormatError: Either directory cannot be loaded, or the child has no report
        SizeGuardError: A layer is too large to materialize
        VerificationError: Any layer fails, or the child holds layers the parent lacks
    """
    parent = load_adapter(args.parent_path, args.layer_types)
    child = load_adapter(args.child_path, args.layer_types)
    claimed, claimed_fingerprint = read_claimed_errors(args.child_path)

    parent_fingerprint = fingerprint(parent)
    fingerprint_matches = None
    if claimed_fingerprint is not None:
        fingerprint_matches = claimed_fingerprint == parent_fingerprint
        if not fingerprint_matches:
            logger.warning(
                f"Child report was produced from adapter {claimed_fingerprint}, "
                f"but the parent given is {parent_fingerprint}")

    child_layers = {layer.key.module_path: layer for layer in child.layers}
    parent_paths = {layer.key.module_path for layer in parent.layers}
    unexpected = sorted(set(child_layers) - parent_paths)

    result = VerificationResult(parent_fingerprint, fingerprint_matches)
    for layer in parent.layers:
        path = layer.key.module_path
        phi = materialize(layer, args.max_entries)
        compressed = child_layers.get(path)
        if compressed is None:
            approx = np.zeros_like(phi)
            low_precision = layer.storage_dtype.is_low_precision
        else:
            approx = materialize(compressed, args.max_entries)
            low_precision = layer.storage_dtype.is_low_precision or compressed.storage_dtype.is_low_precision

        measured = frobenius_distance(phi, approx)
        tolerance = args.low_precision_tolerance if low_precision else args.tolerance
        claimed_error = claimed.get(path)
        allowed = tolerance * float(np.linalg.norm(phi)) + _ABSOLUTE_SLACK
        passed = claimed_error is not None and abs(measured - claimed_error) <= allowed

        if not passed:
            logger.error(f"{layer.key}: measured error {measured:.6g}, claimed {claimed_error}")
        else:
            logger.debug(f"{path}: measured {measured:.6g}, claimed {claimed_error:.6g}")
        result.layers.append(LayerCheck(
            path, compressed.rank if compressed is not None else 0, claimed_error, measured, tolerance, passed))

    if args.output_path is not None:
        try:
            args.output_path.mkdir(parents=True, exist_ok=True)
            (args.output_path / VERIFICATION_JSON_NAME).write_text(
                json.dumps(result.to_dict(), indent=2) + '\n')
        except OSError as e:
            raise IoError(f"Cannot write {VERIFICATION_JSON_NAME} to {args.output_path}: {e}") from e

    if unexpected:
        raise VerificationError(f"Child has layers missing from the parent: {unexpected}", unexpected)
    if not result.passed:
        failed = result.failed_layers
        raise VerificationError(f"{len(failed)} layer(s) failed verification: {', '.join(failed)}", failed)

    logger.info(f"Verified {len(result.layers)} layers of {args.child_path}")
    return result
