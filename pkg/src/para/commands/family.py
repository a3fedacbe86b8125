"""Family command: decompose a parent once and derive one child per policy value."""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple, Sequence

from ..adapter.layer import LayerTypeTable
from ..adapter.store import load_adapter
from ..allocation import Policy, PolicyKind
from ..cache import decompose_adapter
from ..errors import DomainError, IoError, ParaError
from ..utils.processor import Processor
from ..utils.profiling import PhaseTimer
from .compress import write_child

logger = logging.getLogger(__name__)

FAMILY_JSON_NAME = 'family.json'


class FamilyArgs(NamedTuple):
    """Arguments for family command operations."""
    processor: Processor  # Worker pool for per-layer decomposition and reconstruction
    input_path: Path  # Parent adapter directory
    output_path: Path  # Directory receiving one subdirectory per child and family.json
    kind: PolicyKind  # Policy applied to every value
    values: Sequence[float]  # Strictly monotone policy values
    report_format: str  # 'json' or 'csv'
    layer_types: LayerTypeTable  # Module path to layer type mapping


class ChildOutcome(NamedTuple):
    value: float
    directory: str
    status: str  # 'ok' or 'failed'
    threshold: float | None
    kept_total: int | None
    reduction_fraction: float | None
    error: str | None


@dataclass
class FamilyResult:
    kind: PolicyKind
    parent_fingerprint: str
    decomposition_seconds: float
    children: list[ChildOutcome] = field(default_factory=list)

    @property
    def failed(self) -> list[ChildOutcome]:
        return [c for c in self.children if c.status != 'ok']

    def to_dict(self) -> dict[str, Any]:
        return {
            'policy': self.kind.value,
            'parent_fingerprint': self.parent_fingerprint,
            'decomposition_seconds': self.decomposition_seconds,
            'children': [c._asdict() for c in self.children],
        }


def child_directory_name(policy: Policy) -> str:
    """Subdirectory of a child, e.g. ``gamma_0.25`` or ``local_4``."""
    return str(policy).replace('=', '_')


def validate_family_values(kind: PolicyKind, values: Sequence[float]) -> list[Policy]:
    """Check that values are valid for ``kind`` and strictly increasing or strictly decreasing.

    Raises:
        DomainError: Empty list, invalid value, or a non-monotone sequence
    """
    if not values:
        raise DomainError("A family needs at least one value")
    policies = [Policy.parse(kind.value, v) for v in values]
    steps = [b - a for a, b in zip(values, values[1:])]
    if not (all(s > 0 for s in steps) or all(s < 0 for s in steps)):
        raise DomainError(f"Family values must be strictly increasing or decreasing, got {list(values)}")
    names = [child_directory_name(p) for p in policies]
    if len(set(names)) != len(names):
        raise DomainError(f"Family values map to the same child directory: {names}")
    return policies


async def do_family(args: FamilyArgs) -> FamilyResult:
    """Produce one child per value, reusing a single decomposition of the parent.

    Failures of individual children are recorded in the result (and family.json) while the
    remaining children are still written.

    Raises:
        DomainError: Invalid or non-monotone values
        FormatError: The parent cannot be loaded
        IoError: family.json cannot be written
    """
    policies = validate_family_values(args.kind, args.values)
    adapter = load_adapter(args.input_path, args.layer_types)

    timer = PhaseTimer()
    with timer.phase('decompose'):
        decomposed = await decompose_adapter(args.processor, adapter)

    result = FamilyResult(args.kind, decomposed.fingerprint, timer.seconds('decompose'))
    for policy in policies:
        name = child_directory_name(policy)
        try:
            report = await write_child(
                args.processor, decomposed, policy, args.output_path / name, args.report_format)
        except ParaError as e:
            logger.error(f"Child {policy} failed: {e}")
            result.children.append(ChildOutcome(policy.value, name, 'failed', None, None, None, str(e)))
            continue
        result.children.append(ChildOutcome(
            policy.value, name, 'ok', report.threshold, report.totals.kept_total,
            report.totals.reduction_fraction, None))

    try:
        args.output_path.mkdir(parents=True, exist_ok=True)
        (args.output_path / FAMILY_JSON_NAME).write_text(json.dumps(result.to_dict(), indent=2) + '\n')
    except OSError as e:
        raise IoError(f"Cannot write {FAMILY_JSON_NAME} to {args.output_path}: {e}") from e

    logger.info(f"Family of {len(result.children)} children written to {args.output_path} "
                f"({len(result.failed)} failed)")
    return result
