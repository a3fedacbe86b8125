"""Compression report: per-layer ranks and errors, totals, and the layer-by-type rank grid."""

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable

from ..adapter.layer import LayerType
from ..errors import FormatError, IoError

logger = logging.getLogger(__name__)

REPORT_JSON_NAME = 'compression_report.json'
REPORT_CSV_NAME = 'compression_report.csv'
RANK_MATRIX_CSV_NAME = 'rank_matrix.csv'

REPORT_VERSION = '1.0'

_LAYER_FIELDS = ('module_path', 'layer_index', 'layer_type', 'original_rank', 'new_rank', 'd1', 'd2',
                 'energy', 'retained_energy', 'frobenius_error')


@dataclass(frozen=True)
class LayerSummary:
    """Outcome for one layer.

    Attributes:
        retained_energy: Fraction of the layer's spectral energy kept (1.0 for a zero update)
        energy: Spectral energy of the layer before pruning
        frobenius_error: ``sqrt(sum of dropped sigma**2)``
    """
    module_path: str
    layer_index: int
    layer_type: LayerType
    original_rank: int
    new_rank: int
    d1: int
    d2: int
    energy: float
    retained_energy: float
    frobenius_error: float

    @property
    def parameter_count_before(self) -> int:
        return self.original_rank * (self.d1 + self.d2)

    @property
    def parameter_count_after(self) -> int:
        return self.new_rank * (self.d1 + self.d2)

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data['layer_type'] = self.layer_type.value
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> 'LayerSummary':
        return cls(
            module_path=str(data['module_path']),
            layer_index=int(data['layer_index']),
            layer_type=LayerType(data['layer_type']),
            original_rank=int(data['original_rank']),
            new_rank=int(data['new_rank']),
            d1=int(data['d1']),
            d2=int(data['d2']),
            energy=float(data['energy']),
            retained_energy=float(data['retained_energy']),
            frobenius_error=float(data['frobenius_error']),
        )


@dataclass(frozen=True)
class ReportTotals:
    b_init: int
    kept_total: int
    parameter_count_before: int
    parameter_count_after: int
    reduction_fraction: float
    retained_energy_fraction: float
    pruned_energy: float
    average_rank_before: float
    average_rank_after: float


@dataclass(frozen=True)
class CompressionReport:
    """Everything a compression run reports, JSON-serializable via to_dict().

    ``rank_matrix[i][t]`` is the new rank of transformer layer i + 1 at layer type t (canonical
    type order); slots without an adapted matrix hold None.
    """
    threshold: float | None
    policy: str | None
    per_layer: list[LayerSummary]
    totals: ReportTotals
    rank_matrix: list[list[int | None]]
    removed_layers: list[str] = field(default_factory=list)
    skipped_tensors: list[str] = field(default_factory=list)
    parent_fingerprint: str | None = None
    version: str = REPORT_VERSION

    @classmethod
    def build(
            cls,
            per_layer: Iterable[LayerSummary],
            *,
            threshold: float | None,
            policy: str | None,
            n_layers: int,
            skipped_tensors: list[str] | None = None,
            parent_fingerprint: str | None = None) -> 'CompressionReport':
        """Aggregate per-layer summaries; totals are reduced in the given (canonical) order."""
        per_layer = list(per_layer)
        before = sum(s.parameter_count_before for s in per_layer)
        after = sum(s.parameter_count_after for s in per_layer)
        b_init = sum(s.original_rank for s in per_layer)
        kept_total = sum(s.new_rank for s in per_layer)
        total_energy = math.fsum(s.energy for s in per_layer)
        pruned_energy = math.fsum(s.frobenius_error ** 2 for s in per_layer)
        count = max(len(per_layer), 1)

        rank_matrix: list[list[int | None]] = [[None] * len(LayerType) for _ in range(n_layers)]
        for s in per_layer:
            rank_matrix[s.layer_index - 1][s.layer_type.order] = s.new_rank

        totals = ReportTotals(
            b_init=b_init,
            kept_total=kept_total,
            parameter_count_before=before,
            parameter_count_after=after,
            reduction_fraction=1.0 - after / before if before > 0 else 0.0,
            retained_energy_fraction=(
                min(max(1.0 - pruned_energy / total_energy, 0.0), 1.0) if total_energy > 0.0 else 1.0),
            pruned_energy=pruned_energy,
            average_rank_before=b_init / count,
            average_rank_after=kept_total / count,
        )
        return cls(
            threshold=threshold,
            policy=policy,
            per_layer=per_layer,
            totals=totals,
            rank_matrix=rank_matrix,
            removed_layers=[s.module_path for s in per_layer if s.new_rank == 0],
            skipped_tensors=list(skipped_tensors or []),
            parent_fingerprint=parent_fingerprint,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            'version': self.version,
            'policy': self.policy,
            'threshold': self.threshold,
            'parent_fingerprint': self.parent_fingerprint,
            'totals': asdict(self.totals),
            'per_layer': [s.to_dict() for s in self.per_layer],
            'rank_matrix': [list(row) for row in self.rank_matrix],
            'layer_types': [t.value for t in LayerType],
            'removed_layers': list(self.removed_layers),
            'skipped_tensors': list(self.skipped_tensors),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> 'CompressionReport':
        """Load a report from its JSON form.

        Raises:
            FormatError: Missing or malformed fields
        """
        try:
            return cls(
                threshold=data['threshold'],
                policy=data['policy'],
                per_layer=[LayerSummary.from_dict(s) for s in data['per_layer']],
                totals=ReportTotals(**data['totals']),
                rank_matrix=[list(row) for row in data['rank_matrix']],
                removed_layers=list(data.get('removed_layers', [])),
                skipped_tensors=list(data.get('skipped_tensors', [])),
                parent_fingerprint=data.get('parent_fingerprint'),
                version=data.get('version', REPORT_VERSION),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"Malformed compression report: {e!r}") from e

    def summary_lines(self) -> list[str]:
        t = self.totals
        threshold = 'n/a' if self.threshold is None else f"{self.threshold:.6g}"
        return [
            f"policy: {self.policy or 'n/a'}",
            f"threshold: {threshold}",
            f"average rank: {t.average_rank_before:.4g} -> {t.average_rank_after:.4g} "
            f"(kept {t.kept_total} of {t.b_init})",
            f"parameters: {t.parameter_count_before} -> {t.parameter_count_after} "
            f"(reduction {t.reduction_fraction:.2%})",
            f"retained energy: {t.retained_energy_fraction:.6f}",
            f"removed layers: {len(self.removed_layers)}",
        ]

    def write(self, directory: str | os.PathLike, report_format: str = 'json') -> Path:
        """Write the report in ``report_format`` plus ``rank_matrix.csv`` into ``directory``.

        Returns:
            Path of the main report file

        Raises:
            IoError: The files cannot be written
        """
        directory = Path(directory)
        try:
            directory.mkdir(parents=True, exist_ok=True)
            if report_format == 'json':
                target = directory / REPORT_JSON_NAME
                target.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + '\n')
            elif report_format == 'csv':
                target = directory / REPORT_CSV_NAME
                self._write_layers_csv(target)
            else:
                raise ValueError(f"Unknown report format {report_format!r}")
            self._write_rank_matrix_csv(directory / RANK_MATRIX_CSV_NAME)
        except OSError as e:
            raise IoError(f"Cannot write report to {directory}: {e}") from e

        logger.info(f"Wrote compression report to {target}")
        return target

    def _write_layers_csv(self, path: Path) -> None:
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(_LAYER_FIELDS)
            for s in self.per_layer:
                row = s.to_dict()
                writer.writerow([_csv_value(row[name]) for name in _LAYER_FIELDS])

    def _write_rank_matrix_csv(self, path: Path) -> None:
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(['layer_index', *(t.value for t in LayerType)])
            for i, row in enumerate(self.rank_matrix, start=1):
                writer.writerow([i, *('' if rank is None else rank for rank in row)])


def read_claimed_errors(directory: str | os.PathLike) -> tuple[dict[str, float], str | None]:
    """Per-layer Frobenius errors a compressed directory's report claims.

    Reads the JSON report when present, otherwise the CSV one.

    Returns:
        ``({module_path: frobenius_error}, parent_fingerprint or None)``

    Raises:
        FormatError: No report, or a malformed one
    """
    directory = Path(directory)
    json_path = directory / REPORT_JSON_NAME
    csv_path = directory / REPORT_CSV_NAME
    try:
        if json_path.is_file():
            try:
                data = json.loads(json_path.read_text(encoding='utf-8'))
            except json.JSONDecodeError as e:
                raise FormatError(f"Malformed JSON in {json_path}: {e}") from e
            if not isinstance(data, dict):
                raise FormatError(f"{json_path} must contain a JSON object")
            report = CompressionReport.from_dict(data)
            return {s.module_path: s.frobenius_error for s in report.per_layer}, report.parent_fingerprint

        if csv_path.is_file():
            with open(csv_path, newline='') as f:
                try:
                    return {row['module_path']: float(row['frobenius_error']) for row in csv.DictReader(f)}, None
                except (KeyError, TypeError, ValueError) as e:
                    raise FormatError(f"Malformed CSV report {csv_path}: {e!r}") from e
    except OSError as e:
        raise FormatError(f"Cannot read report in {directory}: {e}") from e

    raise FormatError(f"No {REPORT_JSON_NAME} or {REPORT_CSV_NAME} in {directory}")


def _csv_value(value: Any) -> Any:
    if isinstance(value, float):
        return repr(value)
    return value
