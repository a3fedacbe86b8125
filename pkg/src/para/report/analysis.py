"""Spectrum analysis products: pooled values with provenance, histogram, cumulative energy curve,
and sweeps over epsilon and top-K drops."""

import csv
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from ..allocation import drop_top_k_plan, threshold_epsilon
from ..errors import DegenerateError, DomainError, IoError
from ..spectral import GlobalSpectrum, SpectralDecomposition

logger = logging.getLogger(__name__)

SPECTRUM_JSON_NAME = 'spectrum.json'
HISTOGRAM_CSV_NAME = 'histogram.csv'
ENERGY_CURVE_CSV_NAME = 'energy_curve.csv'
EPSILON_SWEEP_CSV_NAME = 'epsilon_sweep.csv'
TOPK_SWEEP_CSV_NAME = 'topk_sweep.csv'

DEFAULT_BINS = 64
DEFAULT_EPSILONS = (0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99, 0.999, 1.0)
TOPK_SWEEP_LIMIT = 16


@dataclass(frozen=True)
class SpectrumAnalysis:
    """Everything ``para analyze`` writes, computed from one pooled spectrum."""
    spectrum: GlobalSpectrum
    histogram_counts: np.ndarray
    histogram_edges: np.ndarray
    cumulative_energy: np.ndarray
    epsilon_sweep: list[dict[str, Any]]
    topk_sweep: list[dict[str, Any]]
    n_layers: int

    def spectrum_dict(self) -> dict[str, Any]:
        return {
            'b_init': self.spectrum.budget,
            'total_energy': self.spectrum.total_energy,
            'layers': [
                {
                    'module_path': key.module_path,
                    'layer_index': key.layer_index,
                    'layer_type': key.layer_type.value,
                    'rank': rank,
                }
                for key, rank in zip(self.spectrum.keys, self.spectrum.ranks)
            ],
            'values': [
                {
                    'value': entry.value,
                    'module_path': entry.key.module_path,
                    'layer_index': entry.key.layer_index,
                    'layer_type': entry.key.layer_type.value,
                    'position': entry.position,
                }
                for entry in self.spectrum
            ],
        }

    def write(self, directory: str | os.PathLike) -> list[Path]:
        """Write every analysis file into ``directory``.

        Raises:
            IoError: The files cannot be written
        """
        directory = Path(directory)
        written = []
        try:
            directory.mkdir(parents=True, exist_ok=True)

            path = directory / SPECTRUM_JSON_NAME
            path.write_text(json.dumps(self.spectrum_dict(), indent=2, sort_keys=True) + '\n')
            written.append(path)

            rows = [(repr(float(lo)), repr(float(hi)), int(n))
                    for lo, hi, n in zip(self.histogram_edges[:-1], self.histogram_edges[1:], self.histogram_counts)]
            written.append(_write_csv(directory / HISTOGRAM_CSV_NAME, ('bin_start', 'bin_end', 'count'), rows))

            total = self.cumulative_energy[-1] if len(self.cumulative_energy) else 0.0
            rows = [(k, repr(float(value)), repr(float(c / total) if total > 0.0 else 1.0))
                    for k, (value, c) in enumerate(zip(self.spectrum.values, self.cumulative_energy), start=1)]
            written.append(_write_csv(
                directory / ENERGY_CURVE_CSV_NAME, ('kept', 'value', 'cumulative_energy_fraction'), rows))

            fields = ('epsilon', 'threshold', 'kept_total', 'average_rank', 'retained_energy_fraction',
                      'removed_layers')
            written.append(_write_csv(
                directory / EPSILON_SWEEP_CSV_NAME, fields,
                [[_csv_value(row[f]) for f in fields] for row in self.epsilon_sweep]))

            fields = ('k', 'kept_total', 'average_rank', 'retained_energy_fraction')
            written.append(_write_csv(
                directory / TOPK_SWEEP_CSV_NAME, fields,
                [[_csv_value(row[f]) for f in fields] for row in self.topk_sweep]))
        except OSError as e:
            raise IoError(f"Cannot write analysis to {directory}: {e}") from e

        logger.info(f"Wrote {len(written)} analysis files to {directory}")
        return written


def analyze_spectrum(
        spectrum: GlobalSpectrum,
        decomps: Sequence[SpectralDecomposition],
        *,
        bins: int = DEFAULT_BINS,
        epsilons: Sequence[float] = DEFAULT_EPSILONS) -> SpectrumAnalysis:
    """Compute the histogram, energy curve and sweeps of a pooled spectrum.

    Raises:
        DomainError: ``bins`` is not positive
    """
    if bins < 1:
        raise DomainError(f"Histogram needs at least one bin, got {bins}")

    counts, edges = np.histogram(spectrum.values, bins=bins)
    cumulative = np.cumsum(spectrum.values ** 2)
    layer_count = max(len(spectrum.keys), 1)

    epsilon_sweep = []
    for epsilon in epsilons:
        try:
            plan = threshold_epsilon(spectrum, epsilon)
        except DegenerateError:
            logger.warning("Every singular value is zero; skipping the epsilon sweep")
            break
        epsilon_sweep.append({
            'epsilon': float(epsilon),
            'threshold': plan.threshold_or_none,
            'kept_total': plan.kept_total,
            'average_rank': plan.kept_total / layer_count,
            'retained_energy_fraction': plan.retained_energy_fraction,
            'removed_layers': sum(1 for mask in plan.keep.values() if not mask.any()),
        })

    topk_sweep = []
    for k in range(min(spectrum.budget, TOPK_SWEEP_LIMIT) + 1):
        plan = drop_top_k_plan(decomps, k)
        topk_sweep.append({
            'k': k,
            'kept_total': plan.kept_total,
            'average_rank': plan.kept_total / layer_count,
            'retained_energy_fraction': plan.retained_energy_fraction,
        })

    return SpectrumAnalysis(
        spectrum=spectrum,
        histogram_counts=counts,
        histogram_edges=edges,
        cumulative_energy=cumulative,
        epsilon_sweep=epsilon_sweep,
        topk_sweep=topk_sweep,
        n_layers=len(spectrum.keys),
    )


def _write_csv(path: Path, header: Sequence[str], rows) -> Path:
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _csv_value(value: Any) -> Any:
    if value is None:
        return ''
    if isinstance(value, float):
        return repr(value)
    return value
