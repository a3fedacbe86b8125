"""Report module for compression and analysis outputs.

This package contains:
- compression: CompressionReport, LayerSummary and ReportTotals with JSON/CSV writers
- analysis: SpectrumAnalysis, the pooled-spectrum data behind histograms, energy curves and sweeps
- schema: JSON schemas every JSON output validates against (see schema_path)
"""
from importlib import resources
from pathlib import Path


def schema_path(name: str) -> Path:
    """Path of a checked-in schema, e.g. ``schema_path('compression_report')``."""
    return Path(str(resources.files(__package__).joinpath('schema', f'{name}.schema.json')))
