import asyncio
import logging
import os
from pathlib import Path
from typing import Sequence

from .adapter.layer import LayerTypeTable
from .allocation import Policy, PolicyKind
from .commands.analyze import AnalyzeArgs, do_analyze
from .commands.compress import CompressArgs, do_compress
from .commands.family import FamilyArgs, FamilyResult, do_family
from .commands.verify import VerificationResult, VerifyArgs, do_verify
from .errors import ConfigError
from .oracle import DEFAULT_MAX_ENTRIES
from .report.analysis import DEFAULT_BINS, DEFAULT_EPSILONS, SpectrumAnalysis
from .report.compression import CompressionReport
from .settings import (
    SETTING_ANALYZE_BINS,
    SETTING_ANALYZE_EPSILONS,
    SETTING_LAYER_TYPES,
    SETTING_ORACLE_MAX_ENTRIES,
    SETTING_VERIFY_LOW_PRECISION_TOLERANCE,
    SETTING_VERIFY_TOLERANCE,
    Settings,
)
from .utils.processor import Processor

logger = logging.getLogger(__name__)

DEFAULT_VERIFY_TOLERANCE = 1e-6
DEFAULT_LOW_PRECISION_TOLERANCE = 1e-2


class Session:
    """Workflow orchestration for the adapter commands.

    Session resolves configuration (layer type table, histogram bins, tolerances, size guard)
    from Settings once and runs each command against a shared Processor:
    - analyze(): spectrum data products of one adapter
    - compress(): one child adapter for one policy value
    - family(): many children from a single decomposition of the parent
    - verify(): oracle check of a child against its parent

    Commands that do not decompose (verify) work without a processor.
    """

    def __init__(self, processor: Processor | None = None, settings: Settings | None = None):
        """Initialize a session.

        Args:
            processor: Worker pool for per-layer work; required by analyze, compress and family
            settings: Loaded configuration; defaults to empty settings

        Raises:
            ConfigError: Settings hold values of the wrong shape
        """
        self._processor = processor
        self._settings = settings or Settings()

        try:
            self._layer_types = LayerTypeTable(self._settings.get(SETTING_LAYER_TYPES, {}))
            self._bins = int(self._settings.get(SETTING_ANALYZE_BINS, DEFAULT_BINS))
            self._epsilons = tuple(float(e) for e in self._settings.get(SETTING_ANALYZE_EPSILONS, DEFAULT_EPSILONS))
            self._max_entries = int(self._settings.get(SETTING_ORACLE_MAX_ENTRIES, DEFAULT_MAX_ENTRIES))
            self._tolerance = float(self._settings.get(SETTING_VERIFY_TOLERANCE, DEFAULT_VERIFY_TOLERANCE))
            self._low_precision_tolerance = float(
                self._settings.get(SETTING_VERIFY_LOW_PRECISION_TOLERANCE, DEFAULT_LOW_PRECISION_TOLERANCE))
        except (AttributeError, TypeError, ValueError) as e:
            raise ConfigError(f"Invalid settings in {self._settings.source or 'defaults'}: {e}") from e

    @property
    def layer_types(self) -> LayerTypeTable:
        return self._layer_types

    def analyze(self, input_path: str | os.PathLike, output_path: str | os.PathLike,
                bins: int | None = None) -> SpectrumAnalysis:
        """Write spectrum.json, histogram.csv, energy_curve.csv and the sweeps for one adapter.

        Args:
            input_path: Adapter directory
            output_path: Directory receiving the analysis files
            bins: Histogram bins; defaults to the ``analyze.bins`` setting
        """
        return asyncio.run(do_analyze(AnalyzeArgs(
            self._require_processor(),
            Path(input_path),
            Path(output_path),
            self._bins if bins is None else bins,
            self._epsilons,
            self._layer_types,
        )))

    def compress(self, input_path: str | os.PathLike, policy: Policy, output_path: str | os.PathLike,
                 report_format: str = 'json') -> CompressionReport:
        """Write one compressed child of ``input_path`` to ``output_path``."""
        return asyncio.run(do_compress(CompressArgs(
            self._require_processor(),
            Path(input_path),
            Path(output_path),
            policy,
            report_format,
            self._layer_types,
        )))

    def family(self, input_path: str | os.PathLike, kind: PolicyKind, values: Sequence[float],
               output_path: str | os.PathLike, report_format: str = 'json') -> FamilyResult:
        """Write one child per value under ``output_path``, decomposing the parent once."""
        return asyncio.run(do_family(FamilyArgs(
            self._require_processor(),
            Path(input_path),
            Path(output_path),
            kind,
            list(values),
            report_format,
            self._layer_types,
        )))

    def verify(self, parent_path: str | os.PathLike, child_path: str | os.PathLike,
               output_path: str | os.PathLike | None = None) -> VerificationResult:
        """Check a child against its parent; raises VerificationError on any failed layer."""
        return do_verify(VerifyArgs(
            Path(parent_path),
            Path(child_path),
            Path(output_path) if output_path is not None else None,
            self._tolerance,
            self._low_precision_tolerance,
            self._max_entries,
            self._layer_types,
        ))

    def _require_processor(self) -> Processor:
        if self._processor is None:
            raise RuntimeError("This command needs a Processor; create the Session with one")
        return self._processor
