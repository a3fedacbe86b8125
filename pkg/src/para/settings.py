import logging
import os
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib  # pyright: ignore[reportMissingImports]

logger = logging.getLogger(__name__)

# Settings key constants
SETTING_LAYER_TYPES = 'layer_types'
SETTING_ANALYZE_BINS = 'analyze.bins'
SETTING_ANALYZE_EPSILONS = 'analyze.epsilons'
SETTING_ORACLE_MAX_ENTRIES = 'oracle.max_entries'
SETTING_PROCESSOR_THREADS = 'processor.threads'
SETTING_VERIFY_TOLERANCE = 'verify.tolerance'
SETTING_VERIFY_LOW_PRECISION_TOLERANCE = 'verify.low_precision_tolerance'

CONFIG_ENV = 'PARA_CONFIG'
DEFAULT_CONFIG_NAME = 'para.toml'


class Settings:
    """Read-only key-value view over a para TOML configuration file.

    The file is located, in order, from an explicit path, the PARA_CONFIG environment variable,
    or ``para.toml`` in the working directory. A missing file yields empty settings, so every
    get() returns its default. Interpretation of values is left to consumers.

    Example:
        settings = Settings.locate()
        bins = settings.get(SETTING_ANALYZE_BINS, 64)
        table = settings.get(SETTING_LAYER_TYPES, {})
    """

    def __init__(self, data: dict | None = None, source: Path | None = None):
        self._settings: dict = data or {}
        self._source = source

    @classmethod
    def load(cls, path: str | os.PathLike) -> 'Settings':
        """Load settings from a TOML file.

        Raises:
            FileNotFoundError: The file does not exist
            tomllib.TOMLDecodeError: The file is not valid TOML
        """
        path = Path(path)
        with open(path, 'rb') as f:
            data = tomllib.load(f)
        logger.info(f"Loaded settings from {path}")
        return cls(data, path)

    @classmethod
    def locate(cls, explicit: str | os.PathLike | None = None) -> 'Settings':
        if explicit is not None:
            return cls.load(explicit)

        from_env = os.environ.get(CONFIG_ENV)
        if from_env:
            return cls.load(from_env)

        default = Path.cwd() / DEFAULT_CONFIG_NAME
        if default.is_file():
            return cls.load(default)

        return cls()

    @property
    def source(self) -> Path | None:
        return self._source

    def get(self, key: str, default=None):
        """Get a setting value by dotted key path, e.g. 'verify.tolerance'.

        Returns the default when the path does not exist or crosses a non-table value.
        """
        keys = key.split('.')
        value = self._settings

        for k in keys:
            if isinstance(value, dict) and k in value:
                value = value[k]
            else:
                return default

        return value
