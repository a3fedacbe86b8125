"""Exception hierarchy shared by every para module.

Each concrete error also derives from the closest builtin exception so callers that only
know about ValueError/OSError keep working.
"""


class ParaError(Exception):
    pass


class DimensionError(ParaError, ValueError):
    """Matrix shapes are incompatible with the requested operation."""


class DomainError(ParaError, ValueError):
    """A policy parameter lies outside its admissible range."""


class DegenerateError(ParaError, ValueError):
    """The input carries no usable signal (e.g. every singular value is zero)."""


class EmptyInputError(ParaError, ValueError):
    pass


class MaskLengthError(ParaError, ValueError):
    pass


class PlanMismatchError(ParaError, ValueError):
    """A keep plan does not cover exactly the layers of the adapter set it is applied to."""


class SizeGuardError(ParaError, MemoryError):
    """Refusing to materialize a matrix larger than the configured guard."""


class FormatError(ParaError, ValueError):
    """Malformed checkpoint: bad safetensors header, bad JSON, or inconsistent tensors."""


class PairingError(FormatError):
    """A lora_A tensor without its lora_B partner (or vice versa), or mismatched shapes."""


class UnknownLayerTypeError(FormatError):
    def __init__(self, module_path: str):
        super().__init__(f"Module path {module_path!r} matches no known layer type")
        self.module_path = module_path


class IoError(ParaError, OSError):
    pass


class EmptySetError(ParaError, ValueError):
    """Every layer was pruned to rank 0; there is nothing to write."""


class VerificationError(ParaError):
    def __init__(self, message: str, failed_layers: list[str] | None = None):
        super().__init__(message)
        self.failed_layers = failed_layers or []


class ConfigError(ParaError, ValueError):
    """The settings file is unreadable or holds values of the wrong shape."""
