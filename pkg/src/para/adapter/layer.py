"""Adapter data model: layer keys, LoRA pairs and adapter sets."""

import logging
import re
from dataclasses import dataclass, field
try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):  # type: ignore[no-redef]
        def __str__(self) -> str:
            return str(self.value)

        def __format__(self, format_spec: str) -> str:
            return format(str(self.value), format_spec)
from typing import Any, Iterable, Mapping

import numpy as np

from ..errors import FormatError, UnknownLayerTypeError
from ..linalg import Matrix, as_matrix

logger = logging.getLogger(__name__)


class LayerType(StrEnum):
    """Adapted matrix types, declared in canonical order (attention q/k/v/o, then the two MLP
    matrices). The declaration order is the tie-break order used across the package."""
    Q = 'q'
    K = 'k'
    V = 'v'
    O = 'o'
    M1 = 'm1'
    M2 = 'm2'

    @property
    def order(self) -> int:
        return _LAYER_TYPE_ORDER[self]


_LAYER_TYPE_ORDER = {t: i for i, t in enumerate(LayerType)}


class StorageDtype(StrEnum):
    """Tensor storage dtypes, named as in the safetensors header."""
    F32 = 'F32'
    F16 = 'F16'
    BF16 = 'BF16'
    F64 = 'F64'

    @property
    def is_low_precision(self) -> bool:
        return self in (StorageDtype.F16, StorageDtype.BF16)


DEFAULT_LAYER_TYPES: dict[LayerType, tuple[str, ...]] = {
    LayerType.Q: ('q_proj', 'query'),
    LayerType.K: ('k_proj', 'key'),
    LayerType.V: ('v_proj', 'value'),
    LayerType.O: ('o_proj', 'out_proj', 'attention.output.dense'),
    LayerType.M1: ('up_proj', 'fc1', 'intermediate.dense'),
    LayerType.M2: ('down_proj', 'fc2', 'output.dense'),
}


class LayerTypeTable:
    """Maps checkpoint module paths to (layer_index, layer_type).

    A module path matches a suffix when it equals it or ends with ``'.' + suffix``; the
    longest matching suffix wins, so ``attention.output.dense`` beats ``output.dense``. The
    layer index is the last purely numeric component of the path, shifted to start at 1.
    """

    def __init__(self, overrides: Mapping[str, Iterable[str]] | None = None):
        table = {t: list(suffixes) for t, suffixes in DEFAULT_LAYER_TYPES.items()}
        for name, suffixes in (overrides or {}).items():
            try:
                layer_type = LayerType(name)
            except ValueError:
                raise ValueError(
                    f"Unknown layer type {name!r} in layer type table; expected one of "
                    f"{[t.value for t in LayerType]}") from None
            table[layer_type] = list(suffixes)

        self._suffixes: list[tuple[str, LayerType]] = sorted(
            ((suffix, t) for t, suffixes in table.items() for suffix in suffixes),
            key=lambda item: (-len(item[0]), item[0]))

    def classify(self, module_path: str) -> tuple[int, LayerType]:
        """Parse a module path into a 1-based layer index and a layer type.

        Raises:
            UnknownLayerTypeError: No suffix matches the path
            FormatError: The path carries no numeric layer component
        """
        layer_type = None
        for suffix, candidate in self._suffixes:
            if module_path == suffix or module_path.endswith('.' + suffix):
                layer_type = candidate
                break
        if layer_type is None:
            raise UnknownLayerTypeError(module_path)

        indices = [part for part in module_path.split('.') if part.isdigit()]
        if not indices:
            raise FormatError(f"Module path {module_path!r} has no layer index component")
        return int(indices[-1]) + 1, layer_type


@dataclass(frozen=True)
class LayerKey:
    layer_index: int
    layer_type: LayerType
    module_path: str

    @property
    def sort_key(self) -> tuple[int, int, str]:
        return self.layer_index, self.layer_type.order, self.module_path

    def __str__(self) -> str:
        return f"{self.module_path} (layer {self.layer_index}, {self.layer_type.value})"


@dataclass(frozen=True, eq=False)
class AdapterLayer:
    """One LoRA pair. The effective update is ``scale * b @ a``.

    Attributes:
        key: Provenance of the pair inside the checkpoint
        b: d1 x r factor (lora_B), float64, read-only
        a: r x d2 factor (lora_A), float64, read-only
        scale: Multiplier applied to ``b @ a`` (alpha / r, or alpha / sqrt(r) under rsLoRA)
        storage_dtype: dtype the tensors are written back in
    """
    key: LayerKey
    b: Matrix
    a: Matrix
    scale: float = 1.0
    storage_dtype: StorageDtype = StorageDtype.F32

    def __post_init__(self):
        b = as_matrix(self.b, name=f"lora_B of {self.key.module_path}")
        a = as_matrix(self.a, name=f"lora_A of {self.key.module_path}")
        if b.shape[1] != a.shape[0]:
            raise FormatError(
                f"Rank mismatch in {self.key.module_path}: lora_B {b.shape} vs lora_A {a.shape}")
        b.setflags(write=False)
        a.setflags(write=False)
        object.__setattr__(self, 'b', b)
        object.__setattr__(self, 'a', a)
        object.__setattr__(self, 'scale', float(self.scale))

    @property
    def rank(self) -> int:
        return self.b.shape[1]

    @property
    def d1(self) -> int:
        return self.b.shape[0]

    @property
    def d2(self) -> int:
        return self.a.shape[1]

    @property
    def parameter_count(self) -> int:
        return self.rank * (self.d1 + self.d2)

    def effective_update(self) -> Matrix:
        """Materialize ``scale * b @ a``. Allocates d1 x d2; meant for small layers and checks."""
        return self.scale * (self.b @ self.a)


@dataclass(frozen=True, eq=False)
class AdapterSet:
    """Immutable collection of adapter layers, sorted by (layer_index, layer type, path).

    Attributes:
        layers: Layers in canonical order
        alpha: Checkpoint-level lora_alpha
        init_rank: Checkpoint-level rank ``r`` (the uniform training rank when applicable)
        use_rslora: Whether scale is alpha / sqrt(r) instead of alpha / r
        config: Remaining adapter_config.json entries, carried through on save
        skipped_tensors: Tensor names that were not 2-D LoRA factors
    """
    layers: tuple[AdapterLayer, ...]
    alpha: float = 8.0
    init_rank: int | None = None
    use_rslora: bool = False
    config: Mapping[str, Any] = field(default_factory=dict)
    skipped_tensors: tuple[str, ...] = ()

    def __post_init__(self):
        layers = tuple(sorted(self.layers, key=lambda layer: layer.key.sort_key))
        seen: dict[tuple[int, LayerType], str] = {}
        for layer in layers:
            slot = (layer.key.layer_index, layer.key.layer_type)
            if slot in seen:
                raise FormatError(
                    f"Layer {slot[0]} type {slot[1].value} appears twice: "
                    f"{seen[slot]!r} and {layer.key.module_path!r}")
            seen[slot] = layer.key.module_path
        object.__setattr__(self, 'layers', layers)
        if self.init_rank is None and layers:
            object.__setattr__(self, 'init_rank', max(layer.rank for layer in layers))

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    @property
    def n_layers(self) -> int:
        """Number of transformer layers N (largest layer index present)."""
        return max((layer.key.layer_index for layer in self.layers), default=0)

    @property
    def budget(self) -> int:
        """Total rank budget B_init."""
        return sum(layer.rank for layer in self.layers)

    @property
    def parameter_count(self) -> int:
        return sum(layer.parameter_count for layer in self.layers)

    @property
    def keys(self) -> list[LayerKey]:
        return [layer.key for layer in self.layers]

    def layer(self, key: LayerKey) -> AdapterLayer:
        for layer in self.layers:
            if layer.key == key:
                return layer
        raise KeyError(key)

    def scale_for(self, rank: int, alpha: float) -> float:
        return alpha / (np.sqrt(rank) if self.use_rslora else rank)

    def alpha_for(self, layer: AdapterLayer) -> float:
        """lora_alpha value that reproduces ``layer.scale`` at ``layer.rank``."""
        return layer.scale * (float(np.sqrt(layer.rank)) if self.use_rslora else layer.rank)


def pattern_matches(pattern: str, module_path: str) -> bool:
    """Whether a rank_pattern/alpha_pattern key addresses ``module_path``.

    Keys are matched like the fine-tuning toolkit does: as a regular expression anchored at a
    dotted component boundary and at the end of the path. Keys that are not valid expressions
    are compared as plain suffixes.
    """
    try:
        return re.fullmatch(rf"(.*\.)?(?:{pattern})", module_path) is not None
    except re.error:
        return module_path == pattern or module_path.endswith('.' + pattern)
