"""Checkpoint I/O for LoRA adapters: ``adapter_model.safetensors`` plus ``adapter_config.json``.

Tensor files follow the safetensors layout (8-byte little-endian header length, JSON header
mapping tensor name to dtype/shape/data_offsets, contiguous data buffer). Parsing and
validation of that layout is delegated to the safetensors library; its failures surface here
as FormatError. Values are upcast to float64 on load and written back at each layer's storage
dtype.
"""

import json
import logging
import os
import re
from collections import defaultdict
from pathlib import Path
from typing import Any

import mmh3
import numpy as np
import safetensors

from ..errors import EmptySetError, FormatError, IoError, PairingError
from .layer import AdapterLayer, AdapterSet, LayerKey, LayerTypeTable, StorageDtype, pattern_matches

logger = logging.getLogger(__name__)

ADAPTER_WEIGHTS_NAME = 'adapter_model.safetensors'
ADAPTER_CONFIG_NAME = 'adapter_config.json'

# PEFT writes adapter weights under "<module path>.lora_A.weight"; the wrapper prefix below is
# dropped from rank_pattern/alpha_pattern keys.
_LORA_TENSOR = re.compile(r'^(?P<prefix>.+)\.lora_(?P<side>[AB])\.weight$')
_PEFT_WRAPPER_PREFIX = 'base_model.model.'

_DEFAULT_LORA_ALPHA = 8.0

_SERIALIZED_DTYPE_NAMES = {
    StorageDtype.F32: 'float32',
    StorageDtype.F16: 'float16',
    StorageDtype.BF16: 'bfloat16',
    StorageDtype.F64: 'float64',
}
_HEADER_DTYPE_NAMES = {v: k.value for k, v in _SERIALIZED_DTYPE_NAMES.items()}


def decode_tensor(dtype: str, shape: list[int], data: bytes) -> np.ndarray:
    """Decode raw little-endian tensor bytes into a float64 array.

    Raises:
        FormatError: Unsupported dtype or byte count inconsistent with the shape
    """
    try:
        storage = StorageDtype(dtype)
    except ValueError:
        raise FormatError(f"Unsupported tensor dtype {dtype!r}") from None

    try:
        if storage == StorageDtype.BF16:
            bits = np.frombuffer(data, dtype='<u2').astype('<u4') << 16
            values = bits.view('<f4')
        else:
            values = np.frombuffer(data, dtype={
                StorageDtype.F32: '<f4',
                StorageDtype.F16: '<f2',
                StorageDtype.F64: '<f8',
            }[storage])
    except ValueError as e:
        raise FormatError(f"Tensor bytes are not a whole number of {dtype} values: {e}") from e

    if values.size != int(np.prod(shape, dtype=np.int64)):
        raise FormatError(f"Tensor byte count does not match shape {shape} at dtype {dtype}")
    return values.astype(np.float64).reshape(shape)


def encode_tensor(values: np.ndarray, storage: StorageDtype) -> bytes:
    """Encode a float array as little-endian bytes at ``storage`` precision.

    bfloat16 keeps the upper half of the float32 pattern with round-to-nearest-even, so values
    that were loaded from bfloat16 are written back unchanged.
    """
    if storage == StorageDtype.BF16:
        bits = np.ascontiguousarray(values, dtype='<f4').view('<u4')
        rounded = (bits + np.uint32(0x7FFF) + ((bits >> np.uint32(16)) & np.uint32(1))) >> np.uint32(16)
        return rounded.astype('<u2').tobytes()

    target = {
        StorageDtype.F32: '<f4',
        StorageDtype.F16: '<f2',
        StorageDtype.F64: '<f8',
    }[storage]
    return np.ascontiguousarray(values, dtype=target).tobytes()


def read_safetensors(data: bytes) -> dict[str, tuple[str, list[int], bytes]]:
    """Parse a safetensors buffer into ``{name: (dtype, shape, raw bytes)}``.

    Raises:
        FormatError: Malformed header, offsets that overlap or overrun the buffer, or any other
            parse failure
    """
    try:
        entries = safetensors.deserialize(data)
    except Exception as e:
        # Any parser failure is a format error.
        raise FormatError(f"Malformed safetensors data: {e}") from e

    tensors = {}
    for name, info in entries:
        dtype = str(info['dtype'])
        tensors[name] = (_HEADER_DTYPE_NAMES.get(dtype, dtype), list(info['shape']), bytes(info['data']))
    return tensors


def load_adapter(path: str | os.PathLike, layer_types: LayerTypeTable | None = None) -> AdapterSet:
    """Load a LoRA adapter directory.

    Every ``<prefix>.lora_A.weight`` / ``<prefix>.lora_B.weight`` pair becomes one AdapterLayer
    with ``scale = alpha / r``, where alpha and r honor per-module ``alpha_pattern`` and
    ``rank_pattern`` overrides. Tensors that are not 2-D LoRA factors are recorded in
    ``skipped_tensors``.

    Raises:
        FormatError: Missing files, malformed safetensors header or JSON
        PairingError: lora_A without lora_B (or vice versa) or inconsistent shapes
        UnknownLayerTypeError: A module path matches no known layer type
    """
    directory = Path(path)
    weights_path = directory / ADAPTER_WEIGHTS_NAME
    config_path = directory / ADAPTER_CONFIG_NAME
    layer_types = layer_types or LayerTypeTable()

    logger.info(f"Loading adapter from {directory}")

    config = _read_config(config_path)
    try:
        raw = weights_path.read_bytes()
    except FileNotFoundError:
        raise FormatError(f"Missing {ADAPTER_WEIGHTS_NAME} in {directory}") from None
    except OSError as e:
        raise IoError(f"Cannot read {weights_path}: {e}") from e
    tensors = read_safetensors(raw)

    alpha = _config_number(config.get('lora_alpha', _DEFAULT_LORA_ALPHA), float, 'lora_alpha')
    use_rslora = config.get('use_rslora')
    if use_rslora is None:
        use_rslora = False
    if not isinstance(use_rslora, bool):
        raise FormatError(f"{ADAPTER_CONFIG_NAME}: use_rslora must be true or false, got {use_rslora!r}")
    init_rank = _config_number(config['r'], int, 'r') if config.get('r') is not None else None
    rank_pattern = _config_mapping(config, 'rank_pattern')
    alpha_pattern = _config_mapping(config, 'alpha_pattern')

    pairs: dict[str, dict[str, tuple[str, list[int], bytes]]] = defaultdict(dict)
    skipped: list[str] = []
    for name, tensor in tensors.items():
        match = _LORA_TENSOR.match(name)
        if match is None or len(tensor[1]) != 2:
            skipped.append(name)
            continue
        pairs[match['prefix']][match['side']] = tensor

    if skipped:
        logger.info(f"Skipping {len(skipped)} tensors that are not 2-D LoRA factors")

    layers = []
    for prefix in sorted(pairs):
        sides = pairs[prefix]
        if 'A' not in sides or 'B' not in sides:
            missing = 'lora_B' if 'B' not in sides else 'lora_A'
            raise PairingError(f"Module {prefix!r} has no {missing} tensor")

        a_dtype, a_shape, a_data = sides['A']
        b_dtype, b_shape, b_data = sides['B']
        if b_shape[1] != a_shape[0]:
            raise PairingError(
                f"Module {prefix!r}: lora_B shape {b_shape} does not match lora_A shape {a_shape}")
        if a_dtype != b_dtype:
            raise PairingError(f"Module {prefix!r}: lora_A is {a_dtype} but lora_B is {b_dtype}")
        if a_shape[0] < 1:
            raise PairingError(f"Module {prefix!r} has rank 0")

        layer_index, layer_type = layer_types.classify(prefix)
        rank = a_shape[0]
        pattern_key = _pattern_key(prefix)
        declared_rank = _lookup_pattern(rank_pattern, pattern_key, init_rank)
        if declared_rank is not None and _config_number(declared_rank, int, 'rank_pattern') != rank:
            logger.warning(
                f"Config declares rank {declared_rank} for {prefix} but tensors have rank {rank}; "
                "using the tensor rank")
        layer_alpha = _config_number(_lookup_pattern(alpha_pattern, pattern_key, alpha), float, 'alpha_pattern')
        scale = layer_alpha / (float(np.sqrt(rank)) if use_rslora else rank)

        try:
            layer = AdapterLayer(
                key=LayerKey(layer_index, layer_type, prefix),
                b=decode_tensor(b_dtype, b_shape, b_data),
                a=decode_tensor(a_dtype, a_shape, a_data),
                scale=scale,
                storage_dtype=StorageDtype(a_dtype),
            )
        except FormatError:
            raise
        except ValueError as e:
            raise FormatError(f"Module {prefix!r} has invalid tensors: {e}") from e
        layers.append(layer)
        logger.debug(f"Loaded {prefix}: rank {rank}, {b_shape[0]}x{a_shape[1]}, scale {scale}")

    carried = {k: v for k, v in config.items() if k not in ('r', 'lora_alpha', 'rank_pattern', 'alpha_pattern')}
    adapter = AdapterSet(
        layers=tuple(layers),
        alpha=alpha,
        init_rank=init_rank,
        use_rslora=use_rslora,
        config=carried,
        skipped_tensors=tuple(sorted(skipped)),
    )
    logger.info(f"Loaded {len(adapter)} adapter layers (budget {adapter.budget}) from {directory}")
    return adapter


def save_adapter(adapter: AdapterSet, path: str | os.PathLike) -> None:
    """Write an adapter directory.

    Tensors are written at each layer's storage dtype. The config lists every layer in
    ``rank_pattern`` and ``alpha_pattern`` so heterogeneous ranks and per-layer scales load back
    exactly.

    Raises:
        EmptySetError: The set has no layers (everything was pruned to rank 0)
        IoError: The directory or files cannot be written
    """
    if len(adapter) == 0:
        raise EmptySetError("Every layer was pruned to rank 0; refusing to write an empty adapter")

    directory = Path(path)
    logger.info(f"Saving {len(adapter)} adapter layers to {directory}")

    tensors: dict[str, dict[str, Any]] = {}
    rank_pattern: dict[str, int] = {}
    alpha_pattern: dict[str, float] = {}
    for layer in adapter.layers:
        prefix = layer.key.module_path
        dtype_name = _SERIALIZED_DTYPE_NAMES[layer.storage_dtype]
        tensors[f"{prefix}.lora_A.weight"] = {
            'dtype': dtype_name,
            'shape': list(layer.a.shape),
            'data': encode_tensor(layer.a, layer.storage_dtype),
        }
        tensors[f"{prefix}.lora_B.weight"] = {
            'dtype': dtype_name,
            'shape': list(layer.b.shape),
            'data': encode_tensor(layer.b, layer.storage_dtype),
        }
        rank_pattern[_pattern_key(prefix)] = layer.rank
        alpha_pattern[_pattern_key(prefix)] = adapter.alpha_for(layer)

    config: dict[str, Any] = dict(adapter.config)
    config['r'] = adapter.init_rank if adapter.init_rank is not None else max(rank_pattern.values())
    config['lora_alpha'] = adapter.alpha
    config['use_rslora'] = adapter.use_rslora
    config['rank_pattern'] = rank_pattern
    config['alpha_pattern'] = alpha_pattern
    if not config.get('target_modules'):
        config['target_modules'] = sorted({layer.key.module_path.rsplit('.', 1)[-1] for layer in adapter.layers})

    try:
        payload = safetensors.serialize(tensors, metadata={'format': 'pt'})
        directory.mkdir(parents=True, exist_ok=True)
        (directory / ADAPTER_WEIGHTS_NAME).write_bytes(payload)
        (directory / ADAPTER_CONFIG_NAME).write_text(json.dumps(config, indent=2, sort_keys=True) + '\n')
    except OSError as e:
        raise IoError(f"Cannot write adapter to {directory}: {e}") from e

    logger.info(f"Saved adapter to {directory}")


def fingerprint(adapter: AdapterSet) -> str:
    """Stable 128-bit hex fingerprint over tensor names and their stored bytes."""
    digests = bytearray()
    for layer in adapter.layers:
        for side, matrix in (('A', layer.a), ('B', layer.b)):
            name = f"{layer.key.module_path}.lora_{side}.weight".encode('utf-8')
            payload = name + b'\0' + encode_tensor(matrix, layer.storage_dtype)
            digests += mmh3.hash128(payload, signed=False).to_bytes(16, 'big')
    return f"{mmh3.hash128(bytes(digests), signed=False):032x}"


def _read_config(config_path: Path) -> dict[str, Any]:
    try:
        text = config_path.read_text(encoding='utf-8')
    except FileNotFoundError:
        raise FormatError(f"Missing {ADAPTER_CONFIG_NAME} in {config_path.parent}") from None
    except (OSError, UnicodeDecodeError) as e:
        raise FormatError(f"Cannot read {config_path}: {e}") from e

    try:
        config = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"Malformed JSON in {config_path}: {e}") from e
    if not isinstance(config, dict):
        raise FormatError(f"{config_path} must contain a JSON object")
    return config


def _pattern_key(module_path: str) -> str:
    return module_path.removeprefix(_PEFT_WRAPPER_PREFIX)


def _lookup_pattern(pattern: dict[str, Any], module_path: str, default: Any) -> Any:
    for key, value in pattern.items():
        if pattern_matches(key, module_path):
            return value
    return default


def _config_number(value: Any, kind: type[int] | type[float], name: str) -> Any:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise FormatError(f"{ADAPTER_CONFIG_NAME}: {name} must be a number, got {value!r}")
    if not np.isfinite(value):
        raise FormatError(f"{ADAPTER_CONFIG_NAME}: {name} must be finite, got {value!r}")
    return kind(value)


def _config_mapping(config: dict[str, Any], name: str) -> dict[str, Any]:
    value = config.get(name) or {}
    if not isinstance(value, dict):
        raise FormatError(f"{ADAPTER_CONFIG_NAME}: {name} must be an object, got {type(value).__name__}")
    return value
