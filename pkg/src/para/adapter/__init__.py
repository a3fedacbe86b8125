"""LoRA adapter package.

This package contains:
- layer: LayerKey, AdapterLayer, AdapterSet and the module-path → layer-type table
- store: load_adapter / save_adapter for safetensors checkpoints with adapter_config.json
- synthetic: generate_synthetic for adapter sets with planted spectra
"""
from .layer import AdapterLayer, AdapterSet, LayerKey, LayerType, LayerTypeTable, StorageDtype
from .store import fingerprint, load_adapter, save_adapter
from .synthetic import Bimodal, Flat, PowerLaw, generate_synthetic, parse_profile
