"""para: spectral compression of LoRA adapters with a single global threshold.

Every layer's update ``scale * B @ A`` is decomposed through QR factors of its LoRA pair, the
singular values of all layers are pooled, and one threshold decides which directions survive.
"""
from .adapter import AdapterLayer, AdapterSet, LayerKey, LayerType, generate_synthetic, load_adapter, save_adapter
from .allocation import KeepPlan, Policy, PolicyKind, drop_top_k_plan, local_uniform_plan, threshold_epsilon, \
    threshold_gamma
from .errors import ParaError
from .reconstruct import CompressedLayer, compress, prune_and_reconstruct
from .session import Session
from .spectral import GlobalSpectrum, SpectralDecomposition, decompose_layer, pool_spectrum
from .utils.processor import Processor
