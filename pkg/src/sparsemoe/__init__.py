"""CPU inference engine for fine-grained MoE decoders with pre-attention routing,
NoPE/RoPE hybrid attention, neuron-sparse ReGLU experts, expert offloading and a
sparse LM head, verifiable against dense in-memory oracles on random fixtures."""

from .core import PRESETS, LayerKind, ModelConfig, generate_fixture, layer_kind, rms_norm, validate_config
from .engine import DecodeTrace, Engine, GenerationParams, GenerationResult, benchmark, generate
from .weightstore import WeightContainer, open_container, write_container

__all__ = [
    "PRESETS",
    "DecodeTrace",
    "Engine",
    "GenerationParams",
    "GenerationResult",
    "LayerKind",
    "ModelConfig",
    "WeightContainer",
    "benchmark",
    "generate",
    "generate_fixture",
    "layer_kind",
    "open_container",
    "rms_norm",
    "validate_config",
    "write_container",
]
