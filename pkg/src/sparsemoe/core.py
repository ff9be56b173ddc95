"""Model configuration, deterministic fixture weights and shared numeric primitives."""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import math
from dataclasses import dataclass, fields
from typing import TYPE_CHECKING

import numpy as np

from .errors import ConfigError, RangeError, ShapeError

if TYPE_CHECKING:
    from .weightstore import WeightContainer


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    hidden_dim: int
    head_dim: int
    ffn_dim: int
    num_q_heads: int
    num_kv_heads: int
    num_experts: int
    top_k: int
    window_size: int = 4096
    attn_pattern_period: int = 4
    rope_base: float = 1e5
    vocab_size: int = 512
    max_context: int = 8192
    norm_epsilon: float = 1e-6

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        """Serialize as ``key=value`` lines, one per field, in declaration order."""
        return "".join(f"{f.name}={getattr(self, f.name)!r}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> ModelConfig:
        types = {f.name: f.type for f in fields(cls)}
        values: dict[str, object] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, raw = line.partition("=")
            key = key.strip()
            if not sep or key not in types:
                raise ConfigError(f"config line {lineno}: unrecognized entry {line!r}")
            try:
                values[key] = float(raw) if types[key] == "float" else int(raw)
            except ValueError as exc:
                raise ConfigError(f"config line {lineno}: bad value for {key}: {raw!r}") from exc
        try:
            return cls(**values)
        except TypeError as exc:
            raise ConfigError(f"incomplete config: {exc}") from exc

    @property
    def num_nope_layers(self) -> int:
        return -(-self.num_layers // self.attn_pattern_period)

    @property
    def num_swa_layers(self) -> int:
        return self.num_layers - self.num_nope_layers


PRESETS: dict[str, ModelConfig] = {
    "tiny": ModelConfig(
        num_layers=2, hidden_dim=64, head_dim=16, ffn_dim=128, num_q_heads=4,
        num_kv_heads=2, num_experts=8, top_k=2, window_size=8, max_context=256,
    ),
    "4b-shape": ModelConfig(
        num_layers=32, hidden_dim=1536, head_dim=128, ffn_dim=768, num_q_heads=12,
        num_kv_heads=2, num_experts=32, top_k=4,
    ),
    "21b-shape": ModelConfig(
        num_layers=52, hidden_dim=2560, head_dim=128, ffn_dim=768, num_q_heads=28,
        num_kv_heads=4, num_experts=64, top_k=6,
    ),
}


class LayerKind(enum.Enum):
    NopeGlobal = "nope_global"
    SwaRope = "swa_rope"


def layer_kind(layer_index: int, config: ModelConfig) -> LayerKind:
    if not 0 <= layer_index < config.num_layers:
        raise RangeError(f"layer {layer_index} out of range [0, {config.num_layers})")
    if layer_index % config.attn_pattern_period == 0:
        return LayerKind.NopeGlobal
    return LayerKind.SwaRope


def validate_config(config: ModelConfig) -> list[str]:
    """Return every violated invariant of ``config``; an empty list means valid."""
    problems = []
    counts = ("num_layers", "hidden_dim", "head_dim", "ffn_dim", "num_q_heads",
              "num_kv_heads", "num_experts", "top_k", "vocab_size", "max_context")
    for name in counts:
        if getattr(config, name) < 1:
            problems.append(f"{name} must be >= 1")
    if config.num_kv_heads >= 1 and config.num_q_heads % config.num_kv_heads != 0:
        problems.append(
            f"num_q_heads {config.num_q_heads} not divisible by num_kv_heads {config.num_kv_heads}"
        )
    if not 1 <= config.top_k <= config.num_experts:
        problems.append(f"top_k {config.top_k} outside [1, num_experts={config.num_experts}]")
    if config.window_size < 1:
        problems.append("window_size must be >= 1")
    if config.attn_pattern_period < 1:
        problems.append("attn_pattern_period must be >= 1")
    if config.head_dim % 2:
        problems.append(f"head_dim {config.head_dim} must be even for rotary embedding")
    if not config.rope_base > 1.0:
        problems.append("rope_base must be > 1")
    if not config.norm_epsilon >= 0.0:
        problems.append("norm_epsilon must be >= 0")
    return problems


def require_valid(config: ModelConfig) -> None:
    problems = validate_config(config)
    if problems:
        raise ConfigError("invalid config: " + "; ".join(problems))


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    if x.shape != gain.shape:
        raise ShapeError(f"rms_norm: x {x.shape} vs gain {gain.shape}")
    x = np.asarray(x, dtype=np.float32)
    ms = np.float32(np.mean(x * x, dtype=np.float32))
    denom = np.sqrt(ms + np.float32(eps))
    if denom == 0:
        return np.zeros_like(x)
    return (gain * (x / denom)).astype(np.float32)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float32)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum(dtype=np.float32)


# Fixture PRNG: Philox-4x64 keyed by (seed, 64-bit BLAKE2b of the tensor name).
# Only the raw 64-bit counter output is consumed, and the conversion to float is
# a sequence of exactly-rounded IEEE operations, so values are platform independent.

_U53 = float(2.0 ** -53)


def tensor_key(seed: int, name: str) -> int:
    name_hash = int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "little")
    return (name_hash << 64) | (seed & 0xFFFF_FFFF_FFFF_FFFF)


def fixture_values(seed: int, name: str, rows: int, cols: int, fan_in: int) -> np.ndarray:
    """Zero-mean, unit-variance uniform values scaled by ``1/sqrt(fan_in)``."""
    bitgen = np.random.Philox(key=tensor_key(seed, name))
    raw = bitgen.random_raw(rows * cols)
    unit = (raw >> np.uint64(11)).astype(np.float64) * _U53
    scale = math.sqrt(3.0) / math.sqrt(fan_in)
    return ((unit * 2.0 - 1.0) * scale).astype(np.float32).reshape(rows, cols)


def generate_fixture(config: ModelConfig, seed: int, quantize: bool = True,
                     predictor_rank: int | None = None) -> WeightContainer:
    """Build a complete random model in memory and return it as an opened container.

    Identical ``(config, seed, quantize, predictor_rank)`` always produce
    byte-identical containers.
    """
    from .weightstore import build_fixture_bytes, open_container

    return open_container(build_fixture_bytes(config, seed, quantize, predictor_rank))
