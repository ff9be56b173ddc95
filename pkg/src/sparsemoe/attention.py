"""NoPE/RoPE hybrid grouped-query attention over per-layer KV caches.

Windowed (SwaRope) layers keep a ring of ``window_size`` slots, position ``p`` living
in slot ``p % window_size``; global (NopeGlobal) layers keep every position up to
``max_context`` and never rotate queries or keys.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .core import LayerKind, ModelConfig, layer_kind
from .errors import RangeError, ShapeError, StateError


@dataclass(frozen=True)
class RopeParams:
    base: float
    head_dim: int

    def __post_init__(self):
        if self.head_dim % 2:
            raise ShapeError(f"rotary embedding needs an even head_dim, got {self.head_dim}")

    @cached_property
    def inv_freq(self) -> np.ndarray:
        j = np.arange(self.head_dim // 2, dtype=np.float64)
        return self.base ** (-2.0 * j / self.head_dim)


def rope_apply(x: np.ndarray, position: int, params: RopeParams) -> np.ndarray:
    """Rotate adjacent pairs ``(x[2j], x[2j+1])`` by ``position * inv_freq[j]``.

    ``x`` may carry leading head axes; the last axis must be ``head_dim``.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.shape[-1] % 2:
        raise ShapeError(f"rotary embedding needs an even head_dim, got {x.shape[-1]}")
    if x.shape[-1] != params.head_dim:
        raise ShapeError(f"head vector of {x.shape[-1]} elements, params for {params.head_dim}")
    angle = position * params.inv_freq
    cos = np.cos(angle).astype(np.float32)
    sin = np.sin(angle).astype(np.float32)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


@dataclass
class LayerKV:
    kind: LayerKind
    capacity: int
    keys: np.ndarray  # (kv_heads, capacity, head_dim)
    values: np.ndarray
    cursor: int = 0

    @classmethod
    def empty(cls, kind: LayerKind, capacity: int, kv_heads: int, head_dim: int) -> LayerKV:
        shape = (kv_heads, capacity, head_dim)
        return cls(kind, capacity, np.zeros(shape, np.float32), np.zeros(shape, np.float32))

    def slot(self, position: int) -> int:
        return position % self.capacity

    def positions_held(self) -> list[int]:
        """Position stored in each slot, -1 for never-written slots."""
        held = [-1] * self.capacity
        for p in range(max(0, self.cursor - self.capacity), self.cursor):
            held[self.slot(p)] = p
        return held


@dataclass
class KVCache:
    """Per-layer key/value stores for one decode stream."""

    config: ModelConfig
    layers: list[LayerKV]
    _undo: list[tuple[int, int, np.ndarray, np.ndarray]] | None = field(default=None, repr=False)

    @classmethod
    def for_config(cls, config: ModelConfig) -> KVCache:
        layers = []
        for i in range(config.num_layers):
            kind = layer_kind(i, config)
            cap = config.window_size if kind is LayerKind.SwaRope else config.max_context
            layers.append(LayerKV.empty(kind, cap, config.num_kv_heads, config.head_dim))
        return cls(config, layers)

    @property
    def total_slots(self) -> int:
        return sum(layer.capacity for layer in self.layers)

    @property
    def nbytes(self) -> int:
        return sum(layer.keys.nbytes + layer.values.nbytes for layer in self.layers)

    def begin(self) -> None:
        """Start recording appends so a failed step can be undone with ``rollback``."""
        self._undo = []

    def commit(self) -> None:
        self._undo = None

    def rollback(self) -> None:
        if self._undo is None:
            return
        for layer_index, slot, old_k, old_v in reversed(self._undo):
            layer = self.layers[layer_index]
            layer.keys[:, slot] = old_k
            layer.values[:, slot] = old_v
            layer.cursor -= 1
        self._undo = None


def kv_append(cache: KVCache, layer_index: int, k: np.ndarray, v: np.ndarray, position: int) -> KVCache:
    layer = cache.layers[layer_index]
    if position != layer.cursor:
        raise StateError(f"layer {layer_index}: append at position {position}, cursor is {layer.cursor}")
    if layer.kind is LayerKind.NopeGlobal and position >= layer.capacity:
        raise RangeError(f"position {position} exceeds max_context {layer.capacity}")
    slot = layer.slot(position)
    if cache._undo is not None:
        cache._undo.append((layer_index, slot, layer.keys[:, slot].copy(), layer.values[:, slot].copy()))
    layer.keys[:, slot] = k
    layer.values[:, slot] = v
    layer.cursor += 1
    return cache


def attended_positions(kind: LayerKind, position: int, window_size: int) -> range:
    if kind is LayerKind.SwaRope:
        return range(max(0, position - window_size + 1), position + 1)
    return range(0, position + 1)


def attend(layer_index: int, q: np.ndarray, cache: KVCache, position: int) -> np.ndarray:
    """Causal GQA softmax attention of ``q`` (q_heads, head_dim) against the layer's cache."""
    layer = cache.layers[layer_index]
    cfg = cache.config
    if position >= layer.cursor:
        raise StateError(f"layer {layer_index}: attend at {position} but only {layer.cursor} tokens cached")
    if layer.kind is LayerKind.SwaRope and position != layer.cursor - 1:
        raise StateError(f"layer {layer_index}: ring slots for position {position} already overwritten")
    q_heads, head_dim = q.shape
    kv_heads = layer.keys.shape[0]
    if q_heads % kv_heads:
        raise ShapeError(f"{q_heads} query heads cannot share {kv_heads} kv heads")
    positions = attended_positions(layer.kind, position, cfg.window_size)
    slots = np.fromiter((layer.slot(p) for p in positions), dtype=np.intp, count=len(positions))
    group = q_heads // kv_heads
    keys = layer.keys[:, slots]  # (kv_heads, T, head_dim)
    values = layer.values[:, slots]
    qg = q.reshape(kv_heads, group, head_dim)
    scores = np.einsum("hgd,htd->hgt", qg, keys) * np.float32(1.0 / np.sqrt(head_dim))
    scores -= scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    out = np.einsum("hgt,htd->hgd", probs, values)
    return out.reshape(q_heads, head_dim).astype(np.float32)


@dataclass
class AttentionWeights:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    o: np.ndarray


def attention_block(layer_index: int, x: np.ndarray, weights: AttentionWeights, cache: KVCache,
                    position: int, rope: RopeParams) -> np.ndarray:
    """Project, rotate (SWA layers only), append to the cache and attend for one token."""
    cfg = cache.config
    q = (weights.q @ x).reshape(cfg.num_q_heads, cfg.head_dim)
    k = (weights.k @ x).reshape(cfg.num_kv_heads, cfg.head_dim)
    v = (weights.v @ x).reshape(cfg.num_kv_heads, cfg.head_dim)
    if cache.layers[layer_index].kind is LayerKind.SwaRope:
        q = rope_apply(q, position, rope)
        k = rope_apply(k, position, rope)
    kv_append(cache, layer_index, k, v, position)
    out = attend(layer_index, q, cache, position)
    return (weights.o @ out.reshape(-1)).astype(np.float32)
