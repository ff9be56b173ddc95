"""Top-k routing and ReGLU experts, with a neuron-sparse fast path and a dense oracle."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field

import numba
import numpy as np

from .core import softmax
from .errors import ConfigError, ShapeError, StateError


@dataclass
class ExpertWeights:
    gate: np.ndarray  # (ffn_dim, hidden_dim)
    up: np.ndarray  # (ffn_dim, hidden_dim)
    down: np.ndarray  # (hidden_dim, ffn_dim)
    down_t: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.gate = np.ascontiguousarray(self.gate, dtype=np.float32)
        self.up = np.ascontiguousarray(self.up, dtype=np.float32)
        self.down = np.ascontiguousarray(self.down, dtype=np.float32)
        f, h = self.gate.shape
        if self.up.shape != (f, h) or self.down.shape != (h, f):
            raise ShapeError(
                f"inconsistent expert shapes gate={self.gate.shape} up={self.up.shape} down={self.down.shape}"
            )
        # Row-major copy of down^T so an active neuron's output column is one contiguous row.
        self.down_t = np.ascontiguousarray(self.down.T)

    @property
    def hidden_dim(self) -> int:
        return self.gate.shape[1]

    @property
    def ffn_dim(self) -> int:
        return self.gate.shape[0]

    @property
    def nbytes(self) -> int:
        return self.gate.nbytes + self.up.nbytes + self.down.nbytes


@dataclass(frozen=True)
class RouterDecision:
    expert_ids: tuple[int, ...]
    gate_weights: np.ndarray
    full_probabilities: np.ndarray
    logits: np.ndarray


def route(pre_attention_hidden: np.ndarray, router_weights: np.ndarray, top_k: int) -> RouterDecision:
    num_experts, hidden = router_weights.shape
    if pre_attention_hidden.shape != (hidden,):
        raise ShapeError(f"router input {pre_attention_hidden.shape}, expected ({hidden},)")
    if not 1 <= top_k <= num_experts:
        raise ConfigError(f"top_k {top_k} outside [1, {num_experts}]")
    logits = (router_weights @ pre_attention_hidden).astype(np.float32)
    return decide(logits, top_k)


def decide(logits: np.ndarray, top_k: int) -> RouterDecision:
    """Top-k selection on raw router logits; ties go to the lower expert index."""
    logits = np.asarray(logits, dtype=np.float32)
    if not 1 <= top_k <= len(logits):
        raise ConfigError(f"top_k {top_k} outside [1, {len(logits)}]")
    chosen = np.sort(np.argsort(-logits, kind="stable")[:top_k])
    return RouterDecision(
        expert_ids=tuple(int(i) for i in chosen),
        gate_weights=softmax(logits[chosen]),
        full_probabilities=softmax(logits),
        logits=logits,
    )


def _check_input(x: np.ndarray, w: ExpertWeights) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if x.shape != (w.hidden_dim,):
        raise ShapeError(f"expert input {x.shape}, expected ({w.hidden_dim},)")
    return x


def expert_dense(x: np.ndarray, w: ExpertWeights) -> np.ndarray:
    """Reference ReGLU: ``down @ (relu(gate @ x) * (up @ x))``."""
    x = _check_input(x, w)
    g = w.gate @ x
    return w.down @ (np.maximum(g, np.float32(0.0)) * (w.up @ x))


@numba.njit(cache=True, fastmath=True, nogil=True)
def _sparse_up_down(up, down_t, x, g, active):  # pragma: no cover - compiled
    out = np.zeros(down_t.shape[1], dtype=np.float32)
    for i in active:
        u = np.float32(0.0)
        for j in range(x.shape[0]):
            u += up[i, j] * x[j]
        a = g[i] * u
        for j in range(out.shape[0]):
            out[j] += a * down_t[i, j]
    return out


def active_neurons(gate_preactivation: np.ndarray) -> np.ndarray:
    return np.flatnonzero(gate_preactivation > 0)


def expert_sparse(x: np.ndarray, w: ExpertWeights) -> tuple[np.ndarray, float]:
    """Evaluate the full gate projection, then only the up rows / down columns it activates.

    Returns the expert output and the activation ratio ``|{g > 0}| / ffn_dim``.
    """
    x = _check_input(x, w)
    g = w.gate @ x
    active = active_neurons(g)
    if len(active) == 0:
        return np.zeros(w.hidden_dim, dtype=np.float32), 0.0
    y = _sparse_up_down(w.up, w.down_t, x, g, active)
    return y, len(active) / w.ffn_dim


def moe_forward(pre_attention_hidden: np.ndarray, post_attention_hidden: np.ndarray,
                decision: RouterDecision, experts: Mapping[int, ExpertWeights],
                sparse: bool = True) -> tuple[np.ndarray, list[float]]:
    """Gate-weighted sum of the selected experts on the post-attention state.

    ``pre_attention_hidden`` is the router input the decision was derived from; it is
    accepted so callers pass both taps explicitly, and is not read again here.
    Returns the MoE output (residual not added) and one activation ratio per expert.
    """
    del pre_attention_hidden
    out = np.zeros_like(post_attention_hidden, dtype=np.float32)
    ratios = []
    for eid, weight in zip(decision.expert_ids, decision.gate_weights):
        w = experts.get(eid)
        if w is None:
            raise StateError(f"expert {eid} selected but its weights were not resolved")
        if sparse:
            y, ratio = expert_sparse(post_attention_hidden, w)
        else:
            g = w.gate @ post_attention_hidden
            y = w.down @ (np.maximum(g, np.float32(0.0)) * (w.up @ post_attention_hidden))
            ratio = float(np.count_nonzero(g > 0)) / w.ffn_dim
        out += weight * y
        ratios.append(ratio)
    return out, ratios
