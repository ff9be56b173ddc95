"""Offline statistics over decode traces: expert activation frequencies, per-expert
neuron sparsity distributions, and the group-partitioned load-balance loss."""

from __future__ import annotations

import json
import warnings
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import TraceParseError


@dataclass
class ActivationStats:
    counts: np.ndarray  # (num_layers, num_experts)
    total_tokens: int
    top_k: int

    @property
    def frequency(self) -> np.ndarray:
        """Fraction of tokens that routed to each expert, normalized per layer."""
        if self.total_tokens == 0:
            return np.zeros_like(self.counts, dtype=np.float64)
        return self.counts / self.total_tokens

    def table(self, sep: str = "\t") -> str:
        lines = [sep.join(("layer", "expert", "frequency"))]
        freq = self.frequency
        for layer, expert in np.ndindex(freq.shape):
            lines.append(sep.join((str(layer), str(expert), f"{freq[layer, expert]:.6f}")))
        return "\n".join(lines) + "\n"

    def fraction_below(self, threshold: float) -> float:
        return float(np.mean(self.frequency < threshold))


QUANTILE_NAMES = ("min", "q1", "median", "q3", "max")


def five_numbers(samples: Sequence[float]) -> tuple[float, ...]:
    a = np.asarray(samples, dtype=np.float64)
    return tuple(float(v) for v in np.quantile(a, [0.0, 0.25, 0.5, 0.75, 1.0]))


@dataclass
class SparsityStats:
    """Per-invocation inactive-neuron fractions, kept whole so quantiles are exact."""

    samples: dict[tuple[int, int], list[float]] = field(default_factory=dict)

    def add(self, layer: int, expert: int, inactive_fraction: float) -> None:
        self.samples.setdefault((layer, expert), []).append(inactive_fraction)

    def merge(self, other: SparsityStats) -> SparsityStats:
        for key, vals in other.samples.items():
            self.samples.setdefault(key, []).extend(vals)
        return self

    def quantiles(self) -> dict[tuple[int, int], tuple[float, ...]]:
        return {key: five_numbers(vals) for key, vals in sorted(self.samples.items())}

    def count(self, layer: int, expert: int) -> int:
        return len(self.samples.get((layer, expert), ()))

    def layer_samples(self, layer: int) -> list[float]:
        return [v for (lay, _), vals in self.samples.items() if lay == layer for v in vals]

    def layer_quantiles(self) -> dict[int, tuple[float, ...]]:
        layers = sorted({lay for lay, _ in self.samples})
        return {lay: five_numbers(self.layer_samples(lay)) for lay in layers}

    def table(self, sep: str = "\t") -> str:
        lines = [sep.join(("layer", "expert", "count", *QUANTILE_NAMES))]
        for (layer, expert), q in self.quantiles().items():
            lines.append(sep.join((str(layer), str(expert), str(self.count(layer, expert)),
                                   *(f"{v:.6f}" for v in q))))
        return "\n".join(lines) + "\n"


def accumulate_stats(lines: Iterable[str], num_layers: int | None = None, num_experts: int | None = None,
                     top_k: int | None = None) -> tuple[ActivationStats, SparsityStats]:
    """Fold an engine trace (JSON lines) into activation counts and sparsity samples.

    Shape parameters default to the trace header. Several traces may be chained
    into one iterable; repeated headers must agree.
    """
    counts = None
    tokens = 0
    sparsity = SparsityStats()
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceParseError(f"invalid JSON ({exc.msg})", lineno) from None
        if not isinstance(rec, dict):
            raise TraceParseError("record is not an object", lineno)
        if "header" in rec:
            hdr = rec["header"]
            num_layers = num_layers or hdr.get("num_layers")
            num_experts = num_experts or hdr.get("num_experts")
            top_k = top_k or hdr.get("top_k")
            continue
        if "summary" in rec:
            continue
        if counts is None:
            if not (num_layers and num_experts):
                raise TraceParseError("step record before any header; pass num_layers/num_experts", lineno)
            counts = np.zeros((num_layers, num_experts), dtype=np.int64)
        try:
            layers = rec["layers"]
            for lr in layers:
                layer = int(lr["layer"])
                experts = lr["experts"]
                ratios = lr.get("active_ratio") or []
                for j, e in enumerate(experts):
                    counts[layer, int(e)] += 1
                    if j < len(ratios):
                        sparsity.add(layer, int(e), 1.0 - float(ratios[j]))
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise TraceParseError(f"malformed step record: {exc!r}", lineno) from None
        if len(layers) != num_layers:
            raise TraceParseError(f"{len(layers)} layer records, expected {num_layers}", lineno)
        tokens += 1
    if counts is None:
        counts = np.zeros((num_layers or 0, num_experts or 0), dtype=np.int64)
    return ActivationStats(counts, tokens, top_k or 0), sparsity


@dataclass
class BalanceLoss:
    per_group: dict[int, float]
    mean: float


def dp_group_balance_loss(assignments: Sequence[Sequence[int]], probabilities: np.ndarray,
                          group_labels: Sequence[int], num_experts: int) -> BalanceLoss:
    """Auxiliary load-balance loss ``N * sum_i f_i * p_i`` evaluated inside each group.

    ``f_i`` is the share of the group's routing slots taken by expert ``i`` and
    ``p_i`` the group's mean router probability for it; uniform routing scores 1.
    Groups without tokens are dropped from the mean with a warning.
    """
    assign = np.asarray(assignments, dtype=np.int64)
    if assign.ndim == 1:
        assign = assign[:, None]
    probs = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(group_labels, dtype=np.int64)
    if not (len(assign) == len(probs) == len(labels)):
        raise ValueError("assignments, probabilities and group_labels differ in length")
    if probs.shape[1:] != (num_experts,):
        raise ValueError(f"probabilities must have {num_experts} columns")
    top_k = assign.shape[1]
    num_groups = int(labels.max()) + 1 if len(labels) else 0
    per_group: dict[int, float] = {}
    for g in range(num_groups):
        rows = labels == g
        n = int(rows.sum())
        if n == 0:
            warnings.warn(f"group {g} has no tokens; excluded from the mean", RuntimeWarning, stacklevel=2)
            continue
        f = np.bincount(assign[rows].ravel(), minlength=num_experts) / (top_k * n)
        p = probs[rows].mean(axis=0)
        per_group[g] = float(num_experts * np.dot(f, p))
    mean = float(np.mean(list(per_group.values()))) if per_group else float("nan")
    return BalanceLoss(per_group, mean)


def neuron_sparsity_report(container, corpus: bytes, chunk: int = 128) -> SparsityStats:
    """Run ``corpus`` through the in-memory model and record, for every routed expert
    invocation, the fraction of gate pre-activations that are <= 0."""
    from .engine import Engine, GenerationParams

    stats = SparsityStats()
    engine = Engine(container, GenerationParams(sparse_ffn=True))
    ctx = container.config.max_context
    ids = list(corpus)
    for start in range(0, len(ids), min(chunk, ctx)):
        state = engine.new_state()
        for tok in ids[start:start + min(chunk, ctx)]:
            out = engine.decode_step(state, tok)
            for rec in out.layers:
                for e, ratio in zip(rec.experts, rec.active_ratio):
                    stats.add(rec.layer, e, 1.0 - ratio)
    return stats
