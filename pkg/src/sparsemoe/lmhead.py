"""Sparse LM head: a low-rank row predictor picks candidate vocabulary rows and only
those logits are computed."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import tensor_key
from .errors import ConfigError, ShapeError

SUBSPACE_ITERATIONS = 8
DEFAULT_TOP_M = 64


@dataclass
class RowPredictor:
    left: np.ndarray  # (rank, hidden_dim)
    right: np.ndarray  # (vocab_size, rank)
    top_m: int = DEFAULT_TOP_M
    threshold: float = math.inf

    def __post_init__(self):
        rank, _ = self.left.shape
        if self.right.shape[1] != rank:
            raise ShapeError(f"predictor factors disagree on rank: {self.left.shape} vs {self.right.shape}")
        if self.top_m < 1:
            raise ConfigError("top_m must be >= 1")

    @property
    def rank(self) -> int:
        return self.left.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.right.shape[0]

    def scores(self, hidden: np.ndarray) -> np.ndarray:
        return self.right @ (self.left @ hidden)


def build_predictor(head: np.ndarray, rank: int, seed: int = 0, top_m: int = DEFAULT_TOP_M,
                    threshold: float = math.inf) -> RowPredictor:
    """Rank-``rank`` sketch of ``head`` by seeded subspace iteration.

    ``left`` holds an orthonormal basis ``Q^T`` of the dominant right singular
    subspace, ``right = head @ Q``, so the predicted scores are ``head @ Q Q^T h``.
    """
    head = np.asarray(head, dtype=np.float32)
    vocab, hidden = head.shape
    if not 1 <= rank <= min(hidden, vocab):
        raise ConfigError(f"rank {rank} outside [1, min(hidden={hidden}, vocab={vocab})]")
    a = head.astype(np.float64)
    start = np.random.Generator(np.random.Philox(key=tensor_key(seed, "lmhead.predictor.start")))
    q, _ = np.linalg.qr(start.standard_normal((hidden, rank)))
    for _ in range(SUBSPACE_ITERATIONS):
        z, _ = np.linalg.qr(a @ q)
        q, _ = np.linalg.qr(a.T @ z)
    left = q.T.astype(np.float32)
    right = (a @ q).astype(np.float32)
    return RowPredictor(np.ascontiguousarray(left), np.ascontiguousarray(right), top_m, threshold)


def predict_rows(predictor: RowPredictor, hidden: np.ndarray) -> np.ndarray:
    """Rows scoring at least the threshold, unioned with the ``top_m`` best; sorted ids."""
    scores = predictor.scores(hidden)
    m = min(predictor.top_m, len(scores))
    best = np.argpartition(-scores, m - 1)[:m] if m < len(scores) else np.arange(len(scores))
    mask = scores >= predictor.threshold
    mask[best] = True
    return np.flatnonzero(mask)


@dataclass
class SparseLogits:
    active_ids: np.ndarray
    values: np.ndarray
    vocab_size: int
    fill: float = -math.inf
    dot_products: int = field(default=0)

    def to_dense(self) -> np.ndarray:
        out = np.full(self.vocab_size, self.fill, dtype=np.float32)
        out[self.active_ids] = self.values
        return out

    def argmax(self) -> int:
        """Greedy token over the active rows only, regardless of the fill value."""
        return int(self.active_ids[int(np.argmax(self.values))])


def sparse_logits(head: np.ndarray, hidden: np.ndarray, candidates: np.ndarray,
                  zero_fill: bool = False) -> SparseLogits:
    """Dot products for the candidate rows only; other logits take the fill value.

    The default fill is -inf so inactive rows drop out of softmax sampling;
    ``zero_fill`` reproduces literal zero filling for compatibility.
    """
    ids = np.unique(np.asarray(candidates, dtype=np.intp))
    if len(ids) and (ids[0] < 0 or ids[-1] >= head.shape[0]):
        raise ShapeError("candidate row id out of range")
    values = (head[ids] @ hidden).astype(np.float32)
    return SparseLogits(ids, values, head.shape[0], 0.0 if zero_fill else -math.inf, dot_products=len(ids))


def dense_logits(head: np.ndarray, hidden: np.ndarray) -> SparseLogits:
    values = (head @ hidden).astype(np.float32)
    return SparseLogits(np.arange(head.shape[0]), values, head.shape[0], dot_products=head.shape[0])
