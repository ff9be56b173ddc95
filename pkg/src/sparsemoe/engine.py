"""Decode loop wiring routing, attention, expert fetches, MoE and the LM head.

Per layer and token the order is fixed: normalize, route on the normalized
pre-attention state, issue expert fetches, attend, add the residual, normalize
again, await experts while computing them one by one, add the MoE residual.
"""

from __future__ import annotations

import itertools
import json
import math
import time
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from typing import TextIO

import numpy as np

from .attention import AttentionWeights, KVCache, RopeParams, attention_block
from .core import ModelConfig, rms_norm, softmax, tensor_key
from .errors import ConfigError, EngineError, RangeError
from .lmhead import RowPredictor, SparseLogits, dense_logits, predict_rows, sparse_logits
from .moe import ExpertWeights, RouterDecision, moe_forward, route
from .offload import (
    EventLog,
    ExpertCache,
    ExpertKey,
    FetchPipeline,
    StorageModel,
    ThreadedPipeline,
    Ticket,
    VirtualClock,
    VirtualPipeline,
)
from .weightstore import CountingSource, WeightContainer, fetch_expert_segment


class GenerationError(EngineError):
    def __init__(self, step: int, cause: BaseException):
        super().__init__(f"step {step}: {cause}")
        self.step = step
        self.cause = cause


@dataclass
class GenerationParams:
    max_tokens: int = 16
    temperature: float = 0.0
    seed: int = 0
    sparse_ffn: bool = True
    sparse_head: bool = False
    offload: bool = False
    cache_bytes: int = 0  # 0 means the one-token working set: top_k largest expert segments
    inject_latency: tuple[int, float] = (0, 0.0)
    prefetch: bool = True
    virtual_time: bool = False
    attention_ns: int = 20_000  # modeled compute cost per layer, virtual time only
    expert_ns: int = 5_000  # modeled compute cost per expert, virtual time only
    fetch_units: int = 1
    top_m: int = 64
    threshold: float = math.inf
    zero_fill: bool = False

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ConfigError("max_tokens must be >= 1")
        if not self.temperature >= 0:
            raise ConfigError("temperature must be >= 0")
        if self.cache_bytes < 0:
            raise ConfigError("cache_bytes must be >= 0")
        if self.fetch_units < 1:
            raise ConfigError("fetch_units must be >= 1")


@dataclass
class LayerWeights:
    attn_norm: np.ndarray
    attn: AttentionWeights
    router: np.ndarray
    ffn_norm: np.ndarray


@dataclass
class DecodeState:
    kv: KVCache
    position: int = 0
    step: int = 0


@dataclass
class LayerRecord:
    layer: int
    experts: list[int]
    gates: list[float]
    hits: int | None
    stall_ns: int
    active_ratio: list[float]


@dataclass
class StepOutput:
    hidden: np.ndarray
    logits: SparseLogits
    decisions: list[RouterDecision]
    layers: list[LayerRecord]
    latency_ns: int


@dataclass
class DecodeTrace:
    header: dict
    steps: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def lines(self) -> Iterator[str]:
        yield json.dumps({"header": self.header})
        for rec in self.steps:
            yield json.dumps(rec)
        yield json.dumps({"summary": self.summary})

    def write(self, fh: TextIO) -> None:
        for line in self.lines():
            fh.write(line + "\n")


@dataclass
class GenerationResult:
    tokens: list[int]
    trace: DecodeTrace

    def text(self) -> str:
        return "".join(chr(t) if 32 <= t < 127 or t in (9, 10) else f"<{t}>" for t in self.tokens)


class _TicketExperts(Mapping):
    """Expert mapping that awaits each expert only when MoE asks for it.

    Asking for expert ``i+1`` means expert ``i`` has been computed, so its modeled
    compute cost is charged to the virtual clock first; later fetches overlap it.
    """

    def __init__(self, pipeline: FetchPipeline, ticket: Ticket, clock: VirtualClock | None, expert_ns: int):
        self.pipeline = pipeline
        self.ticket = ticket
        self.clock = clock
        self.expert_ns = expert_ns
        self.served = 0

    def _charge(self) -> None:
        if self.clock is not None and self.served:
            self.clock.advance(self.expert_ns)

    def __getitem__(self, eid: int) -> ExpertWeights:
        self._charge()
        weights = self.pipeline.wait(self.ticket, eid)
        self.served += 1
        return weights

    def finish(self) -> None:
        self._charge()
        self.served = 0

    def __iter__(self):
        return iter(self.ticket.expert_ids)

    def __len__(self):
        return len(self.ticket.expert_ids)


class Engine:
    """A loaded model plus the expert provider selected by ``params``."""

    def __init__(self, container: WeightContainer, params: GenerationParams | None = None):
        self.container = container
        self.config: ModelConfig = container.config
        self.params = params or GenerationParams()
        c, p = self.config, self.params
        self.embed = container.load("embed")
        self.layers = [
            LayerWeights(
                attn_norm=container.load_vector(f"layer.{i}.attn_norm"),
                attn=AttentionWeights(*(container.load(f"layer.{i}.attn.{m}") for m in "qkvo")),
                router=container.load(f"layer.{i}.router"),
                ffn_norm=container.load_vector(f"layer.{i}.ffn_norm"),
            )
            for i in range(c.num_layers)
        ]
        self.final_norm = container.load_vector("final_norm")
        self.head = container.load("lm_head")
        self.predictor = RowPredictor(
            container.load("lmhead.predictor.left"), container.load("lmhead.predictor.right"),
            top_m=p.top_m, threshold=p.threshold,
        )
        self.rope = RopeParams(c.rope_base, c.head_dim)
        self.events = EventLog()
        self.clock = VirtualClock() if p.virtual_time else None
        self.pipeline: FetchPipeline | None = None
        self.cache: ExpertCache | None = None
        self.resident: dict[ExpertKey, ExpertWeights] = {}
        if p.offload:
            self.reader = CountingSource(container.source)
            store = WeightContainer(c, container.format_version, container.index, self.reader,
                                    container.payload_start, container.checksum)
            fixed, per_byte = p.inject_latency
            self.storage = StorageModel(store, int(fixed), float(per_byte), self.events)
            self.cache = ExpertCache(p.cache_bytes or self.working_set_bytes())
            if self.clock is not None:
                self.pipeline = VirtualPipeline(self.cache, self.storage, self.clock, p.fetch_units, self.events)
            else:
                self.pipeline = ThreadedPipeline(self.cache, self.storage, p.fetch_units, self.events)
        else:
            self.resident = {
                ExpertKey(layer, e): fetch_expert_segment(container, layer, e)
                for layer in range(c.num_layers) for e in range(c.num_experts)
            }
        self._sampler = np.random.Generator(np.random.Philox(key=tensor_key(p.seed, "sampling")))

    def working_set_bytes(self) -> int:
        return self.config.top_k * self.container.max_expert_nbytes()

    def close(self) -> None:
        if self.pipeline is not None:
            self.pipeline.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def new_state(self) -> DecodeState:
        return DecodeState(KVCache.for_config(self.config))

    def _now(self) -> int:
        return self.clock.now_ns if self.clock is not None else time.perf_counter_ns()

    def decode_step(self, state: DecodeState, token: int) -> StepOutput:
        """Run one token through every layer; on failure the KV caches are rolled back."""
        c, p = self.config, self.params
        if not 0 <= token < c.vocab_size:
            raise RangeError(f"token {token} outside vocabulary of {c.vocab_size}")
        if state.position >= c.max_context:
            raise RangeError(f"context limit {c.max_context} reached")
        step, pos = state.step, state.position
        t0 = self._now()
        state.kv.begin()
        open_tickets: list[Ticket] = []
        decisions, records = [], []
        try:
            h = self.embed[token].copy()
            for i, lw in enumerate(self.layers):
                x = rms_norm(h, lw.attn_norm, c.norm_epsilon)
                decision = route(x, lw.router, c.top_k)
                self.events.record("route", step, i)
                ticket = None
                if self.pipeline is not None and p.prefetch:
                    ticket = self.pipeline.prefetch_issue(i, decision.expert_ids, step)
                    open_tickets.append(ticket)
                h = h + attention_block(i, x, lw.attn, state.kv, pos, self.rope)
                if self.clock is not None:
                    self.clock.advance(p.attention_ns)
                self.events.record("attn_done", step, i)
                x2 = rms_norm(h, lw.ffn_norm, c.norm_epsilon)
                if self.pipeline is not None and ticket is None:
                    ticket = self.pipeline.prefetch_issue(i, decision.expert_ids, step)
                    open_tickets.append(ticket)
                if ticket is not None:
                    experts = _TicketExperts(self.pipeline, ticket, self.clock, p.expert_ns)
                    out, ratios = moe_forward(x, x2, decision, experts, sparse=p.sparse_ffn)
                    experts.finish()
                    self.pipeline.release(ticket)
                    open_tickets.remove(ticket)
                    hits, stall = ticket.hits, ticket.stall_ns
                else:
                    experts = {e: self.resident[ExpertKey(i, e)] for e in decision.expert_ids}
                    out, ratios = moe_forward(x, x2, decision, experts, sparse=p.sparse_ffn)
                    if self.clock is not None:
                        self.clock.advance(p.expert_ns * len(experts))
                    hits, stall = None, 0
                h = h + out
                decisions.append(decision)
                records.append(LayerRecord(
                    i, list(decision.expert_ids), [float(g) for g in decision.gate_weights],
                    hits, stall, [float(r) for r in ratios],
                ))
            hf = rms_norm(h, self.final_norm, c.norm_epsilon)
            if p.sparse_head:
                logits = sparse_logits(self.head, hf, predict_rows(self.predictor, hf), p.zero_fill)
            else:
                logits = dense_logits(self.head, hf)
        except BaseException:
            state.kv.rollback()
            for ticket in open_tickets:
                try:
                    self.pipeline.release(ticket)
                except EngineError:
                    pass
            raise
        state.kv.commit()
        state.position += 1
        state.step += 1
        return StepOutput(hf, logits, decisions, records, self._now() - t0)

    def sample(self, logits: SparseLogits) -> int:
        if self.params.temperature == 0:
            return logits.argmax()
        probs = softmax(logits.values / np.float32(self.params.temperature)).astype(np.float64)
        return int(logits.active_ids[self._sampler.choice(len(probs), p=probs / probs.sum())])

    def generate(self, prompt: bytes | Sequence[int]) -> GenerationResult:
        """Byte-identity tokenization, sequential prefill, then ``max_tokens`` decode steps."""
        p, c = self.params, self.config
        prompt_ids = list(prompt)
        if not prompt_ids:
            raise ConfigError("empty prompt")
        total = len(prompt_ids) + p.max_tokens - 1
        if total > c.max_context:
            raise ConfigError(f"prompt + max_tokens needs {total} positions, max_context is {c.max_context}")
        trace = DecodeTrace(header={
            "num_layers": c.num_layers, "num_experts": c.num_experts, "top_k": c.top_k,
            "ffn_dim": c.ffn_dim, "vocab_size": c.vocab_size, "model_checksum": f"{self.container.checksum:016x}",
            "params": _jsonable(asdict(p)),
        })
        state = self.new_state()
        generated: list[int] = []
        feed = iter(prompt_ids)
        token = next(feed)
        latencies = []
        for step in itertools.count():
            phase = "prefill" if step < len(prompt_ids) else "decode"
            try:
                out = self.decode_step(state, token)
            except EngineError as exc:
                raise GenerationError(step, exc) from exc
            next_token = None
            if step >= len(prompt_ids) - 1:
                next_token = self.sample(out.logits)
                generated.append(next_token)
            latencies.append(out.latency_ns)
            trace.steps.append({
                "step": step, "phase": phase, "position": step, "token": token, "next_token": next_token,
                "layers": [asdict(r) for r in out.layers],
                "candidates": out.logits.dot_products, "latency_ns": out.latency_ns,
            })
            if len(generated) == p.max_tokens:
                break
            token = next_token if next_token is not None else next(feed)
        trace.summary = self._summary(latencies, state)
        return GenerationResult(generated, trace)

    def _summary(self, latencies: list[int], state: DecodeState) -> dict:
        total_ns = sum(latencies)
        summary = {
            "steps": len(latencies),
            "total_ns": total_ns,
            "tokens_per_s": len(latencies) / (total_ns / 1e9) if total_ns else math.inf,
            "kv_slots": state.kv.total_slots,
            "kv_bytes": state.kv.nbytes,
            "virtual_time": self.clock is not None,
        }
        if self.cache is not None:
            k = self.cache.counters
            summary.update(
                peak_resident_expert_bytes=k.peak_resident_bytes, cache_capacity_bytes=self.cache.capacity_bytes,
                lookups=k.lookups, hits=k.hits, misses=k.misses, hit_rate=k.hit_rate, evictions=k.evictions,
                fetches=k.fetches, bytes_read=k.bytes_read, stall_ns=k.stall_ns,
            )
        else:
            summary.update(peak_resident_expert_bytes=self.container.total_expert_nbytes(), stall_ns=0)
        return summary


def _jsonable(d: dict) -> dict:
    return {k: (None if isinstance(v, float) and math.isinf(v) else v) for k, v in d.items()}


def generate(container: WeightContainer, prompt: bytes | Sequence[int],
             params: GenerationParams) -> GenerationResult:
    with Engine(container, params) as engine:
        return engine.generate(prompt)


@dataclass
class BenchRow:
    sparse_ffn: bool
    offload: bool
    cache_bytes: int | None
    tokens_per_s: float
    hit_rate: float | None
    stall_ms: float
    steps: int


def benchmark(container: WeightContainer, prompt: bytes, base: GenerationParams,
              sparse_options: Sequence[bool] = (False, True), offload_options: Sequence[bool] = (False, True),
              cache_sizes: Sequence[int] = (0,)) -> list[BenchRow]:
    """Run each configuration sequentially; in-memory runs ignore ``cache_sizes``."""
    rows = []
    for sparse in sparse_options:
        for offload in offload_options:
            for cache in (cache_sizes if offload else (None,)):
                params = GenerationParams(**{**asdict(base), "sparse_ffn": sparse, "offload": offload,
                                             "cache_bytes": cache or 0})
                with Engine(container, params) as engine:
                    result = engine.generate(prompt)
                    s = result.trace.summary
                    rows.append(BenchRow(
                        sparse, offload, engine.cache.capacity_bytes if engine.cache else None,
                        s["tokens_per_s"], s.get("hit_rate"), s["stall_ns"] / 1e6, s["steps"],
                    ))
    return rows


def format_report(rows: Sequence[BenchRow]) -> str:
    header = f"{'sparse_ffn':>10} {'offload':>7} {'cache_bytes':>12} {'tokens/s':>10} {'hit_rate':>8} {'stall_ms':>9}"
    lines = [header, "-" * len(header)]
    for r in rows:
        cache = "-" if r.cache_bytes is None else str(r.cache_bytes)
        hit = "-" if r.hit_rate is None else f"{r.hit_rate:.3f}"
        lines.append(f"{str(r.sparse_ffn):>10} {str(r.offload):>7} {cache:>12} {r.tokens_per_s:>10.2f} "
                     f"{hit:>8} {r.stall_ms:>9.3f}")
    return "\n".join(lines)


def cache_report(summary: dict) -> str:
    if "hit_rate" not in summary:
        return "experts fully resident (no offload)"
    return (f"hit rate {summary['hit_rate']:.3f} ({summary['hits']}/{summary['lookups']}), "
            f"bytes read {summary['bytes_read']}, stall {summary['stall_ns'] / 1e6:.3f} ms, "
            f"evictions {summary['evictions']}")
