"""Shared cross-layer expert cache and the fetch pipeline that feeds it.

Two pipelines implement the same contract. ``VirtualPipeline`` runs on a
deterministic virtual clock: each fetch occupies one of ``fetch_units`` storage
channels for ``fixed_ns + per_byte_ns * nbytes`` and the compute stream stalls only
when it awaits a fetch whose completion time lies in its future.
``ThreadedPipeline`` does the same with real threads and wall-clock time.
"""

from __future__ import annotations

import itertools
import threading
import time
from collections import OrderedDict
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

from .errors import CapacityError, OvercommitError, StateError
from .moe import ExpertWeights
from .weightstore import WeightContainer, fetch_expert_segment


class ExpertKey(NamedTuple):
    layer: int
    expert: int


@dataclass
class CacheCounters:
    lookups: int = 0
    hits: int = 0
    misses: int = 0
    evictions: int = 0
    fetches: int = 0
    bytes_read: int = 0
    stall_ns: int = 0
    peak_resident_bytes: int = 0

    @property
    def hit_rate(self) -> float:
        return self.hits / self.lookups if self.lookups else 0.0


@dataclass
class _Entry:
    weights: ExpertWeights
    nbytes: int
    pins: int = 0


class ExpertCache:
    """Byte-bounded strict-LRU cache keyed by (layer, expert), with pin counts.

    All methods are atomic with respect to each other.
    """

    def __init__(self, capacity_bytes: int):
        if capacity_bytes < 0:
            raise CapacityError("capacity_bytes must be non-negative")
        self.capacity_bytes = capacity_bytes
        self.counters = CacheCounters()
        self._entries: OrderedDict[ExpertKey, _Entry] = OrderedDict()
        self._resident = 0
        self._lock = threading.RLock()

    def __contains__(self, key: ExpertKey) -> bool:
        with self._lock:
            return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def resident_bytes(self) -> int:
        return self._resident

    def recency(self) -> list[ExpertKey]:
        """Resident keys from least to most recently used."""
        with self._lock:
            return list(self._entries)

    def pin_count(self, key: ExpertKey) -> int:
        with self._lock:
            entry = self._entries.get(key)
            return entry.pins if entry else 0

    def lookup(self, key: ExpertKey) -> ExpertWeights | None:
        with self._lock:
            self.counters.lookups += 1
            entry = self._entries.get(key)
            if entry is None:
                self.counters.misses += 1
                return None
            self.counters.hits += 1
            self._entries.move_to_end(key)
            return entry.weights

    def insert(self, key: ExpertKey, weights: ExpertWeights, nbytes: int | None = None) -> list[ExpertKey]:
        """Insert as most recently used, evicting LRU unpinned entries to make room."""
        size = weights.nbytes if nbytes is None else nbytes
        if size > self.capacity_bytes:
            raise CapacityError(f"entry of {size} bytes exceeds cache capacity {self.capacity_bytes}")
        with self._lock:
            pins = 0
            old = self._entries.pop(key, None)
            if old is not None:
                self._resident -= old.nbytes
                pins = old.pins
            need = self._resident + size - self.capacity_bytes
            if need > 0:
                reclaimable = sum(e.nbytes for e in self._entries.values() if e.pins == 0)
                if reclaimable < need:
                    if old is not None:
                        self._entries[key] = old
                        self._resident += old.nbytes
                    raise OvercommitError(
                        f"cannot fit {size} bytes: {self._resident} resident, "
                        f"only {reclaimable} reclaimable (raise cache capacity above the pinned working set)"
                    )
            evicted = []
            for victim in list(self._entries):
                if self._resident + size <= self.capacity_bytes:
                    break
                entry = self._entries[victim]
                if entry.pins:
                    continue
                del self._entries[victim]
                self._resident -= entry.nbytes
                evicted.append(victim)
            self.counters.evictions += len(evicted)
            self._entries[key] = _Entry(weights, size, pins)
            self._resident += size
            self.counters.peak_resident_bytes = max(self.counters.peak_resident_bytes, self._resident)
            return evicted

    def pin(self, key: ExpertKey) -> None:
        with self._lock:
            entry = self._entries.get(key)
            if entry is None:
                raise StateError(f"cannot pin non-resident expert {key}")
            entry.pins += 1

    def unpin(self, key: ExpertKey) -> None:
        with self._lock:
            entry = self._entries.get(key)
            if entry is None or entry.pins == 0:
                raise StateError(f"unpin of unpinned expert {key}")
            entry.pins -= 1


class Event(NamedTuple):
    seq: int
    kind: str
    step: int
    layer: int
    expert: int


class EventLog:
    """Totally ordered record of pipeline events, shared by engine and storage."""

    def __init__(self):
        self.events: list[Event] = []
        self._seq = itertools.count()
        self._lock = threading.Lock()

    def record(self, kind: str, step: int, layer: int, expert: int = -1) -> None:
        with self._lock:
            self.events.append(Event(next(self._seq), kind, step, layer, expert))

    def of_kind(self, kind: str) -> list[Event]:
        with self._lock:
            return [e for e in self.events if e.kind == kind]


@dataclass
class StorageModel:
    """Expert segment reads from a container, with injectable per-fetch latency."""

    container: WeightContainer
    fixed_ns: int = 0
    per_byte_ns: float = 0.0
    events: EventLog | None = None

    def __post_init__(self):
        if self.fixed_ns < 0 or self.per_byte_ns < 0:
            raise ValueError("injected latencies must be non-negative")

    def segment_nbytes(self, key: ExpertKey) -> int:
        return self.container.expert_nbytes(*key)

    def latency_ns(self, nbytes: int) -> int:
        return int(self.fixed_ns + round(self.per_byte_ns * nbytes))

    def read(self, key: ExpertKey, step: int = -1) -> ExpertWeights:
        if self.events is not None:
            self.events.record("read", step, key.layer, key.expert)
        return fetch_expert_segment(self.container, *key)


@dataclass
class VirtualClock:
    now_ns: int = 0

    def advance(self, ns: int) -> None:
        self.now_ns += int(ns)

    def advance_to(self, t_ns: int) -> None:
        self.now_ns = max(self.now_ns, int(t_ns))


@dataclass
class Ticket:
    """Handle joining every fetch for one (step, layer) routing decision."""

    step: int
    layer: int
    expert_ids: tuple[int, ...]
    ready: dict[int, ExpertWeights] = field(default_factory=dict)
    pending: dict[int, object] = field(default_factory=dict)
    pinned: list[ExpertKey] = field(default_factory=list)
    hits: int = 0
    fetched_bytes: int = 0
    stall_ns: int = 0
    released: bool = False
    error: BaseException | None = None

    @property
    def complete(self) -> bool:
        return not self.pending


class FetchPipeline:
    """Common bookkeeping; subclasses decide how a miss is fetched and awaited."""

    def __init__(self, cache: ExpertCache, storage: StorageModel, events: EventLog | None = None):
        self.cache = cache
        self.storage = storage
        self.events = events if events is not None else storage.events
        self._tickets: dict[tuple[int, int], Ticket] = {}
        self._lock = threading.Lock()

    def _log(self, kind: str, step: int, layer: int, expert: int = -1) -> None:
        if self.events is not None:
            self.events.record(kind, step, layer, expert)

    def prefetch_issue(self, layer: int, expert_ids, step: int) -> Ticket:
        """Pin resident experts and enqueue fetches for the rest. Idempotent per (step, layer)."""
        with self._lock:
            existing = self._tickets.get((step, layer))
            if existing is not None and not existing.released:
                return existing
            ticket = Ticket(step, layer, tuple(expert_ids))
            self._tickets[(step, layer)] = ticket
        self._log("issue", step, layer)
        for eid in ticket.expert_ids:
            key = ExpertKey(layer, eid)
            with self.cache._lock:
                weights = self.cache.lookup(key)
                if weights is not None:
                    self.cache.pin(key)
                    ticket.pinned.append(key)
                    ticket.ready[eid] = weights
                    ticket.hits += 1
                    continue
            self._start_fetch(ticket, key)
        return ticket

    def _arrive(self, ticket: Ticket, key: ExpertKey, weights: ExpertWeights, nbytes: int) -> None:
        with self.cache._lock:
            self.cache.insert(key, weights, nbytes)
            self.cache.pin(key)
            ticket.pinned.append(key)
            self.cache.counters.fetches += 1
            self.cache.counters.bytes_read += nbytes
        ticket.fetched_bytes += nbytes

    def wait(self, ticket: Ticket, expert_id: int) -> ExpertWeights:
        if ticket.released:
            raise StateError("ticket already released")
        if expert_id in ticket.ready:
            return ticket.ready[expert_id]
        if expert_id not in ticket.pending:
            raise StateError(f"expert {expert_id} was not part of this ticket")
        try:
            stall = self._wait_pending(ticket, expert_id)
        except BaseException as exc:
            ticket.error = exc
            raise
        ticket.stall_ns += stall
        with self.cache._lock:
            self.cache.counters.stall_ns += stall
        return ticket.ready[expert_id]

    def await_experts(self, ticket: Ticket) -> dict[int, ExpertWeights]:
        return {eid: self.wait(ticket, eid) for eid in ticket.expert_ids}

    def release(self, ticket: Ticket) -> None:
        """Unpin everything the ticket pinned; call once the token's MoE output is computed."""
        if ticket.released:
            return
        self._drain(ticket)
        for key in ticket.pinned:
            self.cache.unpin(key)
        ticket.pinned.clear()
        ticket.released = True
        with self._lock:
            if self._tickets.get((ticket.step, ticket.layer)) is ticket:
                del self._tickets[(ticket.step, ticket.layer)]

    def close(self) -> None:
        pass

    def _start_fetch(self, ticket: Ticket, key: ExpertKey) -> None:
        raise NotImplementedError

    def _wait_pending(self, ticket: Ticket, expert_id: int) -> int:
        raise NotImplementedError

    def _drain(self, ticket: Ticket) -> None:
        ticket.pending.clear()


class VirtualPipeline(FetchPipeline):
    def __init__(self, cache: ExpertCache, storage: StorageModel, clock: VirtualClock,
                 fetch_units: int = 1, events: EventLog | None = None):
        super().__init__(cache, storage, events)
        if fetch_units < 1:
            raise ValueError("fetch_units must be >= 1")
        self.clock = clock
        self._unit_free = [0] * fetch_units

    def _start_fetch(self, ticket: Ticket, key: ExpertKey) -> None:
        nbytes = self.storage.segment_nbytes(key)
        unit = min(range(len(self._unit_free)), key=self._unit_free.__getitem__)
        start = max(self.clock.now_ns, self._unit_free[unit])
        done = start + self.storage.latency_ns(nbytes)
        self._unit_free[unit] = done
        try:
            result = self.storage.read(key, ticket.step)
        except Exception as exc:  # surfaced when the expert is awaited
            result = exc
        ticket.pending[key.expert] = (done, result, nbytes)

    def _wait_pending(self, ticket: Ticket, expert_id: int) -> int:
        done, weights, nbytes = ticket.pending.pop(expert_id)
        stall = max(0, done - self.clock.now_ns)
        self.clock.advance_to(done)
        if isinstance(weights, Exception):
            raise weights
        self._arrive(ticket, ExpertKey(ticket.layer, expert_id), weights, nbytes)
        ticket.ready[expert_id] = weights
        return stall


class ThreadedPipeline(FetchPipeline):
    def __init__(self, cache: ExpertCache, storage: StorageModel, fetch_units: int = 2,
                 events: EventLog | None = None):
        super().__init__(cache, storage, events)
        self._pool = ThreadPoolExecutor(max_workers=fetch_units, thread_name_prefix="fetch")

    def _fetch(self, ticket: Ticket, key: ExpertKey) -> ExpertWeights:
        nbytes = self.storage.segment_nbytes(key)
        delay = self.storage.latency_ns(nbytes)
        if delay:
            time.sleep(delay / 1e9)
        weights = self.storage.read(key, ticket.step)
        self._arrive(ticket, key, weights, nbytes)
        return weights

    def _start_fetch(self, ticket: Ticket, key: ExpertKey) -> None:
        ticket.pending[key.expert] = self._pool.submit(self._fetch, ticket, key)

    def _wait_pending(self, ticket: Ticket, expert_id: int) -> int:
        fut: Future = ticket.pending[expert_id]
        stall = 0
        if not fut.done():
            t0 = time.perf_counter_ns()
            fut.exception()
            stall = time.perf_counter_ns() - t0
        del ticket.pending[expert_id]
        ticket.ready[expert_id] = fut.result()
        return stall

    def _drain(self, ticket: Ticket) -> None:
        for fut in ticket.pending.values():
            fut.exception()
        ticket.pending.clear()

    def close(self) -> None:
        self._pool.shutdown(wait=True)
