"""Bit-exact model container with Q4 block-quantized tensors.

File layout (all integers little-endian)::

    magic            8 bytes   b"STMW0001"
    format_version   u32
    config_length    u32       followed by the UTF-8 ``key=value`` config block
    tensor_count     u32       followed by the index, sorted by name:
        name_length u16, name, dtype u8, rows u64, cols u64, offset u64, length u64
    zero padding up to the first 4096-byte boundary
    payload          non-expert tensors (64-byte aligned), then one contiguous
                     segment per (layer, expert) holding gate, up, down, each
                     starting on a 4096-byte boundary and padded to a multiple of 4096
    checksum         u64, first 8 bytes of BLAKE2b(digest_size=8) over every preceding byte

Offsets are absolute file offsets, so an expert segment can be read with a single
aligned ``pread``. A Q4 block is 18 bytes: a float16 scale followed by 16 bytes of
packed codes, element ``2i`` in the low nibble and ``2i+1`` in the high nibble of byte ``i``.
"""

from __future__ import annotations

import enum
import hashlib
import io
import os
import struct
import threading
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Protocol

import numpy as np

from .core import ModelConfig, fixture_values, require_valid
from .errors import ChecksumError, ContainerError, RangeError, ShapeError, StorageError
from .moe import ExpertWeights

MAGIC = b"STMW0001"
FORMAT_VERSION = 1
SEGMENT_ALIGN = 4096
TENSOR_ALIGN = 64
QK = 32

Q4_BLOCK = np.dtype([("scale", "<f2"), ("qs", "u1", (QK // 2,))])
assert Q4_BLOCK.itemsize == 18

EXPERT_MATRICES = ("gate", "up", "down")


class DType(enum.IntEnum):
    F32 = 0
    Q4 = 1


@dataclass(frozen=True)
class TensorRecord:
    name: str
    dtype: DType
    rows: int
    cols: int
    byte_offset: int
    byte_length: int

    @property
    def padded_length(self) -> int:
        if is_expert_tensor(self.name):
            return _align(self.byte_length, SEGMENT_ALIGN)
        return self.byte_length


@dataclass(frozen=True)
class TensorSpec:
    name: str
    rows: int
    cols: int
    dtype: DType
    fan_in: int

    @property
    def expert(self) -> bool:
        return is_expert_tensor(self.name)


def expert_tensor_name(layer: int, expert: int, matrix: str) -> str:
    return f"layer.{layer}.expert.{expert}.{matrix}"


def is_expert_tensor(name: str) -> bool:
    return ".expert." in name


def _align(n: int, a: int) -> int:
    return -(-n // a) * a


# -- Q4 blocks ---------------------------------------------------------------

def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + np.float32(0.5))


def quantize_q4(row: np.ndarray) -> np.ndarray:
    """Quantize the last axis of ``row`` into Q4 blocks (structured ``Q4_BLOCK`` array)."""
    x = np.asarray(row, dtype=np.float32)
    if x.shape[-1] % QK:
        raise ShapeError(f"Q4 needs a multiple of {QK} elements per row, got {x.shape[-1]}")
    lead = x.shape[:-1]
    blocks = x.reshape(-1, QK)
    pick = np.argmax(np.abs(blocks), axis=1)
    m = blocks[np.arange(len(blocks)), pick]
    # Codes reach -8 on m's side but only +7 on the other; widen the scale when an
    # opposite-sign element would otherwise clamp with more than half a step of error.
    opposite = np.where(blocks * m[:, None] < 0, np.abs(blocks), np.float32(0.0)).max(axis=1)
    magnitude = np.maximum(np.abs(m) / np.float32(8.0), opposite / np.float32(7.5))
    scale = -np.sign(m) * magnitude
    safe = np.where(scale == 0, np.float32(1.0), scale)
    codes = _round_half_away(blocks / safe[:, None]) + np.float32(8.0)
    codes = np.where(scale[:, None] == 0, np.float32(8.0), codes)
    codes = np.clip(codes, 0, 15).astype(np.uint8)
    out = np.empty(len(blocks), dtype=Q4_BLOCK)
    out["scale"] = scale.astype(np.float16)
    out["qs"] = codes[:, 0::2] | (codes[:, 1::2] << np.uint8(4))
    return out.reshape(*lead, x.shape[-1] // QK)


def dequantize_q4(blocks: np.ndarray) -> np.ndarray:
    b = np.asarray(blocks)
    if b.dtype != Q4_BLOCK:
        b = b.view(Q4_BLOCK)
    lead = b.shape[:-1]
    flat = b.reshape(-1)
    qs = flat["qs"]
    codes = np.empty((len(flat), QK), dtype=np.int8)
    codes[:, 0::2] = qs & 0x0F
    codes[:, 1::2] = qs >> 4
    scale = flat["scale"].astype(np.float32)
    values = (codes.astype(np.float32) - np.float32(8.0)) * scale[:, None]
    return values.reshape(*lead, b.shape[-1] * QK)


def _encode(array: np.ndarray, dtype: DType) -> bytes:
    if dtype is DType.Q4:
        return quantize_q4(array).tobytes()
    return np.ascontiguousarray(array, dtype="<f4").tobytes()


def _decode(raw: bytes | memoryview, dtype: DType, rows: int, cols: int) -> np.ndarray:
    if dtype is DType.Q4:
        blocks = np.frombuffer(raw, dtype=Q4_BLOCK).reshape(rows, cols // QK)
        return dequantize_q4(blocks)
    return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(rows, cols)


def encoded_length(dtype: DType, rows: int, cols: int) -> int:
    if dtype is DType.Q4:
        return rows * (cols // QK) * Q4_BLOCK.itemsize
    return rows * cols * 4


# -- architecture ------------------------------------------------------------

def tensor_layout(config: ModelConfig, quantize: bool = True,
                  predictor_rank: int | None = None) -> list[TensorSpec]:
    """Every tensor of the architecture, in payload order (non-expert first)."""
    c = config
    q = DType.Q4 if quantize else DType.F32
    f = DType.F32
    q_dim = c.num_q_heads * c.head_dim
    kv_dim = c.num_kv_heads * c.head_dim
    rank = default_predictor_rank(c) if predictor_rank is None else predictor_rank
    specs = [TensorSpec("embed", c.vocab_size, c.hidden_dim, f, c.hidden_dim)]
    for layer in range(c.num_layers):
        p = f"layer.{layer}."
        specs += [
            TensorSpec(p + "attn_norm", 1, c.hidden_dim, f, 1),
            TensorSpec(p + "attn.q", q_dim, c.hidden_dim, f, c.hidden_dim),
            TensorSpec(p + "attn.k", kv_dim, c.hidden_dim, f, c.hidden_dim),
            TensorSpec(p + "attn.v", kv_dim, c.hidden_dim, f, c.hidden_dim),
            TensorSpec(p + "attn.o", c.hidden_dim, q_dim, f, q_dim),
            TensorSpec(p + "router", c.num_experts, c.hidden_dim, f, c.hidden_dim),
            TensorSpec(p + "ffn_norm", 1, c.hidden_dim, f, 1),
        ]
    specs += [
        TensorSpec("final_norm", 1, c.hidden_dim, f, 1),
        TensorSpec("lm_head", c.vocab_size, c.hidden_dim, q, c.hidden_dim),
        TensorSpec("lmhead.predictor.left", rank, c.hidden_dim, f, c.hidden_dim),
        TensorSpec("lmhead.predictor.right", c.vocab_size, rank, f, rank),
    ]
    for layer in range(c.num_layers):
        for expert in range(c.num_experts):
            specs += [
                TensorSpec(expert_tensor_name(layer, expert, "gate"), c.ffn_dim, c.hidden_dim, q, c.hidden_dim),
                TensorSpec(expert_tensor_name(layer, expert, "up"), c.ffn_dim, c.hidden_dim, q, c.hidden_dim),
                TensorSpec(expert_tensor_name(layer, expert, "down"), c.hidden_dim, c.ffn_dim, q, c.ffn_dim),
            ]
    return specs


def default_predictor_rank(config: ModelConfig) -> int:
    return min(16, config.hidden_dim, config.vocab_size)


# -- byte sources ------------------------------------------------------------

class SegmentSource(Protocol):
    size: int

    def read_at(self, offset: int, length: int) -> bytes: ...


class BytesSource:
    def __init__(self, data: bytes | bytearray | memoryview):
        self._data = memoryview(bytes(data))
        self.size = len(self._data)

    def read_at(self, offset: int, length: int) -> bytes:
        if offset < 0 or offset + length > self.size:
            raise StorageError(f"read [{offset}, {offset + length}) beyond end {self.size}", retryable=False)
        return bytes(self._data[offset:offset + length])


class FileSource:
    """Positional reads on a file descriptor; safe for concurrent readers."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self._fd = -1
        self._fd = os.open(self.path, os.O_RDONLY)
        self.size = os.fstat(self._fd).st_size

    def read_at(self, offset: int, length: int) -> bytes:
        try:
            data = os.pread(self._fd, length, offset)
        except OSError as exc:
            raise StorageError(f"read of {self.path} failed: {exc}") from exc
        if len(data) != length:
            raise StorageError(f"short read of {self.path} at {offset}: {len(data)}/{length}")
        return data

    def close(self) -> None:
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1

    def __del__(self):
        self.close()


class CountingSource:
    """Wraps a source and records every read range, for I/O accounting in tests and traces."""

    def __init__(self, inner: SegmentSource):
        self.inner = inner
        self.size = inner.size
        self.reads: list[tuple[int, int]] = []
        self._lock = threading.Lock()

    @property
    def bytes_read(self) -> int:
        with self._lock:
            return sum(n for _, n in self.reads)

    def reset(self) -> None:
        with self._lock:
            self.reads.clear()

    def read_at(self, offset: int, length: int) -> bytes:
        data = self.inner.read_at(offset, length)
        with self._lock:
            self.reads.append((offset, length))
        return data


# -- writing -----------------------------------------------------------------

def _index_entry(rec: TensorRecord) -> bytes:
    name = rec.name.encode()
    return (struct.pack("<H", len(name)) + name
            + struct.pack("<BQQQQ", rec.dtype, rec.rows, rec.cols, rec.byte_offset, rec.byte_length))


def _collect(tensors: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]) -> Mapping[str, np.ndarray]:
    if isinstance(tensors, Mapping):
        return tensors
    out: dict[str, np.ndarray] = {}
    for name, array in tensors:
        if name in out:
            raise ContainerError(f"duplicate tensor name {name!r}")
        out[name] = array
    return out


class _HashingWriter:
    def __init__(self, out: BinaryIO):
        self.out = out
        self.hash = hashlib.blake2b(digest_size=8)
        self.pos = 0

    def write(self, data: bytes) -> None:
        self.out.write(data)
        self.hash.update(data)
        self.pos += len(data)

    def pad_to(self, offset: int) -> None:
        if offset < self.pos:
            raise AssertionError("writer moved backwards")
        if offset > self.pos:
            self.write(bytes(offset - self.pos))


def write_container(config: ModelConfig,
                    tensors: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]],
                    out: BinaryIO | None = None, *, quantize: bool = True) -> bytes | None:
    """Serialize a complete model. Returns the bytes when ``out`` is None.

    Tensor values are pulled from ``tensors`` one at a time in payload order, so a
    lazily computed mapping never holds more than one tensor in memory.
    """
    require_valid(config)
    tensors = _collect(tensors)
    if "lmhead.predictor.left" not in tensors:
        raise ContainerError("missing tensor 'lmhead.predictor.left'")
    rank = int(np.shape(tensors["lmhead.predictor.left"])[0])
    layout = tensor_layout(config, quantize, predictor_rank=rank)
    known = {s.name for s in layout}
    for s in layout:
        if s.name not in tensors:
            raise ContainerError(f"missing tensor {s.name!r}")
    extra = [n for n in tensors if n not in known]
    if extra:
        raise ContainerError(f"unexpected tensors: {sorted(extra)[:5]}")
    for s in layout:
        if s.dtype is DType.Q4 and s.cols % QK:
            raise ShapeError(f"{s.name}: {s.cols} columns not a multiple of {QK}")

    config_blob = config.to_text().encode()
    header_len = 8 + 4 + 4 + len(config_blob) + 4
    header_len += sum(2 + len(s.name.encode()) + 1 + 32 for s in layout)

    records: dict[str, TensorRecord] = {}
    cursor = _align(header_len, SEGMENT_ALIGN)
    for s in layout:
        length = encoded_length(s.dtype, s.rows, s.cols)
        if s.expert:
            cursor = _align(cursor, SEGMENT_ALIGN)
            records[s.name] = TensorRecord(s.name, s.dtype, s.rows, s.cols, cursor, length)
            cursor += _align(length, SEGMENT_ALIGN)
        else:
            cursor = _align(cursor, TENSOR_ALIGN)
            records[s.name] = TensorRecord(s.name, s.dtype, s.rows, s.cols, cursor, length)
            cursor += length
    payload_end = cursor

    sink = io.BytesIO() if out is None else out
    w = _HashingWriter(sink)
    w.write(MAGIC)
    w.write(struct.pack("<II", FORMAT_VERSION, len(config_blob)))
    w.write(config_blob)
    w.write(struct.pack("<I", len(records)))
    for name in sorted(records):
        w.write(_index_entry(records[name]))
    assert w.pos == header_len
    for s in layout:
        rec = records[s.name]
        array = np.asarray(tensors[s.name], dtype=np.float32)
        if array.size != s.rows * s.cols or (array.ndim == 2 and array.shape != (s.rows, s.cols)):
            raise ShapeError(f"{s.name}: expected ({s.rows}, {s.cols}), got {array.shape}")
        if not np.isfinite(array).all():
            raise ContainerError(f"{s.name}: non-finite values")
        w.pad_to(rec.byte_offset)
        w.write(_encode(array.reshape(s.rows, s.cols), s.dtype))
    w.pad_to(payload_end)
    sink.write(w.hash.digest())
    if out is None:
        return sink.getvalue()
    return None


# -- reading -----------------------------------------------------------------

class WeightContainer:
    """An opened container: parsed header and index plus the byte source behind them."""

    def __init__(self, config: ModelConfig, format_version: int,
                 index: dict[str, TensorRecord], source: SegmentSource,
                 payload_start: int, checksum: int):
        self.config = config
        self.format_version = format_version
        self.index = index
        self.source = source
        self.payload_start = payload_start
        self.checksum = checksum

    def __repr__(self) -> str:
        return f"WeightContainer({len(self.index)} tensors, checksum={self.checksum:016x})"

    @property
    def predictor_rank(self) -> int:
        return self.index["lmhead.predictor.left"].rows

    @property
    def quantized(self) -> bool:
        return self.index["lm_head"].dtype is DType.Q4

    def record(self, name: str) -> TensorRecord:
        try:
            return self.index[name]
        except KeyError:
            raise ContainerError(f"no tensor named {name!r}") from None

    def load(self, name: str) -> np.ndarray:
        """Read and dequantize one tensor as a float32 (rows, cols) array."""
        rec = self.record(name)
        raw = self.source.read_at(rec.byte_offset, rec.byte_length)
        return _decode(raw, rec.dtype, rec.rows, rec.cols)

    def load_vector(self, name: str) -> np.ndarray:
        return self.load(name).reshape(-1)

    def expert_records(self, layer: int, expert: int) -> tuple[TensorRecord, TensorRecord, TensorRecord]:
        c = self.config
        if not (0 <= layer < c.num_layers and 0 <= expert < c.num_experts):
            raise RangeError(f"expert ({layer}, {expert}) out of range")
        return tuple(self.index[expert_tensor_name(layer, expert, m)] for m in EXPERT_MATRICES)

    def expert_segment(self, layer: int, expert: int) -> tuple[int, int]:
        """(offset, length) of the contiguous padded byte range holding one expert."""
        recs = self.expert_records(layer, expert)
        start = min(r.byte_offset for r in recs)
        end = max(r.byte_offset + r.padded_length for r in recs)
        return start, end - start

    def expert_nbytes(self, layer: int, expert: int) -> int:
        return self.expert_segment(layer, expert)[1]

    def max_expert_nbytes(self) -> int:
        return max(self.expert_nbytes(layer, 0) for layer in range(self.config.num_layers))

    def total_expert_nbytes(self) -> int:
        c = self.config
        return sum(self.expert_nbytes(layer, e) for layer in range(c.num_layers) for e in range(c.num_experts))

    def iter_tensor_records(self) -> Iterator[TensorRecord]:
        return iter(self.index[n] for n in sorted(self.index))


def fetch_expert_segment(container: WeightContainer, layer: int, expert: int) -> ExpertWeights:
    """Read one expert with a single contiguous read covering gate, up and down."""
    recs = container.expert_records(layer, expert)
    start, length = container.expert_segment(layer, expert)
    raw = memoryview(container.source.read_at(start, length))
    mats = []
    for rec in recs:
        lo = rec.byte_offset - start
        mats.append(_decode(raw[lo:lo + rec.byte_length], rec.dtype, rec.rows, rec.cols))
    return ExpertWeights(*mats)


def _as_source(source) -> SegmentSource:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return BytesSource(source)
    if isinstance(source, (str, os.PathLike)):
        return FileSource(source)
    return source


def _verify_checksum(src: SegmentSource) -> int:
    if src.size < len(MAGIC) + 8:
        raise ContainerError("container truncated")
    h = hashlib.blake2b(digest_size=8)
    end = src.size - 8
    chunk = 1 << 22
    for off in range(0, end, chunk):
        h.update(src.read_at(off, min(chunk, end - off)))
    stored = src.read_at(end, 8)
    if h.digest() != stored:
        raise ChecksumError(f"checksum mismatch: stored {stored.hex()}, computed {h.hexdigest()}")
    return int.from_bytes(stored, "little")


def open_container(source, verify: bool = True) -> WeightContainer:
    """Parse a container from bytes, a path, or any object with ``read_at`` and ``size``."""
    src = _as_source(source)
    checksum = _verify_checksum(src) if verify else int.from_bytes(src.read_at(src.size - 8, 8), "little")

    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > src.size - 8:
            raise ContainerError("header runs past end of container")
        data = src.read_at(pos, n)
        pos += n
        return data

    if take(8) != MAGIC:
        raise ContainerError("bad magic")
    version, config_len = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported format version {version}")
    try:
        config = ModelConfig.from_text(take(config_len).decode())
    except UnicodeDecodeError as exc:
        raise ContainerError("config block is not UTF-8") from exc
    (count,) = struct.unpack("<I", take(4))
    index: dict[str, TensorRecord] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode()
        dtype, rows, cols, offset, length = struct.unpack("<BQQQQ", take(33))
        if name in index:
            raise ContainerError(f"duplicate tensor name {name!r}")
        try:
            index[name] = TensorRecord(name, DType(dtype), rows, cols, offset, length)
        except ValueError as exc:
            raise ContainerError(f"{name}: unknown dtype {dtype}") from exc
    payload_start = _align(pos, SEGMENT_ALIGN)
    _validate_index(config, index, payload_start, src.size - 8)
    return WeightContainer(config, version, index, src, payload_start, checksum)


def _validate_index(config: ModelConfig, index: dict[str, TensorRecord],
                    payload_start: int, payload_end: int) -> None:
    if "lmhead.predictor.left" not in index:
        raise ContainerError("missing tensor 'lmhead.predictor.left'")
    quantize = index.get("lm_head") is not None and index["lm_head"].dtype is DType.Q4
    layout = tensor_layout(config, quantize, index["lmhead.predictor.left"].rows)
    for s in layout:
        rec = index.get(s.name)
        if rec is None:
            raise ContainerError(f"missing tensor {s.name!r}")
        if (rec.rows, rec.cols, rec.dtype) != (s.rows, s.cols, s.dtype):
            raise ContainerError(f"{s.name}: header shape/dtype disagrees with config")
        if rec.byte_length != encoded_length(rec.dtype, rec.rows, rec.cols):
            raise ContainerError(f"{s.name}: byte length inconsistent with shape")
        if s.expert and rec.byte_offset % SEGMENT_ALIGN:
            raise ContainerError(f"{s.name}: expert segment not {SEGMENT_ALIGN}-aligned")
    if len(index) != len(layout):
        raise ContainerError("container holds tensors outside the architecture")
    spans = sorted((r.byte_offset, r.byte_offset + r.padded_length, r.name) for r in index.values())
    prev_end = payload_start
    for lo, hi, name in spans:
        if lo < prev_end or hi > payload_end:
            raise ContainerError(f"{name}: byte range [{lo}, {hi}) overlaps or leaves the payload")
        prev_end = hi


# -- fixtures ----------------------------------------------------------------

class _FixtureTensors(Mapping):
    """Lazily generated fixture weights; only the LM head is kept for the predictor build."""

    def __init__(self, config: ModelConfig, seed: int, quantize: bool, rank: int):
        self.config = config
        self.seed = seed
        self.quantize = quantize
        self.specs = {s.name: s for s in tensor_layout(config, quantize, rank)}
        self.rank = rank
        self._predictor = None

    def __len__(self):
        return len(self.specs)

    def __iter__(self):
        return iter(self.specs)

    def _head(self) -> np.ndarray:
        s = self.specs["lm_head"]
        head = fixture_values(self.seed, s.name, s.rows, s.cols, s.fan_in)
        if self.quantize:
            head = dequantize_q4(quantize_q4(head))
        return head

    def __getitem__(self, name: str) -> np.ndarray:
        s = self.specs[name]
        if name.endswith("_norm"):
            return np.ones((1, s.cols), dtype=np.float32)
        if name.startswith("lmhead.predictor."):
            if self._predictor is None:
                from .lmhead import build_predictor
                self._predictor = build_predictor(self._head(), self.rank, seed=self.seed)
            return self._predictor.left if name.endswith("left") else self._predictor.right
        return fixture_values(self.seed, name, s.rows, s.cols, s.fan_in)


def build_fixture_bytes(config: ModelConfig, seed: int, quantize: bool = True,
                        predictor_rank: int | None = None, out: BinaryIO | None = None) -> bytes | None:
    require_valid(config)
    rank = default_predictor_rank(config) if predictor_rank is None else predictor_rank
    return write_container(config, _FixtureTensors(config, seed, quantize, rank), out, quantize=quantize)


def write_fixture(config: ModelConfig, seed: int, path: str | os.PathLike, quantize: bool = True,
                  predictor_rank: int | None = None) -> None:
    with open(path, "wb") as fh:
        build_fixture_bytes(config, seed, quantize, predictor_rank, out=fh)
