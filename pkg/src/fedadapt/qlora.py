"""Blockwise absmax quantization codec and low-rank update representation.

An adapter update is carried as per-matrix low-rank factors A (rows x r) and
B (r x cols) whose effective contribution is (alpha/r) * A @ B, plus dense
entries for biases and scalars. The factors are what cross the simulated
wire, blockwise-quantized.

Quantization is symmetric linear (absmax): per block of ``block_size``
values, scale = max|x| / (2^(bits-1) - 1) and codes are
round-half-away-from-zero(x / scale) clamped to the symmetric range (the
most negative code is unused). The codec is sealed behind
``quantize_blockwise``/``dequantize`` so a codebook variant could be swapped
in later.

Delta wire format (little-endian):
    magic "FTQD" | version u32=1 | bits u8 | block_size u32 | tensor_count u32
    per tensor: [name_len u16][name utf-8][rows u32][cols u32][rank u32 (0 = dense)]
                [packed codes][scales f32 x n_blocks]
For a factored tensor the payload stream is A.ravel() followed by B.ravel(),
quantized as one blockwise stream. 4-bit codes pack low-nibble-first with a
zero-padded odd tail nibble. ``bits=32`` is the quantization-off mode: the
stream is stored as raw f32 with no scales. The LoRA ``alpha`` constant is
round configuration and is not transmitted; decoders default it to the rank.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .tensor import Matrix

__all__ = [
    "QuantizedTensor",
    "LowRankDelta",
    "PayloadError",
    "quantize_blockwise",
    "dequantize",
    "quantize_dequantize",
    "LoraAdapter",
    "apply_delta",
    "encode_delta",
    "decode_delta",
    "factored_rank",
    "tensor_payload_bytes",
    "delta_wire_bytes",
    "dense_tensor_bytes",
]

MAGIC = b"FTQD"
VERSION = 1
DENSE = 0
_HEADER = struct.Struct("<4sIBII")
_TENSOR_HEADER = struct.Struct("<III")  # rows, cols, rank (after name)


class PayloadError(ValueError):
    """A wire payload is malformed or internally inconsistent."""


def _max_level(bits: int) -> int:
    return 2 ** (bits - 1) - 1


def _round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


@dataclass
class QuantizedTensor:
    """Blockwise absmax codes plus one f32 scale per block."""

    codes: np.ndarray      # int8, one entry per element
    scales: np.ndarray     # float32, ceil(numel / block_size) entries
    bits: int
    block_size: int
    shape: tuple[int, int]


def quantize_blockwise(x, bits: int, block_size: int) -> QuantizedTensor:
    """Quantize a matrix into symmetric per-block integer codes."""
    if bits not in (4, 8):
        raise ValueError(f"bits must be 4 or 8, got {bits}")
    if block_size < 1:
        raise ValueError(f"block_size must be >= 1, got {block_size}")
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if not np.isfinite(arr).all():
        raise ValueError("cannot quantize non-finite input")
    flat = arr.astype(np.float64).ravel()
    n = flat.size
    n_blocks = math.ceil(n / block_size)
    padded = np.zeros(n_blocks * block_size, dtype=np.float64)
    padded[:n] = flat
    blocks = padded.reshape(n_blocks, block_size)
    maxlevel = _max_level(bits)
    amax = np.abs(blocks).max(axis=1)
    scales64 = amax / maxlevel  # codes use the exact float64 scale; storage is f32
    safe = np.where(scales64 > 0, scales64, 1.0)
    codes = _round_half_away(blocks / safe[:, None])
    codes = np.clip(codes, -maxlevel, maxlevel)
    codes[scales64 == 0] = 0.0
    scales = scales64.astype(np.float32)
    return QuantizedTensor(
        codes=codes.ravel()[:n].astype(np.int8),
        scales=scales,
        bits=bits,
        block_size=block_size,
        shape=arr.shape,
    )


def dequantize(q: QuantizedTensor) -> Matrix:
    """Reconstruct code * block-scale values at the original shape."""
    maxlevel = _max_level(q.bits)
    if np.abs(q.codes).max(initial=0) > maxlevel:
        bad = int(q.codes[np.abs(q.codes) > maxlevel][0])
        raise PayloadError(f"code {bad} out of range for {q.bits}-bit payload")
    n = q.codes.size
    expected_blocks = math.ceil(n / q.block_size)
    if q.scales.size != expected_blocks:
        raise PayloadError(f"{q.scales.size} scales for {expected_blocks} blocks")
    per_value = np.repeat(q.scales.astype(np.float64), q.block_size)[:n]
    vals = q.codes.astype(np.float64) * per_value
    return Matrix(vals.reshape(q.shape).astype(np.float32))


def quantize_dequantize(arr: np.ndarray, bits: int, block_size: int) -> np.ndarray:
    """Round-trip helper used for straight-through forward passes."""
    return dequantize(quantize_blockwise(arr, bits, block_size)).data


@dataclass
class LowRankDelta:
    """An adapter update: low-rank factors per matrix, dense small tensors."""

    rank: int
    alpha: float
    factors: dict[str, tuple[np.ndarray, np.ndarray]]
    dense: dict[str, np.ndarray]
    names: tuple[str, ...]  # serialization order over all entries

    def __post_init__(self):
        for name, (a, b) in self.factors.items():
            if a.shape[1] != self.rank or b.shape[0] != self.rank:
                raise ValueError(f"{name}: factor shapes {a.shape}, {b.shape} disagree with rank {self.rank}")
            if self.rank > min(a.shape[0], b.shape[1]):
                raise ValueError(f"{name}: rank {self.rank} exceeds min{a.shape[0], b.shape[1]}")
        missing = set(self.names) - set(self.factors) - set(self.dense)
        if missing:
            raise ValueError(f"entries listed but absent: {sorted(missing)}")

    def dense_update(self, name: str) -> np.ndarray:
        """Materialize this entry's effective dense contribution in float64."""
        if name in self.factors:
            a, b = self.factors[name]
            return (self.alpha / self.rank) * (a.astype(np.float64) @ b.astype(np.float64))
        return self.dense[name].astype(np.float64)


def factored_rank(rows: int, cols: int, rank: int) -> int:
    """Rank used for a tensor: 0 (dense) for vectors/scalars or oversized ranks."""
    if rows > 1 and cols > 1 and rank <= min(rows, cols):
        return rank
    return 0


class LoraAdapter:
    """Trainable low-rank reparameterization of an update to frozen base params.

    Matrices get factors A (noise-initialized) and B (zero-initialized) so the
    initial delta is exactly zero; 1-D and scalar entries get dense zero
    deltas. ``effective()`` builds base + delta as tracked expressions and
    must run under the tape of the current forward pass.
    """

    def __init__(self, base, rank: int, alpha: float, rng: np.random.Generator):
        if rank < 1:
            raise ValueError(f"rank must be >= 1, got {rank}")
        self.base = base
        self.rank = rank
        self.alpha = float(alpha)
        self._factors: dict[str, tuple[Matrix, Matrix]] = {}
        self._dense: dict[str, Matrix] = {}
        self.names = tuple(base.named().keys())
        for name, p in base.named().items():
            r = factored_rank(p.rows, p.cols, rank)
            if r:
                a_init = (rng.uniform(-1.0, 1.0, (p.rows, r)) / np.sqrt(p.rows)).astype(np.float32)
                a = Matrix(a_init, requires_grad=True)
                b = Matrix(np.zeros((r, p.cols), dtype=np.float32), requires_grad=True)
                self._factors[name] = (a, b)
            else:
                self._dense[name] = Matrix(np.zeros(p.shape, dtype=np.float32), requires_grad=True)

    def trainable(self) -> list[Matrix]:
        out: list[Matrix] = []
        for name in self.names:
            if name in self._factors:
                out.extend(self._factors[name])
            else:
                out.append(self._dense[name])
        return out

    def effective(self):
        """Base + (alpha/rank) * A @ B per matrix, as tracked expressions."""
        from .tensor import add, matmul, scale

        named = {}
        for name, p in self.base.named().items():
            if name in self._factors:
                a, b = self._factors[name]
                named[name] = add(p, scale(matmul(a, b), self.alpha / self.rank))
            else:
                named[name] = add(p, self._dense[name])
        return type(self.base).from_named(self.base.config, named)

    def to_delta(self) -> LowRankDelta:
        return LowRankDelta(
            rank=self.rank,
            alpha=self.alpha,
            factors={n: (a.data.copy(), b.data.copy()) for n, (a, b) in self._factors.items()},
            dense={n: d.data.copy() for n, d in self._dense.items()},
            names=self.names,
        )


def apply_delta(base, delta: LowRankDelta):
    """Return new params with each entry shifted by the delta's contribution."""
    named = base.named()
    out = {}
    for name, p in named.items():
        if name in delta.factors or name in delta.dense:
            upd = delta.dense_update(name)
            if upd.shape != p.shape:
                raise ValueError(f"{name}: delta shape {upd.shape} != param shape {p.shape}")
            out[name] = Matrix((p.data.astype(np.float64) + upd).astype(np.float32))
        else:
            out[name] = Matrix(p.data.copy())
    return type(base).from_named(base.config, out)


def _pack4(codes: np.ndarray) -> bytes:
    u = codes.astype(np.uint8) & 0xF
    if u.size % 2:
        u = np.concatenate([u, np.zeros(1, dtype=np.uint8)])
    return (u[0::2] | (u[1::2] << 4)).tobytes()


def _unpack4(buf: bytes, n: int) -> np.ndarray:
    b = np.frombuffer(buf, dtype=np.uint8)
    out = np.empty(2 * b.size, dtype=np.uint8)
    out[0::2] = b & 0xF
    out[1::2] = b >> 4
    out = out[:n].astype(np.int16)
    out[out >= 8] -= 16
    return out.astype(np.int8)


def tensor_payload_bytes(numel: int, bits: int, block_size: int) -> int:
    """Codes plus scales bytes for one tensor's value stream."""
    if bits == 32:
        return numel * 4
    return math.ceil(numel * bits / 8) + 4 * math.ceil(numel / block_size)


def delta_wire_bytes(entries, bits: int, block_size: int) -> int:
    """Closed-form payload size for entries of (name, rows, cols, rank)."""
    total = _HEADER.size
    for name, rows, cols, rank in entries:
        numel = rows * rank + rank * cols if rank else rows * cols
        total += 2 + len(name.encode("utf-8")) + _TENSOR_HEADER.size
        total += tensor_payload_bytes(numel, bits, block_size)
    return total


def dense_tensor_bytes(entries) -> int:
    """32-bit dense serialization size of the same entries (body only)."""
    total = 0
    for _, rows, cols, rank in entries:
        numel = rows * rank + rank * cols if rank else rows * cols
        total += numel * 4
    return total


def delta_entries(delta: LowRankDelta):
    """(name, rows, cols, rank) rows describing a delta's wire layout."""
    out = []
    for name in delta.names:
        if name in delta.factors:
            a, b = delta.factors[name]
            out.append((name, a.shape[0], b.shape[1], delta.rank))
        else:
            d = delta.dense[name]
            out.append((name, d.shape[0], d.shape[1], DENSE))
    return out


def encode_delta(delta: LowRankDelta, bits: int, block_size: int) -> bytes:
    """Serialize a delta; ``decode_delta`` reproduces codes and scales bit-exactly."""
    if bits not in (4, 8, 32):
        raise ValueError(f"bits must be 4, 8, or 32, got {bits}")
    parts = [_HEADER.pack(MAGIC, VERSION, bits, block_size, len(delta.names))]
    for name, rows, cols, rank in delta_entries(delta):
        if rank:
            a, b = delta.factors[name]
            stream = np.concatenate([a.ravel(), b.ravel()])
        else:
            stream = delta.dense[name].ravel()
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(_TENSOR_HEADER.pack(rows, cols, rank))
        if bits == 32:
            parts.append(stream.astype("<f4").tobytes())
        else:
            q = quantize_blockwise(stream.reshape(1, -1), bits, block_size)
            parts.append(_pack4(q.codes) if bits == 4 else q.codes.astype("<i1").tobytes())
            parts.append(q.scales.astype("<f4").tobytes())
    return b"".join(parts)


def decode_delta(data: bytes, alpha: float | None = None) -> LowRankDelta:
    """Parse a wire payload back into a (dequantized) delta."""
    if len(data) < _HEADER.size:
        raise PayloadError(f"payload shorter than the {_HEADER.size}-byte header")
    magic, version, bits, block_size, count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise PayloadError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise PayloadError(f"unsupported version {version}")
    if bits not in (4, 8, 32):
        raise PayloadError(f"invalid bits field {bits}")
    pos = _HEADER.size
    factors: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    dense: dict[str, np.ndarray] = {}
    names: list[str] = []
    rank_seen = 0
    for _ in range(count):
        if pos + 2 > len(data):
            raise PayloadError(f"truncated tensor header at byte {pos}")
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        if pos + _TENSOR_HEADER.size > len(data):
            raise PayloadError(f"truncated tensor header for {name!r} at byte {pos}")
        rows, cols, rank = _TENSOR_HEADER.unpack_from(data, pos)
        pos += _TENSOR_HEADER.size
        numel = rows * rank + rank * cols if rank else rows * cols
        body = tensor_payload_bytes(numel, bits, block_size)
        if pos + body > len(data):
            raise PayloadError(f"truncated payload for {name!r}: need {body} bytes at {pos}")
        if bits == 32:
            stream = np.frombuffer(data, dtype="<f4", count=numel, offset=pos).astype(np.float64)
        else:
            n_code_bytes = math.ceil(numel * bits / 8)
            raw = data[pos : pos + n_code_bytes]
            codes = _unpack4(raw, numel) if bits == 4 else np.frombuffer(raw, dtype="<i1").copy()
            n_blocks = math.ceil(numel / block_size)
            scales = np.frombuffer(
                data, dtype="<f4", count=n_blocks, offset=pos + n_code_bytes
            ).copy()
            q = QuantizedTensor(codes, scales, bits, block_size, (1, numel))
            stream = dequantize(q).data.astype(np.float64).ravel()
        pos += body
        if rank:
            a = stream[: rows * rank].reshape(rows, rank).astype(np.float32)
            b = stream[rows * rank :].reshape(rank, cols).astype(np.float32)
            factors[name] = (a, b)
            rank_seen = rank
        else:
            dense[name] = stream.reshape(rows, cols).astype(np.float32)
        names.append(name)
    if pos != len(data):
        raise PayloadError(f"{len(data) - pos} trailing bytes after the last tensor")
    rank = rank_seen or 1
    return LowRankDelta(
        rank=rank,
        alpha=float(alpha) if alpha is not None else float(rank),
        factors=factors,
        dense=dense,
        names=tuple(names),
    )
