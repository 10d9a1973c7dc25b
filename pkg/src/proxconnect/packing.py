"""Bit-packed binary weights, the BQW1 model file, and FP checkpoints.

BQW1 layout (little-endian)::

    b"BQW1"  u32 layer_count
    per layer:
        u32 name_len, name bytes (utf-8)
        u8  rank        high bit set => payload is raw f32 (full-precision layer)
        u32 dims[rank]
        f32 scale
        payload         ceil(numel / 8) bytes, bit i set iff weight i > 0, LSB first

Checkpoints are a raw little-endian f32 blob plus a JSON manifest mapping
each array name to its shape and byte offset.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import FormatError

MAGIC = b"BQW1"
FP_FLAG = 0x80


class PackError(ValueError):
    """Weights are not of the form {-s, +s}."""


@dataclass(frozen=True)
class PackedBinaryTensor:
    shape: tuple
    payload: bytes
    scale: float

    @property
    def numel(self) -> int:
        return math.prod(self.shape)


def pack_weights(w, s: float) -> PackedBinaryTensor:
    w = np.asarray(w, dtype=np.float64)
    if not s > 0:
        raise PackError(f"scale must be positive, got {s}")
    flat = w.ravel()
    bad = np.flatnonzero((flat != s) & (flat != -s))
    if bad.size:
        i = int(bad[0])
        raise PackError(f"weight {i} = {flat[i]!r} is not +/-{s!r}")
    return PackedBinaryTensor(tuple(int(d) for d in w.shape), kernels.pack_signs(flat).tobytes(), float(s))


def unpack_weights(p: PackedBinaryTensor) -> np.ndarray:
    payload = np.frombuffer(p.payload, dtype=np.uint8)
    if payload.size != (p.numel + 7) // 8:
        raise FormatError(f"payload has {payload.size} bytes, expected {(p.numel + 7) // 8}")
    signs = kernels.unpack_signs(payload, p.numel)
    return (np.float32(p.scale).astype(np.float64) * signs).reshape(p.shape)


# ---------------------------------------------------------------- BQW1 file

@dataclass
class BqwLayer:
    name: str
    shape: tuple
    scale: float
    binary: bool
    payload: bytes

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    def weights(self) -> np.ndarray:
        if self.binary:
            return unpack_weights(PackedBinaryTensor(self.shape, self.payload, self.scale))
        return np.frombuffer(self.payload, dtype="<f4").astype(np.float64).reshape(self.shape)


def encode_bqw(layers: list[BqwLayer]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(layers)))
    for layer in layers:
        name = layer.name.encode("utf-8")
        rank = len(layer.shape)
        if rank >= FP_FLAG:
            raise FormatError(f"rank {rank} too large")
        buf.write(struct.pack("<I", len(name)))
        buf.write(name)
        buf.write(struct.pack("<B", rank | (0 if layer.binary else FP_FLAG)))
        buf.write(struct.pack(f"<{rank}I", *layer.shape))
        buf.write(struct.pack("<f", layer.scale))
        buf.write(layer.payload)
    return buf.getvalue()


def decode_bqw(data: bytes) -> list[BqwLayer]:
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"truncated BQW1 file at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    layers = []
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank_byte,) = struct.unpack("<B", take(1))
        binary = not rank_byte & FP_FLAG
        rank = rank_byte & ~FP_FLAG
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        (scale,) = struct.unpack("<f", take(4))
        numel = math.prod(shape)
        payload = take((numel + 7) // 8 if binary else 4 * numel)
        layers.append(BqwLayer(name, tuple(shape), scale, binary, payload))
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after {count} layers")
    return layers


def model_to_bqw(model, quant=None) -> list[BqwLayer]:
    """Export every GEMM weight: binarized layers packed, the rest as f32."""
    q = quant or model.quant
    out = []
    for layer in model.gemm_layers():
        w_star = layer.weight.data
        if layer.binarize:
            w = q.export_weight(w_star)
            s = float(np.abs(w).flat[0]) if w.size else 1.0
            if s == 0.0:
                raise PackError(f"layer {layer.name} has all-zero weights")
            p = pack_weights(w, s)
            out.append(BqwLayer(layer.name, p.shape, s, True, p.payload))
        else:
            out.append(BqwLayer(layer.name, tuple(w_star.shape), 1.0, False,
                                w_star.astype("<f4").tobytes()))
    return out


def write_bqw(path, layers: list[BqwLayer]) -> Path:
    path = Path(path)
    path.write_bytes(encode_bqw(layers))
    return path


def read_bqw(path) -> list[BqwLayer]:
    return decode_bqw(Path(path).read_bytes())


@dataclass
class MemoryRow:
    name: str
    numel: int
    binary: bool
    fp_bytes: int
    stored_bytes: int   # payload plus this layer's header

    @property
    def ratio(self) -> float:
        return self.fp_bytes / self.stored_bytes


def memory_report(layers: list[BqwLayer]) -> tuple[list[MemoryRow], int, int]:
    """Per-layer rows plus (total fp32 bytes, total file bytes)."""
    if not layers:
        raise FormatError("model has no layers")
    rows = []
    for layer in layers:
        header = 4 + len(layer.name.encode("utf-8")) + 1 + 4 * len(layer.shape) + 4
        rows.append(MemoryRow(layer.name, layer.numel, layer.binary, 4 * layer.numel,
                              header + len(layer.payload)))
    total_fp = sum(r.fp_bytes for r in rows)
    total_file = len(MAGIC) + 4 + sum(r.stored_bytes for r in rows)
    return rows, total_fp, total_file


def format_memory_table(rows: list[MemoryRow], total_fp: int, total_file: int) -> str:
    lines = [f"{'layer':<16}{'kind':>6}{'weights':>12}{'fp32 B':>12}{'stored B':>12}{'ratio':>9}"]
    for r in rows:
        lines.append(f"{r.name:<16}{'bin' if r.binary else 'fp':>6}{r.numel:>12}{r.fp_bytes:>12}"
                     f"{r.stored_bytes:>12}{r.ratio:>9.2f}")
    lines.append(f"{'total':<16}{'':>6}{sum(r.numel for r in rows):>12}{total_fp:>12}"
                 f"{total_file:>12}{total_fp / total_file:>9.2f}")
    return "\n".join(lines)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(arrays: dict[str, np.ndarray], path) -> Path:
    path = Path(path)
    manifest, offset, chunks = {"dtype": "<f4", "layers": {}}, 0, []
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype="<f4")
        manifest["layers"][name] = {"shape": list(a.shape), "offset": offset}
        chunks.append(a.tobytes())
        offset += a.nbytes
    path.write_bytes(b"".join(chunks))
    path.with_name(path.name + ".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    manifest_path = path.with_name(path.name + ".json")
    if not path.exists() or not manifest_path.exists():
        raise FileNotFoundError(f"checkpoint {path} or its manifest is missing")
    manifest = json.loads(manifest_path.read_text())
    blob = path.read_bytes()
    out = {}
    for name, entry in manifest["layers"].items():
        n = math.prod(entry["shape"])
        start = entry["offset"]
        if start + 4 * n > len(blob):
            raise FormatError(f"checkpoint blob too short for {name}")
        out[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=start).astype(np.float64).reshape(entry["shape"])
    return out
