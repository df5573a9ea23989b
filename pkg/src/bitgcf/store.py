"""Bit-exact storage of quantized representations.

Codes in {-1,+1} are translated to {0,1} and packed LSB-first into bytes;
tables round-trip through a little-endian binary format with a trailing
CRC32. Rescaling factors ride along as fp32 when the table was produced in
the annealed mode.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from functools import cached_property

import numpy as np

MAGIC = b"L2QB"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHBIIQQ8s")  # magic, version, mode, d, L+1, users, items, reserved

MODE_END = 0
MODE_ANL = 1


class TableCorruptionError(ValueError):
    """The byte stream is not a valid packed table (CRC, magic, or stray bits)."""


def pack_codes(codes) -> np.ndarray:
    """Pack a {-1,+1} vector into ceil(d/8) bytes, +1 -> bit 1, LSB-first."""
    codes = np.asarray(codes)
    if codes.ndim != 1:
        raise ValueError("pack_codes expects a 1-D vector")
    if not np.all(np.abs(codes) == 1):
        raise ValueError("codes must be exactly +1 or -1")
    bits = (codes > 0).astype(np.uint8)
    return np.packbits(bits, bitorder="little")


def unpack_codes(buf, dim: int) -> np.ndarray:
    """Exact inverse of pack_codes; nonzero trailing bits signal corruption."""
    buf = np.frombuffer(bytes(buf), dtype=np.uint8)
    expected = (dim + 7) // 8
    if len(buf) != expected:
        raise ValueError(f"expected {expected} bytes for dim={dim}, got {len(buf)}")
    bits = np.unpackbits(buf, bitorder="little")
    if bits[dim:].any():
        raise TableCorruptionError("nonzero trailing bits in packed codes")
    return (bits[:dim].astype(np.int8) * 2 - 1)


@dataclass(eq=False)
class QuantizedTable:
    """Packed (L+1)-layer codes per node, with optional per-layer rescaling factors."""

    num_users: int
    num_items: int
    dim: int
    packed_codes: np.ndarray  # uint8, (N, L+1, ceil(dim/8))
    alphas: np.ndarray | None = None  # float32, (N, L+1); present iff annealed mode

    def __post_init__(self):
        n, layers, width = self.packed_codes.shape
        if n != self.num_users + self.num_items:
            raise ValueError("packed_codes row count disagrees with node counts")
        if width != (self.dim + 7) // 8:
            raise ValueError("packed_codes byte width disagrees with dim")
        if layers > 127:
            raise ValueError("more than 127 layers breaks int8 aggregation")
        if self.alphas is not None and self.alphas.shape != (n, layers):
            raise ValueError("alphas shape disagrees with packed_codes")

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items

    @property
    def num_layers_plus_one(self) -> int:
        return self.packed_codes.shape[1]

    @property
    def mode(self) -> str:
        return "anl" if self.alphas is not None else "end"

    def codes(self, node: int, layer: int) -> np.ndarray:
        return unpack_codes(self.packed_codes[node, layer].tobytes(), self.dim)

    @cached_property
    def all_codes(self) -> np.ndarray:
        """Unpacked codes for every (node, layer), int8 (N, L+1, dim)."""
        flat = self.packed_codes.reshape(-1, self.packed_codes.shape[2])
        bits = np.unpackbits(flat, axis=1, bitorder="little")
        if bits[:, self.dim:].any():
            raise TableCorruptionError("nonzero trailing bits in packed codes")
        signs = bits[:, :self.dim].astype(np.int8) * 2 - 1
        return signs.reshape(self.num_nodes, self.num_layers_plus_one, self.dim)

    @cached_property
    def aggregated(self) -> np.ndarray:
        """Layer-summed representation per node: int8 (N, dim) in the end mode,
        float32 in the annealed mode (codes weighted by their factors)."""
        codes = self.all_codes
        if self.alphas is None:
            return codes.sum(axis=1, dtype=np.int16).astype(np.int8)
        weighted = self.alphas[:, :, None].astype(np.float32) * codes.astype(np.float32)
        return np.ascontiguousarray(weighted.sum(axis=1, dtype=np.float32))

    def payload_bytes(self) -> int:
        n = self.packed_codes.size
        if self.alphas is not None:
            n += self.alphas.size * 4
        return n


def build_table(cache, flags, num_users: int) -> QuantizedTable:
    """Assemble a QuantizedTable from a forward cache.

    Requires quantization to have been enabled. The table holds the codes the
    model deploys: all L+1 layers normally, or just the final layer when the
    forward pass quantized only that layer. Rescaling factors ride along for
    the rescaled modes.
    """
    if not flags.quantization_enabled:
        raise ValueError("cannot export: quantization was masked in this forward pass")
    code_layers = [c for c in cache.codes if c is not None]
    layers = len(code_layers)
    num_nodes = cache.continuous[0].shape[0]
    dim = cache.preactivation[0].shape[1]
    packed = np.empty((num_nodes, layers, (dim + 7) // 8), dtype=np.uint8)
    for k, codes in enumerate(code_layers):
        bits = (codes > 0).astype(np.uint8)
        packed[:, k, :] = np.packbits(bits, axis=1, bitorder="little")
    alphas = None
    if flags.mode == "anl" and flags.rescaling == "deterministic":
        alphas = cache.alphas[:, -layers:].astype(np.float32)
    elif flags.mode == "anl" and flags.rescaling == "learnable":
        alphas = cache.learnable_factors[:, -layers:].astype(np.float32)
    return QuantizedTable(num_users=num_users, num_items=num_nodes - num_users,
                          dim=dim, packed_codes=packed, alphas=alphas)


def table_to_bytes(table: QuantizedTable) -> bytes:
    mode = MODE_ANL if table.alphas is not None else MODE_END
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, mode, table.dim,
                          table.num_layers_plus_one, table.num_users,
                          table.num_items, b"\x00" * 8)
    parts = [header, table.packed_codes.tobytes()]
    if table.alphas is not None:
        parts.append(table.alphas.astype("<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_table(table: QuantizedTable, path) -> None:
    with open(path, "wb") as fh:
        fh.write(table_to_bytes(table))


def export(cache, flags, path, num_users: int) -> QuantizedTable:
    """Build a table from a forward cache and write it; byte-identical per input."""
    table = build_table(cache, flags, num_users)
    save_table(table, path)
    return table


def table_from_bytes(data: bytes) -> QuantizedTable:
    if len(data) < _HEADER.size + 4:
        raise TableCorruptionError("file too short for a packed table")
    body, crc_stored = data[:-4], struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(body) != crc_stored:
        raise TableCorruptionError("CRC32 mismatch (corrupted table)")
    magic, version, mode, dim, layers, num_users, num_items = \
        _HEADER.unpack(body[:_HEADER.size])[:7]
    if magic != MAGIC:
        raise TableCorruptionError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise TableCorruptionError(f"unsupported format version {version}")
    if mode not in (MODE_END, MODE_ANL):
        raise TableCorruptionError(f"unknown mode byte {mode}")
    n = num_users + num_items
    width = (dim + 7) // 8
    codes_bytes = n * layers * width
    offset = _HEADER.size
    if len(body) < offset + codes_bytes:
        raise TableCorruptionError("truncated codes section")
    packed = np.frombuffer(body, dtype=np.uint8, count=codes_bytes,
                           offset=offset).reshape(n, layers, width).copy()
    offset += codes_bytes
    alphas = None
    if mode == MODE_ANL:
        alpha_bytes = n * layers * 4
        if len(body) < offset + alpha_bytes:
            raise TableCorruptionError("truncated rescaling-factor section")
        alphas = np.frombuffer(body, dtype="<f4", count=n * layers,
                               offset=offset).reshape(n, layers).copy()
        offset += alpha_bytes
    if len(body) != offset:
        raise TableCorruptionError(f"{len(body) - offset} unexpected trailing bytes")
    table = QuantizedTable(num_users=num_users, num_items=num_items, dim=dim,
                           packed_codes=packed, alphas=alphas)
    table.all_codes  # force the trailing-bit corruption check
    return table


def load_table(path) -> QuantizedTable:
    with open(path, "rb") as fh:
        return table_from_bytes(fh.read())


@dataclass
class CompressionReport:
    """Measured payload compression against a one-layer fp32 table, plus theory."""

    packed_bytes: int
    baseline_fp32_bytes: int
    measured_ratio: float
    theory_ratio: float
    file_bytes: int
    whole_file_ratio: float


def theory_compression_ratio(mode: str, num_layers_plus_one: int, dim: int) -> float:
    """Ideal ratio of a one-layer fp32 table to the packed representation.

    end: 32/(L+1) since each layer stores d bits instead of 32d;
    anl: 32d/((L+1)(d+32)) with 32 extra bits per layer for the factor.
    """
    if mode == "end":
        return 32.0 / num_layers_plus_one
    if mode == "anl":
        return 32.0 * dim / (num_layers_plus_one * (dim + 32))
    raise ValueError(f"unknown mode {mode!r}")


def compression_report(table: QuantizedTable) -> CompressionReport:
    payload = table.payload_bytes()
    baseline = table.num_nodes * table.dim * 4
    file_bytes = _HEADER.size + payload + 4
    return CompressionReport(
        packed_bytes=payload,
        baseline_fp32_bytes=baseline,
        measured_ratio=baseline / payload,
        theory_ratio=theory_compression_ratio(table.mode, table.num_layers_plus_one,
                                              table.dim),
        file_bytes=file_bytes,
        whole_file_ratio=baseline / file_bytes,
    )
