"""Binary embedding head: feature fusion, scaled-tanh relaxation, sign
binarisation, triplet loss and the continuation schedule on the tanh scale."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, FormatError

CODE_MAGIC = b"DMCHCODE"
CODE_VERSION = 1


@dataclass(frozen=True)
class BinaryCode:
    """C sign bits packed little-endian (bit 1 means +1), zero-padded tail."""

    bits: bytes
    length: int

    def to_signs(self) -> np.ndarray:
        return unpack_bits(np.frombuffer(self.bits, dtype=np.uint8), self.length) * 2.0 - 1.0


@dataclass
class ContinuationSchedule:
    phi: float = 1.0
    stage: int = 0
    growth: float = 10.0


def advance_schedule(schedule: ContinuationSchedule) -> ContinuationSchedule:
    return ContinuationSchedule(schedule.phi * schedule.growth, schedule.stage + 1, schedule.growth)


def margin_for(code_length: int) -> float:
    """Triplet margin: one sixteenth of the code length (2 for 32 bits)."""
    if code_length < 16:
        raise ConfigError(f"code length {code_length} is below 16; margin C/16 undefined")
    return code_length / 16


def fuse_embed(pooled: Tensor, contexts, W_e: Tensor, lam: float, phi: float) -> Tensor:
    """e = tanh(phi * [pooled ; lam * mean_t c_t] W_e).

    ``contexts`` is either a list of per-step (B, D) context tensors, averaged
    uniformly, or an already averaged (B, D) tensor.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if isinstance(contexts, Tensor):
        ctx = contexts
    else:
        contexts = list(contexts)
        if not contexts:
            raise ValueError("fuse_embed needs at least one context vector")
        ctx = contexts[0]
        for c in contexts[1:]:
            ctx = ad.add(ctx, c)
        ctx = ad.scale(ctx, 1.0 / len(contexts))
    z = ad.concat([pooled, ad.scale(ctx, lam)], axis=1) @ W_e
    return ad.tanh(ad.scale(z, phi))


def binarize(e) -> BinaryCode:
    """Bit i is 1 iff e_i >= 0 (zero maps to +1)."""
    values = np.asarray(e.data if isinstance(e, Tensor) else e, dtype=np.float64).reshape(-1)
    return BinaryCode(pack_bits(values >= 0).tobytes(), values.size)


def binarize_rows(e: np.ndarray) -> np.ndarray:
    """(N, C) relaxed codes -> (N, ceil(C/8)) packed uint8 rows."""
    return np.packbits(np.asarray(e) >= 0, axis=1, bitorder="little")


def pack_bits(bits) -> np.ndarray:
    return np.packbits(np.asarray(bits, dtype=bool), bitorder="little")


def unpack_bits(packed: np.ndarray, length: int) -> np.ndarray:
    return np.unpackbits(np.asarray(packed, dtype=np.uint8), count=length, bitorder="little").astype(np.float64)


def quantization_gap(e: np.ndarray) -> np.ndarray:
    """Per-row ||e - sgn(e)||_inf for relaxed codes with |e_i| <= 1."""
    e = np.atleast_2d(np.asarray(e, dtype=np.float64))
    signs = np.where(e >= 0, 1.0, -1.0)
    return np.max(np.abs(e - signs), axis=1)


def squared_distance(a: Tensor, b: Tensor) -> Tensor:
    diff = ad.sub(a, b)
    return ad.sum_(ad.hadamard(diff, diff), axis=1)


def triplet_hinge(e_a: Tensor, e_p: Tensor, e_n: Tensor, gamma: float) -> Tensor:
    """Per-triplet max(0, d(a, p) - d(a, n) + gamma), squared Euclidean d."""
    if not (e_a.shape == e_p.shape == e_n.shape):
        raise DimensionError(f"triplet codes differ in shape: {e_a.shape}, {e_p.shape}, {e_n.shape}")
    if gamma <= 0:
        raise ValueError("margin must be positive")
    d_ap = squared_distance(e_a, e_p)
    d_an = squared_distance(e_a, e_n)
    shifted = ad.sub(d_ap, d_an)
    return ad.relu(ad.add(shifted, Tensor(np.full(shifted.shape, float(gamma)))))


def triplet_loss(e_a: Tensor, e_p: Tensor, e_n: Tensor, gamma: float) -> Tensor:
    """Mean triplet hinge over the rows (a scalar for a single triplet)."""
    for t in (e_a, e_p, e_n):
        if t.data.ndim == 1:
            raise DimensionError("triplet_loss expects (B, C) rows; reshape single codes to (1, C)")
    return ad.mean(triplet_hinge(e_a, e_p, e_n, gamma))


# ---------------------------------------------------------------- code files


def save_codes(path, ids: Sequence[str], packed: np.ndarray, code_length: int) -> None:
    """Write a code database: header then (u16 id length, id, packed bits) per entry."""
    nbytes = math.ceil(code_length / 8)
    packed = np.asarray(packed, dtype=np.uint8)
    if packed.shape != (len(ids), nbytes):
        raise DimensionError(f"packed codes {packed.shape} do not match {len(ids)} x {nbytes}")
    chunks = [CODE_MAGIC, struct.pack("<HIQ", CODE_VERSION, code_length, len(ids))]
    for item_id, row in zip(ids, packed):
        raw = item_id.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw + row.tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_codes(path) -> tuple[list[str], np.ndarray, int]:
    """Read a code database; returns (ids, packed (N, ceil(C/8)) uint8, C)."""
    buf = Path(path).read_bytes()
    hsize = 8 + struct.calcsize("<HIQ")
    if len(buf) < hsize or buf[:8] != CODE_MAGIC:
        raise FormatError(f"{path}: not a code database")
    version, code_length, count = struct.unpack_from("<HIQ", buf, 8)
    if version != CODE_VERSION:
        raise FormatError(f"{path}: unsupported code database version {version}")
    nbytes = math.ceil(code_length / 8)
    ids: list[str] = []
    packed = np.zeros((count, nbytes), dtype=np.uint8)
    pos = hsize
    for i in range(count):
        if pos + 2 > len(buf):
            raise FormatError(f"{path}: truncated at entry {i}")
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + n + nbytes > len(buf):
            raise FormatError(f"{path}: truncated at entry {i}")
        ids.append(buf[pos:pos + n].decode("utf-8"))
        pos += n
        packed[i] = np.frombuffer(buf, dtype=np.uint8, count=nbytes, offset=pos)
        pos += nbytes
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return ids, packed, code_length
