"""Exact Hamming retrieval over packed binary codes."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .embedding import BinaryCode, unpack_bits
from .errors import DataError, DimensionError


def hamming(a: BinaryCode, b: BinaryCode) -> int:
    if a.length != b.length:
        raise DimensionError(f"hamming: code lengths differ ({a.length} vs {b.length})")
    x = np.frombuffer(a.bits, dtype=np.uint8) ^ np.frombuffer(b.bits, dtype=np.uint8)
    return int(np.bitwise_count(x).sum())


def _word_view(packed: np.ndarray) -> np.ndarray:
    """Reinterpret (N, nbytes) uint8 rows as the widest unsigned words that fit."""
    nbytes = packed.shape[1]
    for dtype, width in ((np.uint64, 8), (np.uint32, 4), (np.uint16, 2)):
        if nbytes % width == 0:
            return np.ascontiguousarray(packed).view(dtype)
    return np.ascontiguousarray(packed)


@dataclass
class CodeDatabase:
    """Shop-side codes in one contiguous arena, ordered by item id."""

    code_length: int
    ids: list[str]
    arena: np.ndarray  # (N, nbytes) uint8
    products: list[str | None] = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise DataError("duplicate item ids in code database")
        order = sorted(range(len(self.ids)), key=self.ids.__getitem__)
        self.ids = [self.ids[i] for i in order]
        self.arena = np.ascontiguousarray(np.asarray(self.arena, dtype=np.uint8)[order])
        if self.products:
            self.products = [self.products[i] for i in order]
        else:
            self.products = [None] * len(self.ids)
        self._words = _word_view(self.arena)

    def __len__(self) -> int:
        return len(self.ids)

    def distances(self, q_packed: np.ndarray) -> np.ndarray:
        q = np.asarray(q_packed, dtype=np.uint8).reshape(1, -1)
        if q.shape[1] != self.arena.shape[1]:
            raise DimensionError(f"query has {q.shape[1]} bytes, database rows have {self.arena.shape[1]}")
        qw = _word_view(q)
        return np.bitwise_count(self._words ^ qw).sum(axis=1, dtype=np.int64)


@dataclass
class RetrievalResult:
    ids: list[str]
    distances: list[int]

    def __iter__(self):
        return iter(zip(self.ids, self.distances))

    def __len__(self) -> int:
        return len(self.ids)


def _topk_indices(dist: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k smallest distances; ties resolved by lower index."""
    n = dist.size
    if k >= n:
        return np.argsort(dist, kind="stable")
    kth = np.partition(dist, k - 1)[k - 1]
    cand = np.flatnonzero(dist <= kth)
    return cand[np.argsort(dist[cand], kind="stable")[:k]]


def query_topk(db: CodeDatabase, q, k: int) -> RetrievalResult:
    """Exact top-k by Hamming distance; k larger than the database returns all."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(db) == 0:
        raise DataError("empty code database")
    if isinstance(q, BinaryCode):
        if q.length != db.code_length:
            raise DimensionError(f"query is {q.length}-bit, database is {db.code_length}-bit")
        q = np.frombuffer(q.bits, dtype=np.uint8)
    dist = db.distances(q)
    idx = _topk_indices(dist, k)
    return RetrievalResult([db.ids[i] for i in idx], [int(dist[i]) for i in idx])


def precision_at_k(
    results: Sequence[RetrievalResult | Sequence[str]],
    query_products: Sequence[str | None],
    item_products: Mapping[str, str],
    k: int,
) -> float:
    """Fraction of queries whose product appears among their top-k items."""
    if len(results) != len(query_products):
        raise DimensionError("one result list per query required")
    if not results:
        raise DataError("no queries")
    hits = 0
    for res, prod in zip(results, query_products):
        if prod is None:
            raise DataError("query without ground-truth product")
        ids = res.ids if isinstance(res, RetrievalResult) else list(res)
        if any(item_products.get(i) == prod for i in ids[:k]):
            hits += 1
    return hits / len(results)


# ---------------------------------------------------------------- benchmark


@dataclass
class LatencyReport:
    n_queries: int
    n_database: int
    code_length: int
    hamming_seconds: list[float]
    euclidean_seconds: list[float]

    @staticmethod
    def _stats(xs: list[float]) -> tuple[float, float, float]:
        if not xs:
            return 0.0, 0.0, 0.0
        return min(xs), float(np.median(xs)), max(xs)

    @property
    def speedup(self) -> float:
        h = self._stats(self.hamming_seconds)[1]
        e = self._stats(self.euclidean_seconds)[1]
        return e / h if h > 0 else float("nan")

    def to_tsv(self) -> str:
        lines = ["method\tqueries\tdatabase\tbits\tmin_s\tmedian_s\tmax_s\tper_query_us"]
        for name, xs in (("hamming", self.hamming_seconds), ("euclidean_f64", self.euclidean_seconds)):
            lo, med, hi = self._stats(xs)
            per_q = med / self.n_queries * 1e6 if self.n_queries else 0.0
            lines.append(f"{name}\t{self.n_queries}\t{self.n_database}\t{self.code_length}"
                         f"\t{lo:.6f}\t{med:.6f}\t{hi:.6f}\t{per_q:.3f}")
        lines.append(f"speedup\t{self.speedup:.2f}")
        return "\n".join(lines)


def benchmark_queries(db: CodeDatabase, queries: np.ndarray, repetitions: int = 5, k: int = 10) -> LatencyReport:
    """Time top-k search for every query: packed Hamming scan against a
    float64 Euclidean scan over the same codes unpacked to +-1 vectors."""
    queries = np.asarray(queries, dtype=np.uint8).reshape(-1, db.arena.shape[1])
    nq = queries.shape[0]
    if nq == 0:
        return LatencyReport(0, len(db), db.code_length, [], [])
    dense_db = np.stack([unpack_bits(r, db.code_length) for r in db.arena]) * 2.0 - 1.0
    dense_q = np.stack([unpack_bits(r, db.code_length) for r in queries]) * 2.0 - 1.0
    kk = min(k, len(db))

    def run_hamming():
        for q in queries:
            _topk_indices(db.distances(q), kk)

    def run_euclid():
        for q in dense_q:
            diff = dense_db - q
            d = np.einsum("ij,ij->i", diff, diff)
            np.argpartition(d, kk - 1)[:kk]

    run_hamming()  # warmup
    run_euclid()
    hs, es = [], []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        run_hamming()
        hs.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        run_euclid()
        es.append(time.perf_counter() - t0)
    return LatencyReport(nq, len(db), db.code_length, hs, es)
