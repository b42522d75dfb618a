"""
Descriptor database and two-stage loop candidate retrieval.

Stage one compares geometry masks under every cyclic column shift with
XOR + popcount and keeps candidates whose best agreement reaches
``eps_geometry``. Stage two scores the survivors by the mean column-wise
cosine between intensity matrices, at the shift found in stage one.

Database file layout (all little-endian)::

    magic      6 bytes   b"ISCDB1"
    n_rings    uint32
    n_sectors  uint32
    l_max      float64
    n_entries  uint64
    n_entries times:
        frame_id   uint64
        cells      float32[n_rings * n_sectors]   row-major (ring, sector)
        mask       uint64[n_sectors * W]          column-packed, W = ceil(n_rings / 64)
"""

from __future__ import annotations

import os
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from ._kernels import shift_search
from .descriptor import GeometryMask, IntensityScanContext, binary_mask, words_per_column
from .errors import DimensionMismatchError, OutOfOrderFrameError

DB_MAGIC = b"ISCDB1"
_DB_HEADER = struct.Struct("<IIdQ")


@dataclass(frozen=True)
class RetrievalConfig:
    eps_geometry: float = 0.9
    eps_intensity: float = 0.92
    exclusion_window: int = 50

    def __post_init__(self):
        for name in ("eps_geometry", "eps_intensity"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.exclusion_window < 0:
            raise ValueError("exclusion_window must be non-negative")


@dataclass(frozen=True)
class DatabaseEntry:
    frame_id: int
    isc: IntensityScanContext
    mask: GeometryMask

    @classmethod
    def from_isc(cls, isc: IntensityScanContext) -> "DatabaseEntry":
        return cls(int(isc.frame_id), isc, binary_mask(isc))


@dataclass(frozen=True)
class MatchResult:
    query_frame_id: int
    candidate_frame_id: int
    shift_k: int
    geometry_score: float
    intensity_score: float


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise DimensionMismatchError(f"shape {a.shape} does not match {b.shape}")


def geometry_score(hamming, total):
    """Agreement fraction ``1 - hamming / total``."""
    return 1.0 - np.asarray(hamming, dtype=np.float64) / total


def hamming_distance(q: GeometryMask, c: GeometryMask) -> int:
    _check_shapes(q, c)
    return int(np.bitwise_count(q.words ^ c.words).sum())


def geometry_similarity(q: GeometryMask, c: GeometryMask) -> float:
    """Fraction of cells on which the two masks agree."""
    return float(geometry_score(hamming_distance(q, c), q.size))


def shift_columns(m: Union[GeometryMask, IntensityScanContext], s: int):
    """Cyclic column shift: column ``j`` moves to ``(j + s) mod n_sectors``.

    Rotating a cloud by ``+2*pi*s/n_sectors`` about z shifts its
    descriptor by ``+s``.
    """
    if isinstance(m, GeometryMask):
        return GeometryMask(np.roll(m.words, s, axis=0), m.n_rings)
    if isinstance(m, IntensityScanContext):
        return IntensityScanContext(np.roll(m.values, s, axis=1), m.frame_id)
    raise TypeError(f"cannot shift {type(m).__name__}")


def _all_shifts(words: np.ndarray) -> np.ndarray:
    return np.stack([np.roll(words, s, axis=0) for s in range(words.shape[0])])


def best_geometry_match(q: GeometryMask, c: GeometryMask) -> tuple[float, int]:
    """Best agreement over all column shifts of ``q`` and the smallest shift attaining it."""
    _check_shapes(q, c)
    h, k = shift_search(c.words[None], 1, _all_shifts(q.words), q.size)
    return float(geometry_score(h[0], q.size)), int(k[0])


def _cosine_mean(q: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Mean per-column cosine over the last axis; leading axes are batch axes.

    Two empty columns agree perfectly (1); one empty column scores 0.
    """
    q = q.astype(np.float64)
    c = c.astype(np.float64)
    dot = (q * c).sum(axis=-2)
    nq = (q * q).sum(axis=-2)
    nc = (c * c).sum(axis=-2)
    denom = np.sqrt(nq * nc)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(denom > 0, dot / denom, 0.0)
    cos = np.where((nq == 0) & (nc == 0), 1.0, cos)
    return np.clip(cos, 0.0, 1.0).mean(axis=-1)


def intensity_similarity(q_shifted: IntensityScanContext, c: IntensityScanContext) -> float:
    """Mean column-wise cosine similarity; the caller applies the shift first."""
    _check_shapes(q_shifted, c)
    return float(_cosine_mean(q_shifted.values, c.values))


def max_hamming_for(eps: float, total: int) -> int:
    """Largest Hamming distance whose agreement score still reaches ``eps`` (-1 if none)."""
    h = np.arange(total + 1)
    ok = np.flatnonzero(geometry_score(h, total) >= eps)
    return int(ok[-1]) if ok.size else -1


class DescriptorDatabase:
    """Append-only store of descriptors ordered by frame id.

    One thread may insert while others query; each query works on the
    entries present when it started.
    """

    def __init__(self, n_rings: int = 60, n_sectors: int = 20, l_max: float = 50.0, capacity: int = 1024):
        self.n_rings = int(n_rings)
        self.n_sectors = int(n_sectors)
        self.l_max = float(l_max)
        self._n = 0
        self._lock = threading.Lock()
        self._index: dict[int, int] = {}
        self._alloc(max(int(capacity), 1))

    def _alloc(self, capacity: int):
        n = self._n
        ids = np.empty(capacity, np.int64)
        cells = np.empty((capacity, self.n_rings, self.n_sectors), np.float32)
        words = np.empty((capacity, self.n_sectors, words_per_column(self.n_rings)), np.uint64)
        if n:
            ids[:n] = self._ids[:n]
            cells[:n] = self._cells[:n]
            words[:n] = self._words[:n]
        self._ids, self._cells, self._words = ids, cells, words

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rings, self.n_sectors)

    def __len__(self) -> int:
        return self._n

    def __contains__(self, frame_id) -> bool:
        return int(frame_id) in self._index

    @property
    def last_frame_id(self) -> Optional[int]:
        with self._lock:
            return int(self._ids[self._n - 1]) if self._n else None

    @property
    def frame_ids(self) -> np.ndarray:
        return self._ids[: self._n].copy()

    def get(self, frame_id: int) -> DatabaseEntry:
        with self._lock:
            row = self._index[int(frame_id)]
            cells, words = self._cells[row].copy(), self._words[row].copy()
        return DatabaseEntry(
            int(frame_id), IntensityScanContext(cells, int(frame_id)), GeometryMask(words, self.n_rings)
        )

    def insert(self, entry: DatabaseEntry) -> None:
        """Append ``entry``; frame ids must be strictly increasing."""
        if entry.isc.shape != self.shape:
            raise DimensionMismatchError(f"entry shape {entry.isc.shape} != database shape {self.shape}")
        fid = int(entry.frame_id)
        with self._lock:
            if self._n and fid <= self._ids[self._n - 1]:
                raise OutOfOrderFrameError(
                    f"frame {fid} is not after the last stored frame {self._ids[self._n - 1]}"
                )
            if self._n == len(self._ids):
                self._alloc(2 * len(self._ids))
            row = self._n
            self._ids[row] = fid
            self._cells[row] = entry.isc.values
            self._words[row] = entry.mask.words
            self._index[fid] = row
            self._n = row + 1

    def _snapshot(self):
        with self._lock:
            return self._n, self._ids, self._cells, self._words

    def geometry_stage(self, q: DatabaseEntry, cfg: RetrievalConfig):
        """Binary shift search over eligible entries.

        Returns ``(rows, hamming, shifts, snapshot)`` for the entries whose
        best agreement reaches ``cfg.eps_geometry``.
        """
        if q.isc.shape != self.shape:
            raise DimensionMismatchError(f"query shape {q.isc.shape} != database shape {self.shape}")
        snap = self._snapshot()
        n, ids, _, words = snap
        n_elig = int(np.searchsorted(ids[:n], int(q.frame_id) - cfg.exclusion_window, side="left"))
        total = self.n_rings * self.n_sectors
        h_max = max_hamming_for(cfg.eps_geometry, total)
        if n_elig == 0 or h_max < 0:
            empty = np.empty(0, np.int64)
            return empty, empty, empty, snap
        best_h, best_k = shift_search(words, n_elig, _all_shifts(q.mask.words), h_max)
        rows = np.flatnonzero(best_k >= 0)
        return rows, best_h[rows], best_k[rows], snap

    def query(self, q: DatabaseEntry, cfg: RetrievalConfig) -> Optional[MatchResult]:
        """Best loop candidate for ``q`` or None.

        Entries with ``frame_id >= q.frame_id - exclusion_window`` are
        never considered. Among candidates passing both thresholds the
        highest intensity score wins, ties going to the earlier frame.
        """
        rows, ham, shifts, (_, ids, cells, _) = self.geometry_stage(q, cfg)
        if rows.size == 0:
            return None
        q_shifted = np.stack([np.roll(q.isc.values, s, axis=1) for s in range(self.n_sectors)])
        scores = _cosine_mean(q_shifted[shifts], cells[rows])
        passing = np.flatnonzero(scores >= cfg.eps_intensity)
        if passing.size == 0:
            return None
        # argmax keeps the first maximum, i.e. the smallest frame id
        best = passing[int(np.argmax(scores[passing]))]
        return MatchResult(
            query_frame_id=int(q.frame_id),
            candidate_frame_id=int(ids[rows[best]]),
            shift_k=int(shifts[best]),
            geometry_score=float(geometry_score(ham[best], self.n_rings * self.n_sectors)),
            intensity_score=float(scores[best]),
        )

    def dump(self, path: str | os.PathLike) -> None:
        n, ids, cells, words = self._snapshot()
        with open(path, "wb") as fh:
            fh.write(DB_MAGIC)
            fh.write(_DB_HEADER.pack(self.n_rings, self.n_sectors, self.l_max, n))
            for row in range(n):
                fh.write(struct.pack("<Q", int(ids[row])))
                fh.write(cells[row].astype("<f4").tobytes())
                fh.write(words[row].astype("<u8").tobytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DescriptorDatabase":
        data = Path(path).read_bytes()
        if data[: len(DB_MAGIC)] != DB_MAGIC:
            raise ValueError(f"{path}: not an ISCDB1 database")
        off = len(DB_MAGIC)
        n_rings, n_sectors, l_max, n = _DB_HEADER.unpack_from(data, off)
        off += _DB_HEADER.size
        n_cells = n_rings * n_sectors
        n_words = n_sectors * words_per_column(n_rings)
        rec = np.dtype([("fid", "<u8"), ("cells", "<f4", (n_cells,)), ("words", "<u8", (n_words,))])
        if len(data) - off != n * rec.itemsize:
            raise ValueError(f"{path}: expected {n} entries of {rec.itemsize} bytes")
        recs = np.frombuffer(data, dtype=rec, count=n, offset=off)
        db = cls(n_rings, n_sectors, l_max, capacity=max(n, 1))
        for r in recs:
            isc = IntensityScanContext(r["cells"].reshape(n_rings, n_sectors), int(r["fid"]))
            mask = GeometryMask(r["words"].reshape(n_sectors, -1), n_rings)
            db.insert(DatabaseEntry(int(r["fid"]), isc, mask))
        return db
