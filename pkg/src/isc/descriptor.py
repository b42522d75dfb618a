"""
Intensity scan context construction.

The x-y plane around the sensor is cut into ``n_rings`` equal radial bands
out to ``l_max`` and ``n_sectors`` equal azimuthal wedges starting at -pi.
Each (ring, sector) cell keeps the maximum calibrated intensity of the
points that fall into it, zero when empty. Rows are rings and columns are
sectors, so a yaw rotation of the sensor is a cyclic column shift.

Geometry masks are stored column-packed: column ``j`` of the mask is
``ceil(n_rings / 64)`` little-endian ``uint64`` words where bit ``b`` of
word ``w`` is ring ``64 * w + b``. Rotating a mask is then a roll of the
word array along its first axis.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ingest import PointCloud

WORD_BITS = 64
_F32_TINY = np.float32(np.finfo(np.float32).smallest_subnormal)


@dataclass(frozen=True)
class DescriptorConfig:
    n_sectors: int = 20
    n_rings: int = 60
    l_max: float = 50.0

    def __post_init__(self):
        if self.n_sectors < 1 or self.n_rings < 1:
            raise ValueError("n_sectors and n_rings must be at least 1")
        if not self.l_max > 0:
            raise ValueError("l_max must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rings, self.n_sectors)


@dataclass(frozen=True, eq=False)
class IntensityScanContext:
    """``(n_rings, n_sectors)`` float32 matrix of max-coded intensity."""

    values: np.ndarray
    frame_id: int = 0

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float32)
        if vals.ndim != 2:
            raise ValueError("ISC values must be a 2D matrix")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def n_rings(self) -> int:
        return self.values.shape[0]

    @property
    def n_sectors(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other):
        if not isinstance(other, IntensityScanContext):
            return NotImplemented
        return self.frame_id == other.frame_id and np.array_equal(self.values, other.values)


def words_per_column(n_rings: int) -> int:
    return (n_rings + WORD_BITS - 1) // WORD_BITS


def pack_columns(dense: np.ndarray) -> np.ndarray:
    """Pack a boolean ``(n_rings, n_sectors)`` matrix into ``(n_sectors, W)`` uint64 words."""
    dense = np.asarray(dense, dtype=bool)
    n_rings, n_sectors = dense.shape
    n_words = words_per_column(n_rings)
    padded = np.zeros((n_words * WORD_BITS, n_sectors), dtype=bool)
    padded[:n_rings] = dense
    # bitorder little: ring 64*w + b lands in bit b of word w
    by = np.packbits(padded.T.reshape(n_sectors, n_words * 8, 8), axis=-1, bitorder="little")
    return by.reshape(n_sectors, n_words * 8).view("<u8").astype(np.uint64)


def unpack_columns(words: np.ndarray, n_rings: int) -> np.ndarray:
    words = np.ascontiguousarray(words, dtype="<u8")
    n_sectors = words.shape[0]
    bits = np.unpackbits(words.view(np.uint8).reshape(n_sectors, -1), axis=1, bitorder="little")
    return bits[:, :n_rings].T.astype(bool)


@dataclass(frozen=True, eq=False)
class GeometryMask:
    """Binary occupancy matrix, column-packed into uint64 words."""

    words: np.ndarray
    n_rings: int

    def __post_init__(self):
        w = np.array(self.words, dtype=np.uint64)
        if w.ndim != 2 or w.shape[1] != words_per_column(self.n_rings):
            raise ValueError(f"mask words have shape {w.shape}, incompatible with {self.n_rings} rings")
        w.setflags(write=False)
        object.__setattr__(self, "words", w)

    @classmethod
    def from_dense(cls, dense) -> "GeometryMask":
        dense = np.asarray(dense, dtype=bool)
        return cls(pack_columns(dense), dense.shape[0])

    def to_dense(self) -> np.ndarray:
        return unpack_columns(self.words, self.n_rings)

    @property
    def n_sectors(self) -> int:
        return self.words.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rings, self.n_sectors)

    @property
    def size(self) -> int:
        return self.n_rings * self.n_sectors

    def popcount(self) -> int:
        return int(np.bitwise_count(self.words).sum())

    def __eq__(self, other):
        if not isinstance(other, GeometryMask):
            return NotImplemented
        return self.n_rings == other.n_rings and np.array_equal(self.words, other.words)


def to_polar(point) -> tuple[float, float, float, float]:
    """Planar polar form ``(rho, theta, z, eta)`` with ``theta`` in ``[-pi, pi)``."""
    x, y, z, eta = (float(v) for v in point)
    rho = math.hypot(x, y)
    if rho == 0.0:
        return 0.0, 0.0, z, eta
    theta = math.atan2(y, x)
    if theta >= math.pi:
        theta = -math.pi
    return rho, theta, z, eta


def polar_coords(xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised ``to_polar`` for an ``(n, >=2)`` array."""
    x, y = xy[:, 0], xy[:, 1]
    rho = np.hypot(x, y)
    theta = np.where(rho == 0.0, 0.0, np.arctan2(y, x))
    theta[theta >= np.pi] = -np.pi
    return rho, theta


def _bin_indices(rho, theta, cfg: DescriptorConfig):
    ring = np.floor(rho / cfg.l_max * cfg.n_rings).astype(np.int64)
    sector = np.floor((theta + np.pi) / (2 * np.pi) * cfg.n_sectors).astype(np.int64)
    return np.minimum(ring, cfg.n_rings - 1), np.minimum(sector, cfg.n_sectors - 1)


def segment_index(rho, theta, cfg: DescriptorConfig):
    """Ring and sector of a polar coordinate (0-based).

    Values on the outer radius or the upper azimuth edge fall into the
    last bin. Works on scalars or arrays.

    Raises:
        ValueError: ``rho`` outside ``[0, l_max]`` or ``theta`` outside ``[-pi, pi)``.
    """
    r = np.asarray(rho, dtype=np.float64)
    t = np.asarray(theta, dtype=np.float64)
    if ((r < 0) | (r > cfg.l_max) | ~np.isfinite(r)).any():
        raise ValueError(f"rho outside [0, {cfg.l_max}]; range-filter the cloud first")
    if ((t < -np.pi) | (t >= np.pi) | ~np.isfinite(t)).any():
        raise ValueError("theta outside [-pi, pi)")
    ring, sector = _bin_indices(r, t, cfg)
    if ring.ndim == 0:
        return int(ring), int(sector)
    return ring, sector


def build_isc(cloud: PointCloud, cfg: DescriptorConfig, frame_id: int = 0) -> IntensityScanContext:
    """Max-coded intensity scan context of ``cloud``.

    Points farther than ``l_max`` in the plane belong to no cell and are
    ignored.
    """
    values = np.zeros(cfg.shape, dtype=np.float64)
    pts = cloud.points
    if len(pts):
        rho, theta = polar_coords(pts)
        inside = rho <= cfg.l_max
        ring, sector = _bin_indices(rho[inside], theta[inside], cfg)
        np.maximum.at(values, (ring, sector), pts[inside, 3])
    out = values.astype(np.float32)
    # keep occupancy for intensities below float32 resolution
    out[(values > 0) & (out == 0)] = _F32_TINY
    return IntensityScanContext(out, frame_id)


def binary_mask(isc: IntensityScanContext) -> GeometryMask:
    return GeometryMask.from_dense(isc.values > 0)


def write_pgm(isc: IntensityScanContext, path: str | os.PathLike) -> None:
    """Binary 8-bit PGM: width = sectors, height = rings, pixel = round(255 * cell)."""
    pix = np.rint(np.clip(isc.values, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = f"P5\n{isc.n_sectors} {isc.n_rings}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pix.tobytes())
