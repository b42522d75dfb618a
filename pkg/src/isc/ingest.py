"""
Scan readers, intensity calibration and cloud filtering.

Supported scan formats
----------------------
* KITTI binary (``.bin``): packed little-endian ``float32`` quadruples
  ``(x, y, z, reflectance)``, no header.
* ASCII (``.txt``, ``.xyz``, ``.asc``): one ``x y z intensity`` record per
  line, ``#`` starts a comment line.

Calibration curves are two-column text files ``distance_m gain`` that are
interpolated piecewise-linearly and held constant beyond their end samples.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import MalformedLineError, NonFiniteValueError, TruncatedRecordError

KITTI_RECORD_BYTES = 16
ASCII_SUFFIXES = (".txt", ".xyz", ".asc")
GROUND_MODES = ("none", "z_threshold")


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class RawScan:
    """Points as read from disk: columns x, y, z, raw intensity."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 4)
        if not np.isfinite(pts).all():
            raise ValueError("RawScan coordinates and intensities must be finite")
        if (pts[:, 3] < 0).any():
            raise ValueError("RawScan intensities must be non-negative")
        object.__setattr__(self, "points", _frozen(pts))

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class PointCloud:
    """Calibrated cloud in the sensor frame, intensity in [0, 1]."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 4)
        object.__setattr__(self, "points", _frozen(pts))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]


@dataclass(frozen=True)
class CalibrationCurve:
    """Range-dependent intensity gain, piecewise-linear in distance."""

    distances: np.ndarray
    gains: np.ndarray

    def __post_init__(self):
        d = np.array(self.distances, dtype=np.float64).ravel()
        g = np.array(self.gains, dtype=np.float64).ravel()
        if d.size == 0 or d.shape != g.shape:
            raise ValueError("calibration curve needs matching, non-empty distance/gain samples")
        if not (np.isfinite(d).all() and np.isfinite(g).all()):
            raise ValueError("calibration samples must be finite")
        if (np.diff(d) <= 0).any():
            raise ValueError("calibration distances must be strictly increasing")
        if (g <= 0).any():
            raise ValueError("calibration gains must be positive")
        object.__setattr__(self, "distances", _frozen(d))
        object.__setattr__(self, "gains", _frozen(g))

    def __call__(self, distance):
        # np.interp holds the end values outside [first, last]
        return np.interp(distance, self.distances, self.gains)

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "CalibrationCurve":
        rows = []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 2:
                raise MalformedLineError(path, lineno, f"expected 2 fields, got {len(fields)}")
            try:
                rows.append((float(fields[0]), float(fields[1])))
            except ValueError as exc:
                raise MalformedLineError(path, lineno, str(exc)) from None
        if not rows:
            raise ValueError(f"{path}: calibration curve has no samples")
        arr = np.array(rows)
        return cls(arr[:, 0], arr[:, 1])


@dataclass(frozen=True)
class IngestConfig:
    l_max: float = 50.0
    intensity_scale: float = 1.0
    ground_mode: str = "none"
    ground_z: float = -1.5
    calibration: Optional[CalibrationCurve] = field(default=None, compare=False)

    def __post_init__(self):
        if not self.l_max > 0:
            raise ValueError("l_max must be positive")
        if not self.intensity_scale > 0:
            raise ValueError("intensity_scale must be positive")
        if self.ground_mode not in GROUND_MODES:
            raise ValueError(f"ground_mode must be one of {GROUND_MODES}, got {self.ground_mode!r}")


def read_kitti_bin(path: str | os.PathLike) -> RawScan:
    """Read a KITTI velodyne ``.bin`` scan.

    Raises:
        FileNotFoundError: the file does not exist.
        TruncatedRecordError: the byte length is not a multiple of 16.
        NonFiniteValueError: a NaN or infinity was decoded.
    """
    data = Path(path).read_bytes()
    if len(data) % KITTI_RECORD_BYTES:
        raise TruncatedRecordError(
            f"{path}: {len(data)} bytes is not a multiple of {KITTI_RECORD_BYTES}"
        )
    arr = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    finite = np.isfinite(arr).all(axis=1)
    if not finite.all():
        bad = int(np.argmin(finite))
        raise NonFiniteValueError(f"{path}: non-finite value in record {bad}")
    return RawScan(arr.astype(np.float64))


def write_kitti_bin(path: str | os.PathLike, points) -> None:
    pts = np.asarray(points, dtype="<f4").reshape(-1, 4)
    Path(path).write_bytes(pts.tobytes())


def read_ascii_cloud(path: str | os.PathLike) -> RawScan:
    """Read whitespace-separated ``x y z intensity`` records."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            fields = stripped.split()
            if len(fields) != 4:
                raise MalformedLineError(path, lineno, f"expected 4 fields, got {len(fields)}")
            try:
                rec = [float(f) for f in fields]
            except ValueError as exc:
                raise MalformedLineError(path, lineno, str(exc)) from None
            if not all(np.isfinite(rec)):
                raise MalformedLineError(path, lineno, "non-finite value")
            if rec[3] < 0:
                raise MalformedLineError(path, lineno, "negative intensity")
            rows.append(rec)
    return RawScan(np.array(rows, dtype=np.float64).reshape(-1, 4))


def read_scan(path: str | os.PathLike) -> RawScan:
    """Dispatch on file suffix: ASCII suffixes use the text reader, anything else is KITTI."""
    if Path(path).suffix.lower() in ASCII_SUFFIXES:
        return read_ascii_cloud(path)
    return read_kitti_bin(path)


def calibrate_intensity(raw: RawScan, cfg: IngestConfig) -> PointCloud:
    """Map raw returns to [0, 1]: ``clamp(raw / scale * gain(range), 0, 1)``.

    The gain is looked up at the 3D range of each point; without a
    calibration curve it is 1.
    """
    pts = raw.points
    eta = pts[:, 3] / cfg.intensity_scale
    if cfg.calibration is not None:
        eta = eta * cfg.calibration(np.linalg.norm(pts[:, :3], axis=1))
    out = pts.copy()
    out[:, 3] = np.clip(eta, 0.0, 1.0)
    return PointCloud(out)


def filter_cloud(cloud: PointCloud, cfg: IngestConfig) -> PointCloud:
    """Drop points beyond ``l_max`` in the x-y plane and, optionally, ground points."""
    pts = cloud.points
    keep = np.hypot(pts[:, 0], pts[:, 1]) <= cfg.l_max
    if cfg.ground_mode == "z_threshold":
        keep &= pts[:, 2] >= cfg.ground_z
    return PointCloud(pts[keep])


def ingest(raw: RawScan, cfg: IngestConfig) -> PointCloud:
    return filter_cloud(calibrate_intensity(raw, cfg), cfg)


def load_cloud(path: str | os.PathLike, cfg: IngestConfig) -> PointCloud:
    return ingest(read_scan(path), cfg)
