"""
Loop candidate verification.

A candidate from retrieval is confirmed when the descriptors of the
neighbouring frames agree as well (temporal consistency) and the two raw
scans register tightly under point-to-point ICP started from the yaw
implied by the column shift.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import InsufficientHistoryError, NoCorrespondencesError
from .ingest import PointCloud
from .retrieval import (
    DescriptorDatabase,
    MatchResult,
    best_geometry_match,
    intensity_similarity,
    shift_columns,
)


@dataclass(frozen=True)
class VerifyConfig:
    n_temporal: int = 5
    xi: float = 1.8
    icp_max_iter: int = 30
    icp_tol: float = 1e-4
    icp_max_rms: float = 0.5
    icp_max_corr_dist: float = 2.0
    icp_max_points: int = 4000

    def __post_init__(self):
        if self.n_temporal < 1:
            raise ValueError("n_temporal must be at least 1")
        if not self.xi > 0:
            raise ValueError("xi must be positive")
        if self.icp_max_iter < 1 or self.icp_max_points < 3:
            raise ValueError("icp_max_iter >= 1 and icp_max_points >= 3 required")
        if not (self.icp_tol >= 0 and self.icp_max_rms > 0 and self.icp_max_corr_dist > 0):
            raise ValueError("ICP tolerances must be positive")


@dataclass(frozen=True)
class VerifiedLoop:
    query_frame: int
    candidate_frame: int
    shift_k: int
    yaw_init: float
    reverse: bool
    temporal_score: Optional[float]
    icp_rms: Optional[float]
    accepted: bool
    reason: str

    def to_json(self) -> dict:
        """Verification log record."""
        return {
            "query": self.query_frame,
            "candidate": self.candidate_frame,
            "k": self.shift_k,
            "yaw_init": self.yaw_init,
            "reverse": self.reverse,
            "temporal_score": self.temporal_score,
            "icp_rms": self.icp_rms,
            "accepted": self.accepted,
            "reason": self.reason,
        }


@dataclass(frozen=True)
class IcpResult:
    rotation: np.ndarray
    translation: np.ndarray
    rms: float
    converged: bool
    iterations: int
    n_inliers: int

    @property
    def yaw(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T


def pair_score(db: DescriptorDatabase, a: int, b: int) -> float:
    """Geometry plus intensity score of frames ``a`` and ``b``, each at its own best shift."""
    ea, eb = db.get(a), db.get(b)
    g, k = best_geometry_match(ea.mask, eb.mask)
    return g + intensity_similarity(shift_columns(ea.isc, k), eb.isc)


def temporal_pairs(m: int, n: int, reverse: bool, n_temporal: int) -> list[tuple[int, int]]:
    step = 1 if reverse else -1
    return [(m + step * k, n - k) for k in range(1, n_temporal + 1)]


def temporal_consistency(db: DescriptorDatabase, m: int, n: int, reverse: bool, cfg: VerifyConfig) -> float:
    """Mean combined similarity of the neighbour pairs ``(m -/+ k, n - k)``, in [0, 2].

    For a reverse revisit the query side walks forward in time (m + k).

    Raises:
        InsufficientHistoryError: a required neighbour frame is not in ``db``.
    """
    pairs = temporal_pairs(m, n, reverse, cfg.n_temporal)
    missing = sorted({f for p in pairs for f in p if f not in db})
    if missing:
        raise InsufficientHistoryError(missing)
    return sum(pair_score(db, a, b) for a, b in pairs) / cfg.n_temporal


def _wrap_shift(k: int, n_sectors: int) -> int:
    """Shift mapped to ``[-n_sectors/2, n_sectors/2)``, matching the yaw wrap."""
    k %= n_sectors
    return k - n_sectors if 2 * k >= n_sectors else k


def yaw_from_shift(k: int, n_sectors: int) -> float:
    """Rotation in ``[-pi, pi)`` that a column shift of ``k`` corresponds to."""
    yaw = 2.0 * math.pi * (k % n_sectors) / n_sectors
    if yaw >= math.pi:
        yaw -= 2.0 * math.pi
    return yaw


def reverse_detected(k: int, n_sectors: int) -> bool:
    """True when the shift's yaw magnitude exceeds a quarter turn."""
    # |2*pi*k'/n| > pi/2  <=>  4|k'| > n, decided on integers
    return 4 * abs(_wrap_shift(k, n_sectors)) > n_sectors


def rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rigid_fit(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares ``R, t`` with ``dst ~= src @ R.T + t`` (Kabsch, reflection-safe)."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return R, mu_d - R @ mu_s


def _subsample(xyz: np.ndarray, max_points: int) -> np.ndarray:
    if len(xyz) <= max_points:
        return xyz
    return xyz[np.linspace(0, len(xyz) - 1, max_points).astype(np.int64)]


def icp_verify(q, c, yaw_init: float, cfg: VerifyConfig) -> IcpResult:
    """Register query cloud ``q`` onto candidate ``c`` starting from a pure yaw.

    ``q`` and ``c`` are PointClouds or ``(n, >=3)`` arrays. The returned
    transform maps query points into the candidate frame. The RMS is taken
    over pairs closer than ``icp_max_corr_dist``; the best iterate is kept.

    Raises:
        NoCorrespondencesError: no pair lies within range at the initial pose.
    """
    src = np.asarray(q.xyz if isinstance(q, PointCloud) else q, dtype=np.float64)[:, :3]
    dst = np.asarray(c.xyz if isinstance(c, PointCloud) else c, dtype=np.float64)[:, :3]
    if len(src) == 0 or len(dst) == 0:
        raise ValueError("icp_verify needs two non-empty clouds")
    src = _subsample(src, cfg.icp_max_points)
    tree = cKDTree(dst)

    def correspond(R, t):
        d, j = tree.query(src @ R.T + t, distance_upper_bound=cfg.icp_max_corr_dist)
        inl = np.isfinite(d)
        rms = float(np.sqrt(np.mean(d[inl] ** 2))) if inl.any() else math.inf
        return rms, inl, j

    R, t = rot_z(yaw_init), np.zeros(3)
    rms, inl, j = correspond(R, t)
    if not inl.any():
        raise NoCorrespondencesError(
            f"no point pairs within {cfg.icp_max_corr_dist} m at the initial alignment"
        )
    best = (R, t, rms, int(inl.sum()))
    converged = False
    it = 0
    while it < cfg.icp_max_iter:
        it += 1
        if inl.sum() < 3:
            break
        R, t = rigid_fit(src[inl], dst[j[inl]])
        new_rms, inl, j = correspond(R, t)
        if not inl.any():
            break
        improvement = rms - new_rms
        rms = new_rms
        if rms < best[2]:
            best = (R, t, rms, int(inl.sum()))
        if improvement < cfg.icp_tol:
            converged = True
            break
    R, t, rms, n_inl = best
    return IcpResult(R, t, rms, converged, it, n_inl)


def verify_loop(
    db: DescriptorDatabase,
    match: MatchResult,
    clouds: Mapping[int, PointCloud],
    cfg: VerifyConfig,
) -> VerifiedLoop:
    """Temporal check, then ICP; the loop is accepted only if both pass."""
    m, n, k = match.query_frame_id, match.candidate_frame_id, match.shift_k
    reverse = reverse_detected(k, db.n_sectors)
    yaw = yaw_from_shift(k, db.n_sectors)

    def result(temporal, rms, accepted, reason):
        return VerifiedLoop(m, n, k, yaw, reverse, temporal, rms, accepted, reason)

    try:
        temporal = temporal_consistency(db, m, n, reverse, cfg)
    except InsufficientHistoryError:
        return result(None, None, False, "insufficient-history")
    if temporal < cfg.xi:
        return result(temporal, None, False, "temporal")
    try:
        icp = icp_verify(clouds[m], clouds[n], yaw, cfg)
    except NoCorrespondencesError:
        return result(temporal, None, False, "no-correspondences")
    if icp.rms > cfg.icp_max_rms:
        return result(temporal, icp.rms, False, "icp-rms")
    return result(temporal, icp.rms, True, "accepted")


class VerificationQueue:
    """Holds reverse-visit candidates until the query's future frames are stored.

    Single writer: call ``submit`` and ``ready`` from the replay thread.
    """

    def __init__(self, cfg: VerifyConfig, n_sectors: int):
        self.cfg = cfg
        self.n_sectors = n_sectors
        self._pending: list[MatchResult] = []

    def __len__(self) -> int:
        return len(self._pending)

    def _waiting(self, db: DescriptorDatabase, match: MatchResult) -> bool:
        if not reverse_detected(match.shift_k, self.n_sectors):
            return False
        last = db.last_frame_id
        return last is None or match.query_frame_id + self.cfg.n_temporal > last

    def submit(self, match: MatchResult) -> None:
        self._pending.append(match)

    def ready(self, db: DescriptorDatabase, clouds: Mapping[int, PointCloud]) -> list[VerifiedLoop]:
        """Verify every pending match whose neighbour frames are available."""
        out, still = [], []
        for match in self._pending:
            if self._waiting(db, match):
                still.append(match)
            else:
                out.append(verify_loop(db, match, clouds, self.cfg))
        self._pending = still
        return out

    def flush(self) -> list[VerifiedLoop]:
        """Reject whatever is still waiting when the sequence ends."""
        out = [
            VerifiedLoop(
                m.query_frame_id,
                m.candidate_frame_id,
                m.shift_k,
                yaw_from_shift(m.shift_k, self.n_sectors),
                True,
                None,
                None,
                False,
                "insufficient-future",
            )
            for m in self._pending
        ]
        self._pending = []
        return out

