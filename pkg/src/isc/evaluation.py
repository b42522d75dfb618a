"""
Sequence replay, precision/recall scoring and query latency benchmarks.

A detection ``(q, c)`` is a true positive when the ground-truth positions
of the two frames are within ``loop_dist``. A frame is a loop frame when
some earlier frame, more than ``exclusion_window`` frames back, lies within
``loop_dist`` of it; loop frames without an accepted detection are false
negatives. Counting is per query frame.
"""

from __future__ import annotations

import csv
import io
import json
import os
import time
from collections import OrderedDict
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from scipy.spatial import cKDTree

from .config import EvalConfig
from .descriptor import build_isc
from .errors import GroundTruthError, MissingScanError
from .ingest import IngestConfig, PointCloud, load_cloud
from .retrieval import DatabaseEntry, DescriptorDatabase
from .synth import random_descriptors
from .verify import VerificationQueue, VerifiedLoop

SCAN_SUFFIXES = (".bin", ".txt", ".xyz", ".asc")


@dataclass(frozen=True)
class GroundTruth:
    frame_ids: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.frame_ids, dtype=np.int64)
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if len(ids) != len(pos):
            raise GroundTruthError("frame id and position counts differ")
        if len(ids) > 1 and (np.diff(ids) <= 0).any():
            raise GroundTruthError("ground-truth frame ids must be unique and sorted")
        object.__setattr__(self, "frame_ids", ids)
        object.__setattr__(self, "positions", pos)

    def __len__(self) -> int:
        return len(self.frame_ids)

    def __contains__(self, frame_id) -> bool:
        i = np.searchsorted(self.frame_ids, frame_id)
        return bool(i < len(self.frame_ids) and self.frame_ids[i] == frame_id)

    def position(self, frame_id: int) -> np.ndarray:
        i = int(np.searchsorted(self.frame_ids, frame_id))
        if i >= len(self.frame_ids) or self.frame_ids[i] != frame_id:
            raise KeyError(frame_id)
        return self.positions[i]

    def restricted(self, frames) -> "GroundTruth":
        keep = np.isin(self.frame_ids, np.asarray(list(frames), dtype=np.int64))
        return GroundTruth(self.frame_ids[keep], self.positions[keep])


def load_ground_truth(path: str | os.PathLike) -> GroundTruth:
    """Read KITTI pose files (12 values per line) or ``frame x y z`` files."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise GroundTruthError(f"cannot read ground truth {path}: {exc}") from exc
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            rows.append([float(v) for v in line.split()])
        except ValueError:
            raise GroundTruthError(f"{path}:{lineno}: unparsable number") from None
    widths = {len(r) for r in rows}
    if not rows:
        return GroundTruth(np.empty(0, np.int64), np.empty((0, 3)))
    if len(widths) != 1 or widths.pop() not in (4, 12):
        raise GroundTruthError(f"{path}: expected 4 (frame x y z) or 12 (KITTI pose) columns on every line")
    arr = np.array(rows)
    if arr.shape[1] == 12:
        return GroundTruth(np.arange(len(arr)), arr[:, [3, 7, 11]])
    if not np.array_equal(arr[:, 0], np.round(arr[:, 0])):
        raise GroundTruthError(f"{path}: frame ids must be integers")
    return GroundTruth(arr[:, 0].astype(np.int64), arr[:, 1:4])


def loop_frames(gt: GroundTruth, loop_dist: float, exclusion_window: int) -> set[int]:
    """Frames with an earlier partner within ``loop_dist`` more than ``exclusion_window`` frames back."""
    if len(gt) < 2:
        return set()
    out = set()
    for i, j in cKDTree(gt.positions).query_pairs(loop_dist):
        a, b = sorted((int(gt.frame_ids[i]), int(gt.frame_ids[j])))
        if b - a > exclusion_window:
            out.add(b)
    return out


@dataclass
class EvalReport:
    precision: float
    recall: float
    true_positives: int
    false_positives: int
    false_negatives: int
    latency_stats: dict = field(default_factory=dict)
    db_size_final: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _as_pair(det) -> Optional[tuple[int, int]]:
    if isinstance(det, VerifiedLoop):
        return (det.query_frame, det.candidate_frame) if det.accepted else None
    if isinstance(det, Mapping):
        return (int(det["query"]), int(det["candidate"])) if det.get("accepted", True) else None
    q, c = det
    return int(q), int(c)


def evaluate(detections: Iterable, gt: GroundTruth, cfg: EvalConfig, frames=None) -> EvalReport:
    """Score accepted detections against ground truth.

    ``detections`` holds VerifiedLoops, verification log records or
    ``(query, candidate)`` pairs; rejected ones are ignored. ``frames``
    restricts false-negative counting to the frames that were replayed.
    """
    pairs = [p for p in map(_as_pair, detections) if p is not None]
    tp = fp = 0
    detected = set()
    for q, c in pairs:
        if np.linalg.norm(gt.position(q) - gt.position(c)) <= cfg.loop_dist:
            tp += 1
        else:
            fp += 1
        detected.add(q)
    scope = gt if frames is None else gt.restricted(frames)
    fn = len(loop_frames(scope, cfg.loop_dist, cfg.exclusion_window) - detected)
    return EvalReport(
        precision=tp / (tp + fp) if tp + fp else 1.0,
        recall=tp / (tp + fn) if tp + fn else 1.0,
        true_positives=tp,
        false_positives=fp,
        false_negatives=fn,
    )


def latency_stats(seconds) -> dict:
    us = np.asarray(seconds, dtype=np.float64) * 1e6
    if us.size == 0:
        return {"n": 0, "mean_us": 0.0, "p50_us": 0.0, "p99_us": 0.0}
    return {
        "n": int(us.size),
        "mean_us": float(us.mean()),
        "p50_us": float(np.percentile(us, 50)),
        "p99_us": float(np.percentile(us, 99)),
    }


def export_trajectory_overlay(gt: GroundTruth, detections: Iterable, path: str | os.PathLike | None = None) -> str:
    """CSV ``frame_id,x,y,z,is_loop`` marking frames with an accepted detection."""
    looped = {p[0] for p in map(_as_pair, detections) if p is not None}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame_id", "x", "y", "z", "is_loop"])
    for fid, (x, y, z) in zip(gt.frame_ids, gt.positions):
        w.writerow([int(fid), f"{x:.6f}", f"{y:.6f}", f"{z:.6f}", int(int(fid) in looped)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def list_scans(scan_dir: str | os.PathLike) -> dict[int, Path]:
    """Scan files keyed by the frame index encoded in their (zero-padded) names."""
    scans = {}
    for p in Path(scan_dir).iterdir():
        if p.suffix.lower() in SCAN_SUFFIXES and p.stem.isdigit():
            scans[int(p.stem)] = p
    if not scans:
        raise MissingScanError(f"no scan files in {scan_dir}")
    ids = sorted(scans)
    missing = sorted(set(range(ids[0], ids[-1] + 1)) - set(ids))
    if missing:
        raise MissingScanError(f"{scan_dir}: missing scans for frames {missing[:10]}")
    return dict(sorted(scans.items()))


class ScanStore(Mapping):
    """Read-only frame -> PointCloud mapping that loads scans lazily through the ingest stage."""

    def __init__(self, paths: Mapping[int, Path], cfg: IngestConfig, cache_size: int = 64):
        self._paths = dict(paths)
        self._cfg = cfg
        self._cache: OrderedDict[int, PointCloud] = OrderedDict()
        self._cache_size = cache_size

    def __getitem__(self, frame_id) -> PointCloud:
        frame_id = int(frame_id)
        if frame_id in self._cache:
            self._cache.move_to_end(frame_id)
            return self._cache[frame_id]
        cloud = load_cloud(self._paths[frame_id], self._cfg)
        self._cache[frame_id] = cloud
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return cloud

    def __iter__(self):
        return iter(self._paths)

    def __len__(self) -> int:
        return len(self._paths)


@dataclass
class SequenceResult:
    loops: list[VerifiedLoop]
    report: EvalReport
    query_seconds: list[float]


def replay(scans: Mapping[int, Path], cfg: EvalConfig, progress=None):
    """Run every frame through ingest, retrieval and verification, in frame order.

    Returns the verification log (one VerifiedLoop per retrieved candidate,
    in completion order), the per-query wall times and the final database.
    """
    store = ScanStore(scans, cfg.ingest)
    dcfg = cfg.descriptor
    db = DescriptorDatabase(dcfg.n_rings, dcfg.n_sectors, dcfg.l_max)
    queue = VerificationQueue(cfg.verify, dcfg.n_sectors)
    log: list[VerifiedLoop] = []
    seconds = []
    for fid in scans:
        entry = DatabaseEntry.from_isc(build_isc(store[fid], dcfg, fid))
        t0 = time.perf_counter()
        match = db.query(entry, cfg.retrieval)
        seconds.append(time.perf_counter() - t0)
        db.insert(entry)
        if match is not None:
            queue.submit(match)
        log.extend(queue.ready(db, store))
        if progress is not None:
            progress(fid, match)
    log.extend(queue.flush())
    return log, seconds, db


def run_sequence(
    scan_dir: str | os.PathLike,
    gt_path: str | os.PathLike,
    cfg: EvalConfig,
    out_dir: str | os.PathLike | None = None,
    progress=None,
) -> SequenceResult:
    """Replay a scan directory and score it against ground truth.

    When ``out_dir`` is given, writes ``detections.jsonl`` (verification
    log), ``report.json`` and ``trajectory.csv`` there. Frames without
    ground truth are replayed but left out of the scoring.
    """
    gt = load_ground_truth(gt_path)
    scans = list_scans(scan_dir)
    log, seconds, db = replay(scans, cfg, progress)
    covered = [f for f in scans if f in gt]
    scored = [d for d in log if d.query_frame in gt and d.candidate_frame in gt]
    report = evaluate(scored, gt, cfg, frames=covered)
    report.latency_stats = latency_stats(seconds)
    report.db_size_final = len(db)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_detections(log, out / "detections.jsonl")
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
        export_trajectory_overlay(gt.restricted(covered), log, out / "trajectory.csv")
    return SequenceResult(log, report, seconds)


def write_detections(log: Iterable[VerifiedLoop], path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        for d in log:
            fh.write(json.dumps(d.to_json()) + "\n")


def read_detections(path: str | os.PathLike) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def bench_query(db_size: int, cfg: EvalConfig = EvalConfig(), trials: int = 200, seed: int = 0) -> dict:
    """Time ``DescriptorDatabase.query`` against ``db_size`` synthetic descriptors.

    Queries are perturbed, randomly rotated copies of stored descriptors
    and see the whole database (none fall inside the exclusion window).
    Reports full-query and binary-stage wall times in microseconds.
    """
    if db_size < 1:
        raise ValueError("db_size must be at least 1")
    dcfg = cfg.descriptor
    rng = np.random.default_rng(seed)
    db = DescriptorDatabase(dcfg.n_rings, dcfg.n_sectors, dcfg.l_max, capacity=db_size)
    descs = random_descriptors(db_size, dcfg, seed=seed)
    for isc in descs:
        db.insert(DatabaseEntry.from_isc(isc))
    qid = db_size + cfg.retrieval.exclusion_window + 1
    queries = []
    for _ in range(trials):
        src = descs[int(rng.integers(db_size))].values
        flip = rng.random(src.shape) < 0.02
        vals = np.where(flip & (src == 0), rng.uniform(0.05, 1.0, src.shape), np.where(flip, 0.0, src))
        vals = np.roll(vals, int(rng.integers(dcfg.n_sectors)), axis=1)
        queries.append(DatabaseEntry.from_isc(type(descs[0])(vals, qid)))

    db.query(queries[0], cfg.retrieval)  # compile / warm caches
    full, binary, survivors, hits = [], [], [], 0
    for q in queries:
        t0 = time.perf_counter()
        rows, *_ = db.geometry_stage(q, cfg.retrieval)
        binary.append(time.perf_counter() - t0)
        survivors.append(len(rows))
        t0 = time.perf_counter()
        hits += db.query(q, cfg.retrieval) is not None
        full.append(time.perf_counter() - t0)
    return {
        "db_size": db_size,
        "trials": trials,
        "query": latency_stats(full),
        "binary_stage": latency_stats(binary),
        "mean_survivors": float(np.mean(survivors)),
        "match_rate": hits / trials,
    }
