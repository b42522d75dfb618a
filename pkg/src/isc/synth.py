"""
Synthetic LiDAR sequences with planted revisits.

The world is a flat ground plane with vertical box prisms (facades, trees,
parked cars, poles) along a winding road; every box face has its own
reflectance. Scans are ray-cast from a
spinning multi-beam sensor and written in KITTI ``.bin`` layout together
with a ``frame x y z`` pose file and a JSON manifest of the planted loops.

Sequence layout: frames ``0 .. n_base-1`` drive the road once. Then
``forward_revisits`` chunks of ``revisit_len`` frames replay consecutive
base positions in the original order, and ``reverse_revisits`` chunks
replay the following stretch of road backwards (heading flipped by pi).
Each chunk carries its own sensor yaw offset.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .descriptor import DescriptorConfig, IntensityScanContext
from .ingest import write_kitti_bin


@dataclass(frozen=True)
class LidarModel:
    n_azimuth: int = 3600
    elevations_deg: tuple = tuple(np.linspace(-24.0, 6.0, 24))
    sensor_height: float = 1.73
    max_range: float = 60.0
    range_noise: float = 0.01
    intensity_noise: float = 0.01
    ground_reflectance: float = 0.08
    max_layers: int = 12


@dataclass
class World:
    """Vertical wall segments: endpoints ``a``, ``b`` (S, 2), ``height`` and ``reflectance`` (S,)."""

    a: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    b: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    height: np.ndarray = field(default_factory=lambda: np.zeros(0))
    reflectance: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def add_box(self, center, half_size, yaw, height, reflectance):
        c, s = math.cos(yaw), math.sin(yaw)
        hx, hy = half_size
        local = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
        corners = local @ np.array([[c, s], [-s, c]]) + np.asarray(center)
        refl = np.broadcast_to(np.asarray(reflectance, dtype=np.float64), (4,))
        self.a = np.vstack([self.a, corners])
        self.b = np.vstack([self.b, np.roll(corners, -1, axis=0)])
        self.height = np.concatenate([self.height, np.full(4, float(height))])
        self.reflectance = np.concatenate([self.reflectance, refl])

    def __len__(self) -> int:
        return len(self.a)


def _point_segment_distance(p, a, b):
    e = b - a
    t = np.clip(((p - a) * e).sum(axis=1) / np.maximum((e * e).sum(axis=1), 1e-12), 0.0, 1.0)
    return np.linalg.norm(a + t[:, None] * e - p, axis=1)


def ray_cast(world: World, position, heading: float, lidar: LidarModel, rng: np.random.Generator) -> np.ndarray:
    """One 360 degree sweep from ``position`` (x, y) facing ``heading``.

    Returns ``(n, 4)`` points ``x, y, z, intensity`` in the sensor frame
    (x forward, z up, origin at the sensor).
    """
    o = np.asarray(position, dtype=np.float64)
    e = world.b - world.a
    # boxes are wound counter-clockwise, so the outward normal is (e_y, -e_x)
    facing = ((o - world.a) * np.column_stack([e[:, 1], -e[:, 0]])).sum(axis=1) > 0
    near = facing & (_point_segment_distance(o, world.a, world.b) < lidar.max_range)
    a, e = world.a[near], e[near]
    height, refl = world.height[near], world.reflectance[near]
    w = a - o

    az = np.linspace(-np.pi, np.pi, lidar.n_azimuth, endpoint=False) + np.pi / lidar.n_azimuth
    tan_el = np.tan(np.radians(np.asarray(lidar.elevations_deg)))
    with np.errstate(divide="ignore"):
        r_ground = np.where(tan_el < 0, lidar.sensor_height / -tan_el, np.inf)

    r_hit = np.empty((len(az), len(tan_el)))
    inten = np.empty_like(r_hit)
    n_keep = min(lidar.max_layers, len(a))
    for lo in range(0, len(az), 256):
        d = np.stack([np.cos(heading + az[lo : lo + 256]), np.sin(heading + az[lo : lo + 256])], axis=1)
        denom = d[:, None, 0] * e[None, :, 1] - d[:, None, 1] * e[None, :, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            r = (w[None, :, 0] * e[None, :, 1] - w[None, :, 1] * e[None, :, 0]) / denom
            u = (w[None, :, 0] * d[:, None, 1] - w[None, :, 1] * d[:, None, 0]) / denom
        r = np.where((np.abs(denom) > 1e-12) & (r > 0) & (u >= 0) & (u <= 1), r, np.inf)
        if n_keep:
            # only the nearest crossings per azimuth can be the first return
            near_k = np.argpartition(r, n_keep - 1, axis=1)[:, :n_keep]
            rk = np.take_along_axis(r, near_k, axis=1)
            z = lidar.sensor_height + rk[:, None, :] * tan_el[None, :, None]
            r3 = np.where((z >= 0) & (z <= height[near_k][:, None, :]), rk[:, None, :], np.inf)
            first = np.argmin(r3, axis=2)
            r_obj = np.take_along_axis(r3, first[..., None], axis=2)[..., 0]
            i_obj = refl[np.take_along_axis(near_k, first, axis=1)]
        else:
            r_obj = np.full((len(d), len(tan_el)), np.inf)
            i_obj = np.zeros_like(r_obj)
        ground = r_ground[None, :] < r_obj
        r_hit[lo : lo + 256] = np.where(ground, r_ground[None, :], r_obj)
        inten[lo : lo + 256] = np.where(ground, lidar.ground_reflectance, i_obj)

    ai, ei = np.nonzero(r_hit <= lidar.max_range)
    rh = r_hit[ai, ei]
    pts = np.stack([rh * np.cos(az[ai]), rh * np.sin(az[ai]), rh * tan_el[ei]], axis=1)
    if lidar.range_noise:
        rng3 = np.linalg.norm(pts, axis=1)
        pts *= ((rng3 + rng.normal(0.0, lidar.range_noise, len(rng3))) / rng3)[:, None]
    eta = inten[ai, ei] + rng.normal(0.0, lidar.intensity_noise, len(ai))
    return np.column_stack([pts, np.clip(eta, 0.0, 1.0)])


def winding_road(n: int, step: float, rng: np.random.Generator, amplitude: float = 25.0, wavelength: float = 160.0):
    """``n`` poses spaced ``step`` apart along a gentle sine road: positions (n, 2) and headings (n,)."""
    length = n * step
    s = np.linspace(0.0, length * 1.2, 20000)
    phase = rng.uniform(0, 2 * np.pi)
    y = amplitude * np.sin(2 * np.pi * s / wavelength + phase)
    arc = np.concatenate([[0.0], np.cumsum(np.hypot(np.diff(s), np.diff(y)))])
    at = np.arange(n) * step
    x_i, y_i = np.interp(at, arc, s), np.interp(at, arc, y)
    dy = 2 * np.pi * amplitude / wavelength * np.cos(2 * np.pi * x_i / wavelength + phase)
    return np.column_stack([x_i, y_i]), np.arctan2(dy, 1.0)


MATERIALS = np.array([0.06, 0.12, 0.2, 0.25, 0.3, 0.35, 0.45, 0.6])


def furnish(positions: np.ndarray, headings: np.ndarray, rng: np.random.Generator, clearance: float = 3.5) -> World:
    """Populate the road with facades, scattered trees, parked cars and reflective poles."""
    world = World()
    normals = np.column_stack([-np.sin(headings), np.cos(headings)])
    n = len(positions)

    def clear(center, radius):
        return np.min(np.linalg.norm(positions - center, axis=1)) - radius >= clearance

    def material(size=4):
        return np.clip(rng.choice(MATERIALS) + rng.normal(0.0, 0.03, size), 0.02, 1.0)

    for side in (-1.0, 1.0):
        i = 0
        while i < n:
            j = min(i + int(rng.integers(4, 12)), n - 1)
            mid = (i + j) // 2
            half = (max(0.75 * (j - i), 1.0), rng.uniform(3.0, 8.0))
            center = positions[mid] + side * (rng.uniform(9.0, 16.0) + half[1]) * normals[mid]
            if clear(center, half[1]):
                world.add_box(center, half, headings[mid], rng.uniform(6.0, 20.0), material())
            i = j + int(rng.integers(1, 4))

    lo, hi = positions.min(axis=0) - 50.0, positions.max(axis=0) + 50.0
    for _ in range(int(np.prod(hi - lo) / 40.0)):
        center = rng.uniform(lo, hi)
        half = rng.uniform(0.3, 1.5, size=2)
        if clear(center, np.hypot(*half)):
            world.add_box(center, half, rng.uniform(0, np.pi), rng.uniform(1.0, 9.0), material())

    for side in (-1.0, 1.0):
        for i in range(0, n, 2):
            if rng.random() < 0.3:
                center = positions[i] + side * rng.uniform(4.0, 5.0) * normals[i]
                if clear(center, 2.4):
                    world.add_box(center, (2.2, 0.9), headings[i], 1.5, rng.uniform(0.1, 0.7))
            if rng.random() < 0.2:
                center = positions[i] + side * rng.uniform(5.5, 7.0) * normals[i]
                if clear(center, 0.3):
                    world.add_box(center, (0.15, 0.15), 0.0, rng.uniform(3.0, 7.0), rng.uniform(0.8, 1.0))
    return world


def plan_sequence(
    n_base: int,
    forward_revisits: int,
    reverse_revisits: int,
    revisit_len: int,
    start_index: int,
    max_yaw_offset: float,
    yaw_step: float | None,
    rng: np.random.Generator,
):
    """Base index and sensor yaw offset of every frame, plus the revisit records."""
    base_index = list(range(n_base))
    yaw_offset = [0.0] * n_base
    revisits = []
    lo = start_index
    mid = lo + forward_revisits * revisit_len
    hi = mid + reverse_revisits * revisit_len
    if lo < 0 or hi > n_base:
        raise ValueError(f"revisits need base indices [{lo}, {hi}) but the base has {n_base} frames")
    fwd = list(range(lo, mid))
    rev = list(range(hi - 1, mid - 1, -1))
    for direction, idxs, count in (("forward", fwd, forward_revisits), ("reverse", rev, reverse_revisits)):
        for c in range(count):
            chunk = idxs[c * revisit_len : (c + 1) * revisit_len]
            if yaw_step:
                steps = int(max_yaw_offset // yaw_step)
                off = float(rng.integers(-steps, steps + 1)) * yaw_step
            else:
                off = float(rng.uniform(-max_yaw_offset, max_yaw_offset))
            if direction == "reverse":
                off += math.pi
            frames = list(range(len(base_index), len(base_index) + len(chunk)))
            base_index.extend(chunk)
            yaw_offset.extend([off] * len(chunk))
            revisits.append({"direction": direction, "yaw_offset": off, "frames": frames, "base_frames": chunk})
    return base_index, yaw_offset, revisits


def generate_sequence(
    out_dir: str | os.PathLike,
    n_base: int = 260,
    forward_revisits: int = 20,
    reverse_revisits: int = 20,
    revisit_len: int = 6,
    start_index: int = 10,
    step: float = 1.5,
    max_yaw_offset: float = math.radians(72.0),
    yaw_step: float | None = 2 * math.pi / 20,
    heading_noise: float = math.radians(0.5),
    jitter: float = 0.1,
    seed: int = 0,
    lidar: LidarModel = LidarModel(),
) -> dict:
    """Write a synthetic sequence to ``out_dir`` and return its manifest.

    ``out_dir/velodyne/NNNNNN.bin`` holds the scans, ``out_dir/poses.txt``
    the ground-truth sensor positions and ``out_dir/manifest.json`` the
    planted revisits.

    Revisit yaw offsets are uniform over multiples of ``yaw_step`` within
    ``max_yaw_offset`` (continuous when ``yaw_step`` is None); reverse
    revisits add pi. Every revisit frame is further perturbed by a heading
    error uniform in ``[-heading_noise, heading_noise]`` and a position
    error uniform on a disc of radius ``jitter``.
    """
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    scan_dir = out / "velodyne"
    scan_dir.mkdir(parents=True, exist_ok=True)

    positions, headings = winding_road(n_base, step, rng)
    world = furnish(positions, headings, rng)
    base_index, yaw_offset, revisits = plan_sequence(
        n_base, forward_revisits, reverse_revisits, revisit_len, start_index, max_yaw_offset, yaw_step, rng
    )

    poses = []
    for frame, (bi, off) in enumerate(zip(base_index, yaw_offset)):
        pos, heading = positions[bi].copy(), headings[bi] + off
        if frame >= n_base:
            ang, rad = rng.uniform(0, 2 * np.pi), jitter * math.sqrt(rng.random())
            pos += rad * np.array([math.cos(ang), math.sin(ang)])
            heading += rng.uniform(-heading_noise, heading_noise)
        scan = ray_cast(world, pos, heading, lidar, rng)
        write_kitti_bin(scan_dir / f"{frame:06d}.bin", scan)
        poses.append((frame, pos[0], pos[1], lidar.sensor_height))

    with open(out / "poses.txt", "w") as fh:
        fh.write("# frame x y z\n")
        for frame, x, y, z in poses:
            fh.write(f"{frame} {x:.6f} {y:.6f} {z:.6f}\n")

    manifest = {
        "n_frames": len(base_index),
        "n_base": n_base,
        "step": step,
        "seed": seed,
        "revisits": revisits,
        "loop_pairs": [[f, b] for r in revisits for f, b in zip(r["frames"], r["base_frames"])],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def random_descriptors(
    n: int,
    cfg: DescriptorConfig = DescriptorConfig(),
    seed: int = 0,
    place_len: int = 100,
    flip_rate: float = 0.03,
) -> list[IntensityScanContext]:
    """Descriptor stream with the statistics of a drive, without ray casting.

    Occupancy thins out with range; consecutive frames within a place
    differ by a few flipped cells and small intensity noise, and a new
    random place starts every ``place_len`` frames.
    """
    rng = np.random.default_rng(seed)
    ring_p = 0.65 * np.exp(-np.arange(cfg.n_rings) / (0.5 * cfg.n_rings))[:, None]
    out = []
    for i in range(n):
        if i % place_len == 0:
            occ = rng.random(cfg.shape) < ring_p
            inten = rng.uniform(0.05, 1.0, cfg.shape)
        else:
            occ = occ ^ (rng.random(cfg.shape) < flip_rate)
            inten = np.clip(inten + rng.normal(0.0, 0.02, cfg.shape), 0.01, 1.0)
        out.append(IntensityScanContext(np.where(occ, inten, 0.0), i))
    return out
