"""KITTI odometry dataset loading and trajectory/map export.

Scans are the KITTI velodyne ``.bin`` layout: consecutive groups of four
little-endian float32 values (x, y, z, intensity).  KITTI does not store the
laser ring index, so it is reconstructed from the vertical angle, which the
feature extractor needs for per-ring neighborhoods.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from featslam.geometry import Pose

# HDL-64E vertical field of view used for ring reconstruction.
ELEVATION_MIN_DEG = -24.8
ELEVATION_MAX_DEG = 2.0


class FormatError(ValueError):
    """Malformed dataset file."""


@dataclass
class RawScan:
    """One LiDAR sweep in the sensor frame."""

    xyz: np.ndarray  # (N, 3) float64, meters
    intensity: np.ndarray  # (N,) float32 pass-through
    ring: np.ndarray  # (N,) int laser index in [0, num_lasers)
    timestamp_index: int = 0
    dropped: int = 0  # non-finite points removed at load time

    def __len__(self) -> int:
        return len(self.xyz)


@dataclass
class GroundTruthTrajectory:
    """Per-frame poses in the left-camera frame plus the LiDAR->camera calib."""

    camera_poses: list[Pose]
    calibration: Pose  # Tr: LiDAR -> camera

    def __len__(self) -> int:
        return len(self.camera_poses)

    def lidar_poses(self) -> list[Pose]:
        """Trajectory expressed in the LiDAR frame: inv(Tr) . T_cam . Tr."""
        tr_inv = self.calibration.inverse()
        return [tr_inv.compose(p).compose(self.calibration) for p in self.camera_poses]


def ring_from_elevation(xyz: np.ndarray, num_lasers: int) -> np.ndarray:
    """Quantize vertical angles onto num_lasers uniform bins over the HDL-64E
    elevation span; out-of-span angles clip to the boundary rings."""
    elev = np.degrees(np.arctan2(xyz[:, 2], np.hypot(xyz[:, 0], xyz[:, 1])))
    span = ELEVATION_MAX_DEG - ELEVATION_MIN_DEG
    ring = np.floor((elev - ELEVATION_MIN_DEG) / span * num_lasers).astype(int)
    return np.clip(ring, 0, num_lasers - 1)


def load_scan(path: str | os.PathLike, num_lasers: int = 64) -> RawScan:
    """Decode a KITTI velodyne .bin file.

    Non-finite points are dropped (KITTI contains stray returns); the number
    removed is reported on the returned scan.
    """
    nbytes = os.path.getsize(path)
    if nbytes % 16 != 0:
        raise FormatError(f"{path}: size {nbytes} bytes is not a multiple of 16")
    raw = np.fromfile(path, dtype="<f4")
    pts = raw.reshape(-1, 4)
    finite = np.all(np.isfinite(pts), axis=1)
    dropped = int(len(pts) - finite.sum())
    pts = pts[finite]
    xyz = pts[:, :3].astype(np.float64)
    return RawScan(
        xyz=xyz,
        intensity=pts[:, 3].copy(),
        ring=ring_from_elevation(xyz, num_lasers) if len(xyz) else np.zeros(0, int),
        dropped=dropped,
    )


def _parse_pose_line(tokens: list[str], lineno: int, path: str) -> Pose:
    if len(tokens) != 12:
        raise FormatError(f"{path}:{lineno}: expected 12 values, got {len(tokens)}")
    try:
        vals = np.array([float(t) for t in tokens]).reshape(3, 4)
    except ValueError as e:
        raise FormatError(f"{path}:{lineno}: {e}") from e
    m = np.eye(4)
    m[:3, :] = vals
    return Pose.from_matrix(m)


def load_poses(path: str | os.PathLike) -> list[Pose]:
    """Read a KITTI-format pose file (12 numbers per line, row-major 3x4)."""
    poses = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            tokens = line.split()
            if not tokens:
                continue
            poses.append(_parse_pose_line(tokens, lineno, str(path)))
    return poses


def load_calibration(path: str | os.PathLike) -> Pose:
    """Extract the 'Tr:' (LiDAR -> camera) transform from a KITTI calib.txt."""
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if line.startswith("Tr:") or line.startswith("Tr "):
                return _parse_pose_line(line.split()[1:], lineno, str(path))
    raise FormatError(f"{path}: no 'Tr:' line found")


def load_ground_truth(
    poses_path: str | os.PathLike, calib_path: str | os.PathLike
) -> GroundTruthTrajectory:
    poses = load_poses(poses_path)
    calib = load_calibration(calib_path)
    for i in range(1, len(poses)):
        step = np.linalg.norm(poses[i].translation - poses[i - 1].translation)
        if step >= 5.0:
            raise FormatError(
                f"{poses_path}: discontinuous ground truth at frame {i} "
                f"(step {step:.2f} m)"
            )
    return GroundTruthTrajectory(camera_poses=poses, calibration=calib)


def _fmt(values) -> str:
    return " ".join(f"{v:.12g}" for v in values)


def export_trajectory(
    trajectory: list[Pose], path: str | os.PathLike, format: str = "kitti"
) -> None:
    """Write poses as KITTI (row-major 3x4) or TUM (index tx ty tz qx qy qz qw)."""
    if format not in ("kitti", "tum"):
        raise ValueError(f"unknown trajectory format {format!r}")
    with open(path, "w") as f:
        for i, pose in enumerate(trajectory):
            if format == "kitti":
                f.write(_fmt(pose.matrix()[:3, :].reshape(-1)) + "\n")
            else:
                w, x, y, z = pose.rotation.q
                t = pose.translation
                f.write(f"{i} " + _fmt([t[0], t[1], t[2], x, y, z, w]) + "\n")


def export_map(clouds, path: str | os.PathLike) -> None:
    """Write feature clouds, transformed to the global frame, as ASCII PLY.

    clouds: iterable of (FeatureCloud, Pose) pairs.
    """
    chunks = []
    for cloud, pose in clouds:
        for pts in (cloud.edges, cloud.planars):
            if len(pts):
                chunks.append(pose.apply(pts))
    allpts = np.vstack(chunks) if chunks else np.zeros((0, 3))
    with open(path, "w") as f:
        f.write(
            "ply\nformat ascii 1.0\n"
            f"element vertex {len(allpts)}\n"
            "property float x\nproperty float y\nproperty float z\n"
            "end_header\n"
        )
        for p in allpts:
            f.write(_fmt(p) + "\n")
