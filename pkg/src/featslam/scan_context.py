"""Rotation-invariant polar descriptors for place recognition.

A feature cloud is summarized as a ring x sector matrix of maximum point
heights. Matching a pair of descriptors scans all cyclic column shifts, so
the distance is invariant to the yaw at which a place is revisited.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .features import FeatureCloud

EMPTY_BIN = -1000.0
_OCCUPIED_FLOOR = -999.0  # bins hold real z values (meters); never this low


@dataclass
class ScanContextConfig:
    num_rings: int = 20
    num_sectors: int = 60
    max_radius: float = 80.0
    num_candidates: int = 10
    similarity_threshold: float = 0.2
    exclude_recent: int = 50

    def __post_init__(self):
        if self.num_rings <= 0 or self.num_sectors <= 0:
            raise ValueError("descriptor dimensions must be positive")
        if self.max_radius <= 0:
            raise ValueError("max_radius must be positive")


@dataclass
class ScanContextDescriptor:
    matrix: np.ndarray  # (num_rings, num_sectors), EMPTY_BIN where no points
    ring_key: np.ndarray  # (num_rings,) occupancy ratio in [0, 1]
    keyframe_index: int = 0


@dataclass
class CandidateMatch:
    candidate_keyframe_index: int
    descriptor_distance: float
    best_column_shift: int


def build_descriptor(
    features: FeatureCloud,
    keyframe_index: int = 0,
    config: Optional[ScanContextConfig] = None,
) -> ScanContextDescriptor:
    """Bin edge and planar points together by (planar range, azimuth)."""
    cfg = config or ScanContextConfig()
    pts = np.vstack([features.edges, features.planars])
    matrix = np.full((cfg.num_rings, cfg.num_sectors), EMPTY_BIN)
    if len(pts):
        rho = np.hypot(pts[:, 0], pts[:, 1])
        keep = rho < cfg.max_radius
        pts, rho = pts[keep], rho[keep]
    if len(pts):
        ring = np.floor(rho / (cfg.max_radius / cfg.num_rings)).astype(int)
        azimuth = np.arctan2(pts[:, 1], pts[:, 0])
        sector = np.floor(
            (azimuth + np.pi) / (2.0 * np.pi) * cfg.num_sectors
        ).astype(int) % cfg.num_sectors
        np.maximum.at(matrix, (ring, sector), pts[:, 2])
    ring_key = (matrix > _OCCUPIED_FLOOR).mean(axis=1)
    return ScanContextDescriptor(matrix, ring_key, keyframe_index)


def cyclic_shift(matrix: np.ndarray, shift: int) -> np.ndarray:
    """Move every column right by `shift` sectors (cyclic)."""
    return np.roll(matrix, shift, axis=1)


def shift_to_yaw(shift: int, num_sectors: int) -> float:
    """Yaw of the probe sensor relative to the matched sensor, radians.

    The minimizing column shift of descriptor_distance(probe, candidate)
    equals the probe yaw offset in sectors; shifts past half a turn wrap
    to the negative side.
    """
    if shift > num_sectors // 2:
        shift -= num_sectors
    return shift * (2.0 * np.pi / num_sectors)


def descriptor_distance(a: ScanContextDescriptor, b: ScanContextDescriptor):
    """Minimum column-wise cosine distance over all cyclic sector shifts.

    Returns (distance in [0, 1], best shift). Columns empty in both
    descriptors are skipped; if every column is skipped the distance is 1.
    """
    if a.matrix.shape != b.matrix.shape:
        raise ValueError(
            f"descriptor shapes differ: {a.matrix.shape} vs {b.matrix.shape}"
        )
    num_sectors = a.matrix.shape[1]
    a_occ = a.matrix > _OCCUPIED_FLOOR
    b_occ = b.matrix > _OCCUPIED_FLOOR
    av = np.where(a_occ, a.matrix, 0.0)
    bv = np.where(b_occ, b.matrix, 0.0)
    a_col_occ = a_occ.any(axis=0)
    a_norm = np.linalg.norm(av, axis=0)

    best = (1.0, 0)
    for shift in range(num_sectors):
        bs = np.roll(bv, -shift, axis=1)
        col_occ = a_col_occ | np.roll(b_occ.any(axis=0), -shift)
        if not col_occ.any():
            continue
        b_norm = np.roll(np.linalg.norm(bv, axis=0), -shift)
        dot = (av * bs).sum(axis=0)
        denom = a_norm * b_norm
        # a zero column against an occupied one carries no directional
        # information: score it as maximally distant rather than dividing
        cos = np.where(denom > 0.0, dot / np.where(denom > 0.0, denom, 1.0), 0.0)
        col_dist = 1.0 - cos
        # snap float dust to zero so shifted twins compare exactly equal
        col_dist = np.where(np.abs(col_dist) < 1e-12, 0.0, col_dist)
        d = float(np.clip(col_dist[col_occ].mean(), 0.0, 1.0))
        if d < best[0]:
            best = (d, shift)
    return best


@dataclass
class DescriptorStore:
    """Append-only keyframe descriptor database."""

    descriptors: List[ScanContextDescriptor] = field(default_factory=list)

    def append(self, descriptor: ScanContextDescriptor):
        self.descriptors.append(descriptor)

    def __len__(self):
        return len(self.descriptors)

    def __getitem__(self, i):
        return self.descriptors[i]


def query(
    db: DescriptorStore,
    probe: ScanContextDescriptor,
    config: Optional[ScanContextConfig] = None,
) -> Optional[CandidateMatch]:
    """Two-stage retrieval: ring-key nearest neighbors, then full distance."""
    cfg = config or ScanContextConfig()
    horizon = probe.keyframe_index - cfg.exclude_recent
    eligible = [d for d in db.descriptors if d.keyframe_index < horizon]
    if not eligible:
        return None
    keys = np.stack([d.ring_key for d in eligible])
    key_dist = np.linalg.norm(keys - probe.ring_key, axis=1)
    order = np.argsort(key_dist, kind="stable")[: cfg.num_candidates]

    best: Optional[CandidateMatch] = None
    for idx in order:
        cand = eligible[idx]
        dist, shift = descriptor_distance(probe, cand)
        if best is None or dist < best.descriptor_distance:
            best = CandidateMatch(cand.keyframe_index, dist, shift)
    if best is not None and best.descriptor_distance < cfg.similarity_threshold:
        return best
    return None


def dump_descriptors(db: DescriptorStore, directory) -> List[str]:
    """Write one CSV matrix per keyframe; returns the file paths."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for d in db.descriptors:
        p = out / f"scan_context_{d.keyframe_index:06d}.csv"
        np.savetxt(p, d.matrix, delimiter=",")
        paths.append(str(p))
    return paths
