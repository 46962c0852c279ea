"""Synthetic multi-ring LiDAR simulator for desk-scale end-to-end tests.

Worlds are built from three primitive surfaces: vertical wall segments,
vertical cylinder poles, and a horizontal ground plane.  Scans are produced
by casting one ray per (ring, azimuth) cell, keeping the nearest surface
hit, and perturbing the range with Gaussian noise.  Ground-truth poses are
emitted alongside the scans, so end-pose error and loop-closure behavior
can be checked exactly.

Trajectories run at a fixed sensor height; the ground sits below the
sensor at a negative z.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from featslam.dataset_io import RawScan
from featslam.geometry import Pose, Rotation


@dataclass
class Wall:
    """Vertical rectangle: segment (x0,y0)->(x1,y1) spanning z0..z1."""

    p0: tuple
    p1: tuple
    z0: float = -1.5
    z1: float = 1.0


@dataclass
class Pole:
    """Vertical cylinder."""

    center: tuple
    radius: float = 0.15
    z0: float = -1.5
    z1: float = 1.2


@dataclass
class World:
    walls: list = field(default_factory=list)
    poles: list = field(default_factory=list)
    ground_z: float | None = -1.5


@dataclass
class LidarModel:
    num_rings: int = 16
    elevation_min_deg: float = -15.0
    elevation_max_deg: float = 5.0
    points_per_ring: int = 360
    min_range: float = 1.0
    max_range: float = 90.0
    noise_std: float = 0.01

    def ray_directions(self):
        """Unit directions (R*A, 3) and their ring ids, sensor frame."""
        elev = np.radians(
            np.linspace(self.elevation_min_deg, self.elevation_max_deg, self.num_rings)
        )
        azim = np.linspace(-np.pi, np.pi, self.points_per_ring, endpoint=False)
        e, a = np.meshgrid(elev, azim, indexing="ij")
        d = np.stack(
            [np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1
        ).reshape(-1, 3)
        ring = np.repeat(np.arange(self.num_rings), self.points_per_ring)
        return d, ring


def _wall_hits(origin, dirs, wall: Wall):
    """Ray parameter t per ray for one wall (inf when missed)."""
    p0 = np.asarray(wall.p0, float)
    p1 = np.asarray(wall.p1, float)
    u = p1 - p0
    n = np.array([-u[1], u[0]])
    denom = dirs[:, :2] @ n
    t = np.full(len(dirs), np.inf)
    ok = np.abs(denom) > 1e-12
    t_ok = ((p0 - origin[:2]) @ n) / denom[ok]
    hit_xy = origin[:2] + t_ok[:, None] * dirs[ok, :2]
    s = (hit_xy - p0) @ u / (u @ u)
    z = origin[2] + t_ok * dirs[ok, 2]
    good = (t_ok > 0) & (s >= 0.0) & (s <= 1.0) & (z >= wall.z0) & (z <= wall.z1)
    vals = np.where(good, t_ok, np.inf)
    t[ok] = vals
    return t


def _pole_hits(origin, dirs, pole: Pole):
    c = np.asarray(pole.center, float)
    oc = origin[:2] - c
    a = np.einsum("ni,ni->n", dirs[:, :2], dirs[:, :2])
    b = 2.0 * dirs[:, :2] @ oc
    c0 = oc @ oc - pole.radius**2
    disc = b * b - 4.0 * a * c0
    t = np.full(len(dirs), np.inf)
    ok = (disc >= 0) & (a > 1e-12)
    root = (-b[ok] - np.sqrt(disc[ok])) / (2.0 * a[ok])
    z = origin[2] + root * dirs[ok, 2]
    good = (root > 0) & (z >= pole.z0) & (z <= pole.z1)
    t[ok] = np.where(good, root, np.inf)
    return t


def _ground_hits(origin, dirs, ground_z):
    dz = dirs[:, 2]
    t = np.full(len(dirs), np.inf)
    ok = dz < -1e-12
    t[ok] = (ground_z - origin[2]) / dz[ok]
    return t


def simulate_scan(
    world: World,
    pose: Pose,
    model: LidarModel,
    rng: np.random.Generator,
    frame_index: int = 0,
) -> RawScan:
    """Cast one scan from the given sensor pose; points in the sensor frame."""
    d_sensor, ring = model.ray_directions()
    d_world = d_sensor @ pose.rotation.matrix().T
    origin = pose.translation

    t = np.full(len(d_world), np.inf)
    for wall in world.walls:
        t = np.minimum(t, _wall_hits(origin, d_world, wall))
    for pole in world.poles:
        t = np.minimum(t, _pole_hits(origin, d_world, pole))
    if world.ground_z is not None:
        t = np.minimum(t, _ground_hits(origin, d_world, world.ground_z))

    if model.noise_std > 0:
        t = t + rng.normal(0.0, model.noise_std, size=len(t))
    keep = np.isfinite(t) & (t >= model.min_range) & (t <= model.max_range)
    return RawScan(
        xyz=d_sensor[keep] * t[keep, None],
        intensity=np.zeros(keep.sum(), dtype=np.float32),
        ring=ring[keep],
        timestamp_index=frame_index,
    )


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------


def _yaw_pose(x, y, yaw):
    return Pose(Rotation.from_rotvec([0.0, 0.0, yaw]), [x, y, 0.0])


def straight_path(frames: int, step: float, y: float = 0.0):
    return [_yaw_pose(k * step, y, 0.0) for k in range(frames)]


def circle_path(frames: int, radius: float, center=(0.0, 0.0), laps: float = 1.0):
    """Counterclockwise circle, starting at the bottom heading +x."""
    out = []
    for k in range(frames):
        a = -np.pi / 2 + 2 * np.pi * laps * k / max(frames - 1, 1)
        x = center[0] + radius * np.cos(a)
        y = center[1] + radius * np.sin(a)
        out.append(_yaw_pose(x, y, a + np.pi / 2))
    return out


def rounded_square_loop(side: float, corner_radius: float):
    """Arclength parametrization of a rounded square, CCW, starting at the
    bottom-edge midpoint heading +x.  Returns (perimeter, point_at(s))."""
    h = side / 2.0
    r = corner_radius
    lstr = 2.0 * (h - r)  # full straight length per edge
    qarc = np.pi * r / 2.0
    # piece list: (length, kind, data); first/last straights are half edges
    pieces = []
    pieces.append((lstr / 2.0, "s", ((0.0, -h), 0.0)))
    centers = [(h - r, -(h - r)), (h - r, h - r), (-(h - r), h - r), (-(h - r), -(h - r))]
    start_angles = [-np.pi / 2, 0.0, np.pi / 2, np.pi]
    edge_starts = [((h, -(h - r)), np.pi / 2), ((h - r, h), np.pi), ((-h, h - r), -np.pi / 2)]
    for k in range(4):
        pieces.append((qarc, "a", (centers[k], start_angles[k])))
        if k < 3:
            pieces.append((lstr, "s", edge_starts[k]))
    pieces.append((lstr / 2.0, "s", ((-(h - r), -h), 0.0)))
    perimeter = sum(p[0] for p in pieces)

    def point_at(s):
        s = float(s) % perimeter
        for length, kind, data in pieces:
            if s <= length + 1e-12:
                if kind == "s":
                    (x0, y0), yaw = data
                    return (
                        x0 + s * np.cos(yaw),
                        y0 + s * np.sin(yaw),
                        yaw,
                    )
                (cx, cy), a0 = data
                a = a0 + s / r
                return (
                    cx + r * np.cos(a),
                    cy + r * np.sin(a),
                    a + np.pi / 2,
                )
            s -= length
        (x0, y0), yaw = pieces[-1][2]
        return (x0, y0, yaw)

    return perimeter, point_at


def rounded_square_path(side: float, corner_radius: float, frames: int, laps: float = 1.0):
    perimeter, point_at = rounded_square_loop(side, corner_radius)
    out = []
    for k in range(frames):
        s = laps * perimeter * k / max(frames - 1, 1)
        x, y, yaw = point_at(s)
        out.append(_yaw_pose(x, y, yaw))
    return out


# ---------------------------------------------------------------------------
# Worlds
# ---------------------------------------------------------------------------


def _square_walls(half: float, z0=-1.5, z1=1.0):
    c = [(-half, -half), (half, -half), (half, half), (-half, half)]
    return [Wall(c[k], c[(k + 1) % 4], z0, z1) for k in range(4)]


def corridor_world(
    length: float = 45.0,
    half_width: float = 3.0,
    pole_spacing: float = 5.0,
    density: float = 1.0,
) -> World:
    w = World()
    x0, x1 = -5.0, length
    w.walls = [
        Wall((x0, -half_width), (x1, -half_width)),
        Wall((x0, half_width), (x1, half_width)),
        Wall((x1, -half_width), (x1, half_width)),
        Wall((x0, -half_width), (x0, half_width)),
    ]
    spacing = pole_spacing / max(density, 1e-6)
    x = x0 + 2.0
    side = 1.0
    while x < x1 - 1.0:
        w.poles.append(Pole((x, side * (half_width - 0.6))))
        side = -side
        x += spacing
    return w


def square_loop_world(
    side: float = 30.0,
    corridor_half_width: float = 3.0,
    density: float = 1.0,
    seed: int = 0,
) -> World:
    """Square-annulus corridor around the rounded-square trajectory.

    Poles are jittered by a seeded RNG so the four sides of the square do
    not alias each other in descriptor space.
    """
    rng = np.random.default_rng(seed)
    w = World()
    outer = side / 2.0 + corridor_half_width
    inner = side / 2.0 - corridor_half_width
    w.walls = _square_walls(outer) + _square_walls(inner, z1=0.8)
    n_poles = int(16 * density)
    # scatter poles inside the corridor band, away from the centerline
    count = 0
    while count < n_poles:
        p = rng.uniform(-outer + 0.6, outer - 0.6, size=2)
        radial = np.max(np.abs(p))
        if not (inner + 0.5 < radial < outer - 0.5):
            continue
        centerline = side / 2.0
        if abs(radial - centerline) < 0.9:  # keep the driving lane clear
            continue
        w.poles.append(Pole((p[0], p[1]), radius=float(rng.uniform(0.1, 0.25))))
        count += 1
    return w


def _room_walls(cx: float, cy: float, half: float, door_y=(-4.0, -2.0)):
    """Square room with door gaps in both the east and west walls."""
    lo, hi = door_y
    walls = [
        Wall((cx - half, cy - half), (cx + half, cy - half)),  # south
        Wall((cx - half, cy + half), (cx + half, cy + half)),  # north
    ]
    for sx in (-1, 1):  # west, east walls split around the door gap
        x = cx + sx * half
        walls.append(Wall((x, cy - half), (x, cy + lo)))
        walls.append(Wall((x, cy + hi), (x, cy + half)))
    return walls


def two_room_world(separation: float = 60.0, room_half: float = 6.0, seed: int = 0) -> World:
    """Two geometrically identical rooms joined by a long corridor.

    Room B is room A translated by +separation in x, pole layout included,
    so descriptors of corresponding viewpoints match while the true pose
    separation stays `separation`.
    """
    rng = np.random.default_rng(seed)
    w = World()
    # wide door and corridor: walls stay beyond the feature min-range of a
    # sensor driving the y = -3 centerline, and the visible ground strip is
    # wide enough for valid plane fits
    door_y = (-5.5, -0.5)
    w.walls = _room_walls(0.0, 0.0, room_half, door_y)
    w.walls += _room_walls(separation, 0.0, room_half, door_y)
    w.walls.append(Wall((room_half, -5.5), (separation - room_half, -5.5)))
    w.walls.append(Wall((room_half, -0.5), (separation - room_half, -0.5)))
    layout = [(-3.5, 2.5), (2.0, 3.5), (-2.0, -4.5), (4.0, -1.0), (-4.8, -1.5)]
    for dx, dy in layout:
        w.poles.append(Pole((dx, dy)))
        w.poles.append(Pole((separation + dx, dy)))
    # corridor anchors: alternating thin bollards plus wall stubs pin the
    # along-corridor direction that two parallel walls leave unobservable
    x = room_half + 1.0
    side = -5.0
    while x < separation - room_half - 0.5:
        w.poles.append(Pole((x, side), radius=0.1))
        side = -1.0 if side == -5.0 else -5.0
        x += float(rng.uniform(1.5, 3.0))
    x = room_half + 6.0
    while x < separation - room_half - 3.0:
        w.walls.append(Wall((x, -5.5), (x, -5.0)))
        w.walls.append(Wall((x + 2.0, -0.5), (x + 2.0, -1.0)))
        x += 10.0
    return w


def two_room_path(separation: float = 60.0, step: float = 0.35):
    """Circle room A (3 laps), transit the corridor, circle room B."""
    radius = 3.0
    lap = 2 * np.pi * radius
    n_lap_a = int(round(3.0 * lap / step))
    poses = circle_path(n_lap_a + 1, radius, (0.0, 0.0), laps=3.0)
    # the circle ends at its start, (0, -3) heading +x; drive east to room B
    x = step
    transit = []
    while x < separation - 1e-9:
        transit.append(_yaw_pose(x, -3.0, 0.0))
        x += step
    n_lap_b = int(round(1.5 * lap / step))
    room_b = circle_path(n_lap_b + 1, radius, (separation, 0.0), laps=1.5)
    return poses + transit + room_b


# ---------------------------------------------------------------------------
# Spec-driven generation
# ---------------------------------------------------------------------------

_DEFAULTS = {
    "shape": "square",
    "frames": 400,
    "noise": 0.01,
    "seed": 0,
    "density": 1.0,
    "size": 30.0,
    "laps": 1.0,
    "step": 0.5,
    "separation": 60.0,
}

SHAPES = ("square", "corridor", "two_rooms", "static")


def generate_world(spec: dict):
    """Build (scans, ground_truth_poses) from a flat spec dict.

    Keys (all optional): shape, frames, noise, seed, density, size, laps,
    step, separation.  Unknown keys are rejected.
    """
    unknown = set(spec) - set(_DEFAULTS)
    if unknown:
        raise ValueError(f"unknown world spec keys: {sorted(unknown)}")
    s = dict(_DEFAULTS, **spec)
    if s["shape"] not in SHAPES:
        raise ValueError(f"unknown world shape {s['shape']!r}")

    if s["shape"] == "square":
        world = square_loop_world(s["size"], density=s["density"], seed=s["seed"])
        poses = rounded_square_path(s["size"], 3.0, s["frames"], laps=s["laps"])
    elif s["shape"] == "corridor":
        length = s["frames"] * s["step"] + 10.0
        world = corridor_world(length=length, density=s["density"])
        poses = straight_path(s["frames"], s["step"])
    elif s["shape"] == "two_rooms":
        world = two_room_world(s["separation"], seed=s["seed"])
        poses = two_room_path(s["separation"], step=s["step"])
        poses = poses[: s["frames"]] if s["frames"] < len(poses) else poses
    else:  # static
        world = corridor_world(length=20.0)
        poses = [Pose.identity() for _ in range(s["frames"])]

    model = LidarModel(noise_std=s["noise"])
    rng = np.random.default_rng(s["seed"])
    scans = [
        simulate_scan(world, pose, model, rng, frame_index=k)
        for k, pose in enumerate(poses)
    ]
    return scans, poses
