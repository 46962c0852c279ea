import numpy as np
import pytest

from featslam.geometry import Pose, Rotation
from featslam.simulate import (
    LidarModel,
    Pole,
    Wall,
    World,
    circle_path,
    corridor_world,
    generate_world,
    rounded_square_path,
    simulate_scan,
    square_loop_world,
    straight_path,
    two_room_world,
)


class TestLidarModel:
    def test_ray_directions_unit_norm(self):
        model = LidarModel()
        dirs, rings = model.ray_directions()
        np.testing.assert_allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=1e-12)
        assert dirs.shape == (model.num_rings * model.points_per_ring, 3)
        assert set(np.unique(rings)) == set(range(model.num_rings))

    def test_elevation_span(self):
        model = LidarModel(num_rings=4, elevation_min_deg=-10, elevation_max_deg=2)
        dirs, rings = model.ray_directions()
        elev = np.degrees(np.arcsin(dirs[:, 2]))
        np.testing.assert_allclose(elev.min(), -10, atol=1e-9)
        np.testing.assert_allclose(elev.max(), 2, atol=1e-9)


class TestSimulateScan:
    def test_zero_noise_repeatable(self):
        world = corridor_world()
        model = LidarModel(noise_std=0.0)
        rng = np.random.default_rng(0)
        a = simulate_scan(world, Pose.identity(), model, rng, 0)
        b = simulate_scan(world, Pose.identity(), model, rng, 1)
        np.testing.assert_array_equal(a.xyz, b.xyz)
        np.testing.assert_array_equal(a.ring, b.ring)

    def test_wall_returns_lie_on_wall(self):
        world = World(walls=[Wall((5.0, -10.0), (5.0, 10.0))], poles=[], ground_z=-100.0)
        model = LidarModel(noise_std=0.0, num_rings=1, elevation_min_deg=0,
                           elevation_max_deg=0)
        scan = simulate_scan(world, Pose.identity(), model, np.random.default_rng(0), 0)
        assert len(scan.xyz) > 0
        np.testing.assert_allclose(scan.xyz[:, 0], 5.0, atol=1e-9)

    def test_pole_returns_on_cylinder_surface(self):
        pole = Pole(center=(4.0, 0.0), radius=0.3)
        world = World(walls=[], poles=[pole], ground_z=-100.0)
        model = LidarModel(noise_std=0.0, num_rings=1, elevation_min_deg=0,
                           elevation_max_deg=0, points_per_ring=720)
        scan = simulate_scan(world, Pose.identity(), model, np.random.default_rng(0), 0)
        assert len(scan.xyz) > 0
        r = np.linalg.norm(scan.xyz[:, :2] - np.array([4.0, 0.0]), axis=1)
        np.testing.assert_allclose(r, 0.3, atol=1e-9)

    def test_noise_perturbs_along_ray(self):
        world = World(walls=[Wall((5.0, -10.0), (5.0, 10.0))], poles=[], ground_z=-100.0)
        model = LidarModel(noise_std=0.05, num_rings=1, elevation_min_deg=0,
                           elevation_max_deg=0)
        scan = simulate_scan(world, Pose.identity(), model, np.random.default_rng(3), 0)
        spread = scan.xyz[:, 0].std()
        assert 0.0 < spread < 0.2

    def test_points_are_sensor_frame(self):
        world = corridor_world()
        model = LidarModel(noise_std=0.0)
        pose = Pose(Rotation.from_rotvec([0, 0, 0.3]), [4.0, 0.5, 0.0])
        scan = simulate_scan(world, pose, model, np.random.default_rng(0), 0)
        ranges = np.linalg.norm(scan.xyz, axis=1)
        assert (ranges >= model.min_range - 1e-6).all()
        assert (ranges <= model.max_range + 0.1).all()


class TestPaths:
    def test_straight_path_spacing(self):
        path = straight_path(5, 0.5)
        np.testing.assert_allclose(path[4].translation, [2.0, 0.0, 0.0], atol=1e-12)

    def test_circle_path_closes(self):
        path = circle_path(101, radius=10.0, laps=1.0)
        d = np.linalg.norm(path[0].translation - path[-1].translation)
        assert d < 1e-9

    def test_rounded_square_closes_and_heading_continuous(self):
        path = rounded_square_path(side=30.0, corner_radius=6.0, frames=400, laps=1.0)
        assert np.linalg.norm(path[0].translation - path[-1].translation) < 1e-9
        headings = []
        for p in path:
            fwd = p.rotation.apply(np.array([[1.0, 0.0, 0.0]]))[0]
            headings.append(np.arctan2(fwd[1], fwd[0]))
        steps = np.abs(np.diff(np.unwrap(headings)))
        assert steps.max() < 0.2


class TestWorlds:
    def test_two_room_world_has_separated_rooms(self):
        world = two_room_world(separation=60.0)
        xs = [w.p0[0] for w in world.walls] + [w.p1[0] for w in world.walls]
        assert min(xs) < 10.0 and max(xs) > 50.0

    def test_square_loop_world_pole_lane_clear(self):
        world = square_loop_world(side=30.0)
        # poles must not block the driving centerline
        half = 15.0
        for pole in world.poles:
            x, y = pole.center
            d_edge = min(abs(abs(x) - half), abs(abs(y) - half))
            assert d_edge > 0.5


class TestGenerateWorld:
    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError):
            generate_world({"shape": "square", "bogus": 1})

    def test_unknown_shape_rejected(self):
        with pytest.raises(ValueError):
            generate_world({"shape": "dodecahedron"})

    def test_static_shape_produces_identical_scans(self):
        scans, poses = generate_world({"shape": "static", "frames": 2, "noise": 0.0})
        assert len(scans) == len(poses) == 2
        np.testing.assert_array_equal(scans[0].xyz, scans[1].xyz)
        assert np.allclose(poses[0].matrix(), poses[1].matrix())

    def test_square_first_and_last_pose_coincide(self):
        _, poses = generate_world(
            {"shape": "square", "frames": 40, "noise": 0.0, "size": 30.0}
        )
        d = np.linalg.norm(poses[0].translation - poses[-1].translation)
        assert d < 1e-9

    def test_scan_count_matches_frames(self):
        scans, poses = generate_world({"shape": "corridor", "frames": 3, "noise": 0.01})
        assert len(scans) == 3 and len(poses) == 3
