import numpy as np
import pytest

from featslam.dataset_io import (
    FormatError,
    GroundTruthTrajectory,
    export_map,
    export_trajectory,
    load_calibration,
    load_ground_truth,
    load_poses,
    load_scan,
    ring_from_elevation,
)
from featslam.geometry import Pose, Rotation


def write_bin(path, rows):
    np.asarray(rows, dtype=np.float32).tofile(path)


class TestLoadScan:
    def test_two_point_decode(self, tmp_path):
        f = tmp_path / "scan.bin"
        write_bin(f, [[1.0, 2.0, 3.0, 0.5], [4.0, 5.0, 6.0, 0.25]])
        assert f.stat().st_size == 32
        scan = load_scan(f)
        assert len(scan) == 2
        np.testing.assert_allclose(scan.xyz, [[1, 2, 3], [4, 5, 6]])
        np.testing.assert_allclose(scan.intensity, [0.5, 0.25])

    def test_empty_file(self, tmp_path):
        f = tmp_path / "empty.bin"
        f.write_bytes(b"")
        scan = load_scan(f)
        assert len(scan) == 0
        assert scan.xyz.shape == (0, 3)

    def test_bad_size_reports_byte_count(self, tmp_path):
        f = tmp_path / "bad.bin"
        f.write_bytes(b"\x00" * 18)
        with pytest.raises(FormatError, match="18"):
            load_scan(f)

    def test_nonfinite_rows_dropped_and_counted(self, tmp_path):
        f = tmp_path / "nan.bin"
        write_bin(
            f,
            [
                [1.0, 0.0, 0.0, 0.0],
                [np.nan, 0.0, 0.0, 0.0],
                [2.0, 0.0, 0.0, 0.0],
                [0.0, np.inf, 0.0, 0.0],
            ],
        )
        scan = load_scan(f)
        assert len(scan) == 2
        assert scan.dropped == 2
        np.testing.assert_allclose(scan.xyz[:, 0], [1.0, 2.0])

    def test_ring_assignment_zero_elevation(self, tmp_path):
        # elevation 0 deg, 64 lasers: floor((0+24.8)/26.8*64) = floor(59.22) = 59
        f = tmp_path / "flat.bin"
        write_bin(f, [[10.0, 0.0, 0.0, 0.0]])
        scan = load_scan(f, num_lasers=64)
        assert scan.ring[0] == 59

    def test_ring_bounds_clipped(self):
        xyz = np.array(
            [
                [1.0, 0.0, 10.0],  # way above max elevation
                [1.0, 0.0, -10.0],  # way below min elevation
            ]
        )
        ring = ring_from_elevation(xyz, 64)
        assert ring[0] == 63
        assert ring[1] == 0

    def test_random_bytes_never_crash(self, tmp_path):
        rng = np.random.default_rng(7)
        for k in range(50):
            f = tmp_path / f"r{k}.bin"
            f.write_bytes(rng.bytes(int(rng.integers(0, 200))))
            try:
                scan = load_scan(f)
            except FormatError:
                continue
            assert np.isfinite(scan.xyz).all()


class TestGroundTruth:
    def test_identity_pose_line(self, tmp_path):
        p = tmp_path / "poses.txt"
        p.write_text("1 0 0 0 0 1 0 0 0 0 1 0\n")
        poses = load_poses(p)
        assert len(poses) == 1
        np.testing.assert_allclose(poses[0].matrix(), np.eye(4), atol=1e-12)

    def test_wrong_token_count_reports_line(self, tmp_path):
        p = tmp_path / "poses.txt"
        p.write_text("1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0 0 0 0 1\n")
        with pytest.raises(FormatError, match="2"):
            load_poses(p)

    def test_calibration_tr_line(self, tmp_path):
        c = tmp_path / "calib.txt"
        c.write_text(
            "P0: 1 0 0 0 0 1 0 0 0 0 1 0\n"
            "Tr: 1 0 0 0.5 0 1 0 0 0 0 1 0.25\n"
        )
        tr = load_calibration(c)
        np.testing.assert_allclose(tr.translation, [0.5, 0.0, 0.25])

    def test_missing_tr_line(self, tmp_path):
        c = tmp_path / "calib.txt"
        c.write_text("P0: 1 0 0 0 0 1 0 0 0 0 1 0\n")
        with pytest.raises(FormatError):
            load_calibration(c)

    def test_continuity_guard(self, tmp_path):
        p = tmp_path / "poses.txt"
        p.write_text(
            "1 0 0 0 0 1 0 0 0 0 1 0\n"
            "1 0 0 99 0 1 0 0 0 0 1 0\n"  # 99 m jump
        )
        c = tmp_path / "calib.txt"
        c.write_text("Tr: 1 0 0 0 0 1 0 0 0 0 1 0\n")
        with pytest.raises(FormatError, match="jump|continuity|5"):
            load_ground_truth(p, c)

    def test_lidar_pose_conjugation(self):
        tr = Pose(Rotation.from_rotvec([0, 0, np.pi / 2]), [1.0, 0.0, 0.0])
        cam = Pose(Rotation.identity(), [2.0, 0.0, 0.0])
        gt = GroundTruthTrajectory(camera_poses=[cam], calibration=tr)
        lidar = gt.lidar_poses()[0]
        expected = tr.inverse().compose(cam).compose(tr)
        np.testing.assert_allclose(lidar.matrix(), expected.matrix(), atol=1e-12)


class TestExportTrajectory:
    def test_kitti_identity_line(self, tmp_path):
        out = tmp_path / "traj.txt"
        export_trajectory([Pose.identity()], out, format="kitti")
        assert out.read_text().strip() == "1 0 0 0 0 1 0 0 0 0 1 0"

    def test_tum_identity_line(self, tmp_path):
        out = tmp_path / "traj.txt"
        t = Pose(Rotation.identity(), [1.0, 2.0, 3.0])
        export_trajectory([t], out, format="tum")
        assert out.read_text().strip() == "0 1 2 3 0 0 0 1"

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ValueError):
            export_trajectory([Pose.identity()], tmp_path / "x.txt", format="g2o")

    def test_round_trip_1000_poses(self, tmp_path):
        rng = np.random.default_rng(11)
        poses = []
        for _ in range(1000):
            r = Rotation.from_rotvec(rng.uniform(-2, 2, 3))
            poses.append(Pose(r, rng.uniform(-100, 100, 3)))
        out = tmp_path / "traj.txt"
        export_trajectory(poses, out, format="kitti")
        loaded = load_poses(out)
        assert len(loaded) == 1000
        for a, b in zip(poses, loaded):
            np.testing.assert_allclose(a.matrix(), b.matrix(), atol=1e-6)


class TestExportMap:
    class _Cloud:
        def __init__(self, edges, planars):
            self.edges = np.asarray(edges, dtype=float).reshape(-1, 3)
            self.planars = np.asarray(planars, dtype=float).reshape(-1, 3)

    def test_empty_map(self, tmp_path):
        out = tmp_path / "map.ply"
        export_map([], out)
        text = out.read_text()
        assert "element vertex 0" in text
        assert text.startswith("ply")

    def test_single_point_transformed(self, tmp_path):
        cloud = self._Cloud([[0.0, 0.0, 0.0]], np.zeros((0, 3)))
        pose = Pose(Rotation.identity(), [1.0, 0.0, 0.0])
        out = tmp_path / "map.ply"
        export_map([(cloud, pose)], out)
        text = out.read_text()
        assert "element vertex 1" in text
        body = text.split("end_header\n", 1)[1].strip()
        assert body.split() == ["1", "0", "0"]

    def test_vertex_count(self, tmp_path):
        rng = np.random.default_rng(3)
        clouds = []
        total = 0
        for _ in range(4):
            e = rng.normal(size=(5, 3))
            p = rng.normal(size=(7, 3))
            total += 12
            clouds.append((self._Cloud(e, p), Pose.identity()))
        out = tmp_path / "map.ply"
        export_map(clouds, out)
        assert f"element vertex {total}" in out.read_text()
