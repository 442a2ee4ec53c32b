"""Pillarization, multi-camera projection, and bilinear sampling."""

import math

import pytest
import torch

from scenefusion.geometry import (BEVGridSpec, CameraCalibration,
                                  EmptySceneError, PointCloud, bilinear_sample,
                                  project_points, voxelize_pillars)
from scenefusion.selfcheck import finite_difference_check, naive_bilinear


def make_cloud(points, intensity=None):
    pts = torch.as_tensor(points, dtype=torch.float64)
    if intensity is None:
        intensity = torch.full((pts.shape[0],), 0.5, dtype=torch.float64)
    return PointCloud(points=pts, intensity=intensity)


def simple_calib(focal=100.0, cx=50.0, cy=40.0, width=100, height=80,
                 rotation=None, translation=None):
    if rotation is None:
        rotation = torch.eye(3, dtype=torch.float64)
    if translation is None:
        translation = torch.zeros(3, dtype=torch.float64)
    K = torch.tensor([[focal, 0.0, cx], [0.0, focal, cy], [0.0, 0.0, 1.0]],
                     dtype=torch.float64)
    return CameraCalibration(intrinsic=K, rotation=rotation,
                             translation=translation,
                             image_size=(width, height))


class TestBEVGridSpec:
    def test_default_is_180x180(self):
        spec = BEVGridSpec()
        assert spec.W == 180 and spec.H == 180
        assert spec.cell_size == 0.6

    def test_range_must_divide(self):
        with pytest.raises(ValueError):
            BEVGridSpec((-1.0, 1.0), (-1.0, 1.0), 0.7)

    def test_cell_center_inverts_cell_index(self):
        spec = BEVGridSpec()
        rc = torch.tensor([[0, 0], [90, 90], [179, 179]])
        centers = spec.cell_center(rc)
        assert torch.equal(spec.cell_index(centers), rc)


class TestVoxelizePillars:
    def test_point_maps_to_center_pillar(self):
        # floor((0.1 + 54) / 0.6) = 90 on both axes
        spec = BEVGridSpec()
        cloud = make_cloud([[0.1, 0.1, 0.0]])
        assignment = voxelize_pillars(cloud, spec)
        assert assignment.cells.tolist() == [[90, 90]]

    def test_lower_boundary_inclusive(self):
        spec = BEVGridSpec()
        cloud = make_cloud([[-54.0, 0.0, 0.0]])
        assignment = voxelize_pillars(cloud, spec)
        assert assignment.cells[0, 0] == 0

    def test_upper_boundary_exclusive(self):
        spec = BEVGridSpec()
        cloud = make_cloud([[54.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        assignment = voxelize_pillars(cloud, spec)
        # the +54 point is dropped; only the origin point remains
        assert assignment.num_pillars == 1
        assert int(assignment.mask.sum()) == 1

    def test_overflow_truncates_to_L(self):
        spec = BEVGridSpec()
        pts = [[0.1 + 0.01 * i, 0.1, 0.0] for i in range(25)]
        assignment = voxelize_pillars(make_cloud(pts), spec, L=20)
        assert assignment.num_pillars == 1
        assert int(assignment.mask.sum()) == 20

    def test_overflow_keeps_nearest_to_center(self):
        # pillar (0, 0) of a 2x2 grid with center (-0.5, -0.5); the farthest
        # point from the center must be the one dropped
        spec = BEVGridSpec((-1.0, 1.0), (-1.0, 1.0), 1.0)
        pts = [[-0.5, -0.5, 0.0],   # at center
               [-0.95, -0.95, 0.0],  # farthest
               [-0.6, -0.6, 0.0]]
        assignment = voxelize_pillars(make_cloud(pts), spec, L=2)
        kept = set(assignment.indices[assignment.mask].tolist())
        assert kept == {0, 2}

    def test_overflow_tie_broken_by_point_index(self):
        spec = BEVGridSpec((-1.0, 1.0), (-1.0, 1.0), 1.0)
        # three points equidistant from the pillar center
        pts = [[-0.4, -0.5, 0.0], [-0.6, -0.5, 0.0], [-0.5, -0.4, 0.0]]
        assignment = voxelize_pillars(make_cloud(pts), spec, L=2)
        kept = set(assignment.indices[assignment.mask].tolist())
        assert kept == {0, 1}

    def test_partition_no_duplicates(self):
        gen = torch.Generator().manual_seed(3)
        pts = torch.rand(200, 3, generator=gen, dtype=torch.float64) * 8 - 4
        spec = BEVGridSpec((-4.0, 4.0), (-4.0, 4.0), 1.0)
        cloud = PointCloud(points=pts, intensity=torch.rand(200, generator=gen,
                                                            dtype=torch.float64))
        assignment = voxelize_pillars(cloud, spec, L=5)
        valid = assignment.indices[assignment.mask]
        assert valid.numel() == valid.unique().numel()
        # every valid index sits in its pillar's cell
        for p in range(assignment.num_pillars):
            idx = assignment.indices[p][assignment.mask[p]]
            rc = spec.cell_index(pts[idx][:, :2])
            assert (rc == assignment.cells[p]).all()

    def test_partition_counts(self):
        gen = torch.Generator().manual_seed(4)
        pts = torch.rand(300, 3, generator=gen, dtype=torch.float64) * 4 - 2
        spec = BEVGridSpec((-2.0, 2.0), (-2.0, 2.0), 1.0)
        cloud = PointCloud(points=pts, intensity=torch.rand(300, generator=gen,
                                                            dtype=torch.float64))
        L = 10
        assignment = voxelize_pillars(cloud, spec, L=L)
        # valid count = in-range points minus the overflow truncated per pillar
        rc = spec.cell_index(pts[:, :2])
        flat = rc[:, 0] * spec.H + rc[:, 1]
        counts = torch.bincount(flat)
        expected = int(sum(min(int(c), L) for c in counts if c > 0))
        assert int(assignment.mask.sum()) == expected

    def test_empty_cloud_raises(self):
        spec = BEVGridSpec()
        with pytest.raises(EmptySceneError):
            voxelize_pillars(make_cloud([[100.0, 100.0, 0.0]]), spec)


class TestProjectPoints:
    def test_optical_axis_hits_principal_point(self):
        calib = simple_calib(cx=50.0, cy=40.0)
        proj = project_points(make_cloud([[0.0, 0.0, 3.0]]), [calib])
        assert proj.valid[0]
        assert torch.allclose(proj.uv[0], torch.tensor([50.0, 40.0],
                                                       dtype=torch.float64))

    def test_behind_camera_invalid(self):
        calib = simple_calib()
        proj = project_points(make_cloud([[0.0, 0.0, -3.0]]), [calib])
        assert not proj.valid[0]
        assert proj.camera_index[0] == -1

    def test_first_valid_camera_wins(self):
        # cameras 0, 1 see nothing (point behind); 2, 3, 4 all see the point
        flip = torch.tensor([[1.0, 0, 0], [0, -1.0, 0], [0, 0, -1.0]],
                            dtype=torch.float64)
        blind = simple_calib(rotation=flip)
        seeing = simple_calib()
        proj = project_points(make_cloud([[0.0, 0.0, 3.0]]),
                              [blind, blind, seeing, seeing, seeing])
        assert proj.camera_index[0] == 2

    def test_first_valid_matches_bruteforce(self):
        gen = torch.Generator().manual_seed(11)
        pts = torch.randn(50, 3, generator=gen, dtype=torch.float64) * 5
        cloud = PointCloud(points=pts, intensity=torch.rand(50, generator=gen,
                                                            dtype=torch.float64))
        calibs = []
        for i in range(4):
            yaw = math.pi / 2 * i
            c, s = math.cos(yaw), math.sin(yaw)
            # rows (right, down, forward) for a camera looking along yaw
            R = torch.tensor([[s, -c, 0], [0, 0, -1.0], [c, s, 0]],
                             dtype=torch.float64)
            calibs.append(simple_calib(rotation=R))
        proj = project_points(cloud, calibs)
        for n in range(50):
            expect = -1
            for ci, calib in enumerate(calibs):
                cam = calib.ego_to_camera(pts[n:n + 1])[0]
                if cam[2] <= 0:
                    continue
                u = float(calib.intrinsic[0, 0] * cam[0] / cam[2]
                          + calib.intrinsic[0, 2])
                v = float(calib.intrinsic[1, 1] * cam[1] / cam[2]
                          + calib.intrinsic[1, 2])
                w, h = calib.image_size
                if 0 <= u < w and 0 <= v < h:
                    expect = ci
                    break
            assert int(proj.camera_index[n]) == expect

    def test_projection_inverse_roundtrip(self):
        gen = torch.Generator().manual_seed(5)
        yaw = 0.7
        c, s = math.cos(yaw), math.sin(yaw)
        R = torch.tensor([[c, -s, 0], [s, c, 0], [0, 0, 1.0]], dtype=torch.float64)
        t = torch.tensor([0.3, -0.2, 1.1], dtype=torch.float64)
        calib = simple_calib(rotation=R, translation=t)
        pts = torch.randn(30, 3, generator=gen, dtype=torch.float64)
        cam = calib.ego_to_camera(pts)
        back = calib.camera_to_ego(cam)
        assert float((back - pts).abs().max()) < 1e-9

    def test_no_cameras_raises(self):
        with pytest.raises(ValueError):
            project_points(make_cloud([[0.0, 0.0, 1.0]]), [])


class TestCameraCalibration:
    def test_non_orthonormal_rotation_rejected(self):
        R = torch.eye(3, dtype=torch.float64)
        R[0, 0] = 1.1
        with pytest.raises(ValueError):
            simple_calib(rotation=R)

    def test_reflection_rejected(self):
        R = torch.diag(torch.tensor([1.0, 1.0, -1.0], dtype=torch.float64))
        with pytest.raises(ValueError):
            simple_calib(rotation=R)


class TestBilinearSample:
    def test_integer_node_exact(self):
        gen = torch.Generator().manual_seed(1)
        fmap = torch.randn(4, 5, 3, generator=gen, dtype=torch.float64)
        got = bilinear_sample(fmap, torch.tensor([2.0, 3.0], dtype=torch.float64))
        assert torch.equal(got, fmap[2, 3])

    def test_midpoint_is_average(self):
        fmap = torch.zeros(2, 2, 1, dtype=torch.float64)
        fmap[0, 0], fmap[0, 1], fmap[1, 0], fmap[1, 1] = 1.0, 2.0, 3.0, 4.0
        got = bilinear_sample(fmap, torch.tensor([0.5, 0.5], dtype=torch.float64))
        assert abs(float(got) - 2.5) < 1e-12

    def test_matches_scalar_oracle(self):
        gen = torch.Generator().manual_seed(2)
        for _ in range(20):
            fmap = torch.randn(5, 5, 3, generator=gen, dtype=torch.float64)
            uv = torch.rand(2, generator=gen, dtype=torch.float64) * 6 - 0.5
            got = bilinear_sample(fmap, uv)
            ref = naive_bilinear(fmap, float(uv[0]), float(uv[1]))
            assert float((got - ref).abs().max()) < 1e-12

    def test_linearity_in_map(self):
        gen = torch.Generator().manual_seed(6)
        a = torch.randn(5, 5, 2, generator=gen, dtype=torch.float64)
        b = torch.randn(5, 5, 2, generator=gen, dtype=torch.float64)
        uv = torch.tensor([1.3, 2.7], dtype=torch.float64)
        combo = bilinear_sample(0.3 * a + 1.7 * b, uv)
        parts = 0.3 * bilinear_sample(a, uv) + 1.7 * bilinear_sample(b, uv)
        assert float((combo - parts).abs().max()) < 1e-12

    def test_out_of_bounds_reads_zero(self):
        fmap = torch.ones(3, 3, 1, dtype=torch.float64)
        got = bilinear_sample(fmap, torch.tensor([-0.5, 1.0], dtype=torch.float64))
        assert abs(float(got) - 0.5) < 1e-12  # half the weight falls outside
        far = bilinear_sample(fmap, torch.tensor([-5.0, -5.0], dtype=torch.float64))
        assert float(far.abs().max()) == 0.0

    def test_gradient_wrt_uv_matches_fd(self):
        # away from integer coordinates, where the blend is smooth
        gen = torch.Generator().manual_seed(7)
        fmap = torch.randn(5, 5, 2, generator=gen, dtype=torch.float64)
        uv = torch.tensor([1.37, 2.61], dtype=torch.float64, requires_grad=True)
        probe = torch.randn(2, generator=gen, dtype=torch.float64)
        err = finite_difference_check(
            lambda: (bilinear_sample(fmap, uv) * probe).sum(), [uv])
        assert err < 1e-4

    def test_gradient_wrt_map_matches_fd(self):
        gen = torch.Generator().manual_seed(8)
        fmap = torch.randn(4, 4, 2, generator=gen,
                           dtype=torch.float64).requires_grad_()
        uv = torch.tensor([0.8, 2.2], dtype=torch.float64)
        probe = torch.randn(2, generator=gen, dtype=torch.float64)
        err = finite_difference_check(
            lambda: (bilinear_sample(fmap, uv) * probe).sum(), [fmap])
        assert err < 1e-4
