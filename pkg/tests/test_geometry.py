import numpy as np
import pytest

from angio4d import geometry
from angio4d.geometry import (
    CArmPose,
    DetectorGrid,
    SceneBounds,
    Rays,
    make_rays,
    pose_rotation,
    pose_to_frame,
    sample_rays,
)


def rodrigues(axis, angle_deg):
    """Independent axis-angle rotation matrix (matrix exponential form)."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    a = np.deg2rad(angle_deg)
    k = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    return np.eye(3) + np.sin(a) * k + (1 - np.cos(a)) * (k @ k)


class TestPoseToFrame:
    def test_zero_pose(self):
        frame = pose_to_frame(CArmPose(0, 0, 750, 1200))
        np.testing.assert_allclose(frame.source_mm, [0, -750, 0], atol=1e-12)
        np.testing.assert_allclose(frame.detector_center_mm, [0, 450, 0], atol=1e-12)
        np.testing.assert_allclose(frame.principal_axis, [0, 1, 0], atol=1e-12)

    def test_quarter_turn_orthogonality(self):
        zero = pose_to_frame(CArmPose(0, 0, 750, 1200))
        quarter = pose_to_frame(CArmPose(90, 0, 750, 1200))
        assert abs(zero.source_mm @ quarter.source_mm) < 1e-9

    def test_composed_rotation_matches_independent_matrices(self):
        # secondary rotation about the lateral axis produced by the primary
        # rotation, composed numerically with an independent Rodrigues routine
        pose = CArmPose(30, 20, 750, 1200)
        r_primary = rodrigues([0, 0, 1], 30)
        lateral = r_primary @ np.array([1.0, 0.0, 0.0])
        r_expected = rodrigues(lateral, 20) @ r_primary
        np.testing.assert_allclose(pose_rotation(pose), r_expected, atol=1e-12)
        frame = pose_to_frame(pose)
        np.testing.assert_allclose(frame.source_mm, r_expected @ [0, -750, 0], atol=1e-9)
        np.testing.assert_allclose(frame.u_axis, r_expected @ [1, 0, 0], atol=1e-12)
        np.testing.assert_allclose(frame.v_axis, r_expected @ [0, 0, 1], atol=1e-12)

    @pytest.mark.parametrize("primary,secondary", [(0, 0), (45, -20), (-120, 15)])
    def test_frame_orthonormal_right_handed(self, primary, secondary):
        rot = pose_rotation(CArmPose(primary, secondary, 750, 1200))
        np.testing.assert_allclose(rot @ rot.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(rot) > 0

    def test_source_distance(self):
        frame = pose_to_frame(CArmPose(33, -14, 820, 1190))
        assert np.linalg.norm(frame.source_mm) == pytest.approx(820)
        assert np.linalg.norm(frame.detector_center_mm - frame.source_mm) == pytest.approx(1190)

    def test_invalid_distances_rejected(self):
        with pytest.raises(ValueError):
            CArmPose(0, 0, 1200, 750)
        with pytest.raises(ValueError):
            CArmPose(0, 0, -1, 10)


class TestMakeRays:
    def test_center_pixel_is_principal_ray(self):
        det = DetectorGrid(5, 5, 2.0)  # odd size: center pixel exactly on axis
        rays = make_rays(CArmPose(0, 0), det, SceneBounds(), [[2, 2]])
        np.testing.assert_allclose(rays.directions[0], [0, 1, 0], atol=1e-12)

    def test_axis_aligned_slab_arithmetic(self):
        rays = Rays(
            origins=np.array([[0.0, -3.0, 0.0]]),
            directions=np.array([[0.0, 1.0, 0.0]]),
            t_near=np.zeros(1),
            t_far=np.zeros(1),
            hit=np.ones(1, bool),
            world_scale_mm=64.0,
        )
        t_near, t_far, hit = geometry._slab_intersect(
            rays.origins, rays.directions, -1.0, 1.0
        )
        assert hit[0]
        assert t_near[0] == pytest.approx(2.0)
        assert t_far[0] == pytest.approx(4.0)

    def test_brute_force_march_oracle(self):
        # step 1e-4 along each ray and record the first/last in-box points
        rng = np.random.default_rng(3)
        det = DetectorGrid(64, 64, 4.0)
        pose = CArmPose(25, -10)
        pix = np.stack([rng.integers(0, 64, 16), rng.integers(0, 64, 16)], axis=1)
        rays = make_rays(pose, det, SceneBounds(), pix)
        step = 1e-4
        ts = np.arange(0.0, 15.0, step)
        for i in range(len(rays)):
            pts = rays.origins[i] + ts[:, None] * rays.directions[i]
            inside = np.abs(pts).max(axis=1) <= 1.0
            if not inside.any():
                assert not rays.hit[i]
                continue
            first, last = ts[inside][0], ts[inside][-1]
            assert rays.hit[i]
            assert abs(rays.t_near[i] - first) < 2e-4
            assert abs(rays.t_far[i] - last) < 2e-4

    def test_pixel_indices_validated(self):
        det = DetectorGrid(8, 8)
        with pytest.raises(ValueError):
            make_rays(CArmPose(0, 0), det, SceneBounds(), [[8, 0]])

    def test_pinhole_round_trip(self):
        # the ray through pixel (i, j) projects back to (i, j)
        rng = np.random.default_rng(11)
        det = DetectorGrid(200, 200, 1.5)
        bounds = SceneBounds()
        for pose in (CArmPose(0, 0), CArmPose(37, 18), CArmPose(-62, -19)):
            frame = pose_to_frame(pose)
            pix = np.stack([rng.integers(0, 200, 32), rng.integers(0, 200, 32)], axis=1)
            rays = make_rays(pose, det, bounds, pix)
            # take an arbitrary point along each ray, in millimeters
            pts = (rays.origins + 2.5 * rays.directions) * bounds.world_scale_mm
            src = frame.source_mm
            lam = ((frame.detector_center_mm - src) @ frame.principal_axis) / (
                (pts - src) @ frame.principal_axis
            )
            proj = src + lam[:, None] * (pts - src)
            rel = proj - frame.detector_center_mm
            iu = rel @ frame.u_axis / det.pixel_pitch_mm + (det.width_px - 1) / 2
            iv = rel @ frame.v_axis / det.pixel_pitch_mm + (det.height_px - 1) / 2
            np.testing.assert_allclose(iu, pix[:, 0], atol=1e-6)
            np.testing.assert_allclose(iv, pix[:, 1], atol=1e-6)

    def test_rotational_consistency(self):
        # rotating the pose about the primary axis rotates all rays identically
        det = DetectorGrid(16, 16, 6.0)
        bounds = SceneBounds()
        base = make_rays(CArmPose(10, 25), det, bounds)
        rotated = make_rays(CArmPose(10 + 40, 25), det, bounds)
        rot = geometry.rotation_z(40)
        np.testing.assert_allclose(rotated.origins, base.origins @ rot.T, atol=1e-9)
        np.testing.assert_allclose(rotated.directions, base.directions @ rot.T, atol=1e-9)

    def test_directions_unit_norm(self):
        rays = make_rays(CArmPose(47, -12), DetectorGrid(32, 32, 4.0), SceneBounds())
        np.testing.assert_allclose(np.linalg.norm(rays.directions, axis=1), 1.0, atol=1e-9)


class TestSampleRays:
    def _ray(self, t_near=0.0, t_far=1.0, world_scale=64.0):
        return Rays(
            origins=np.array([[0.0, -3.0, 0.0]]),
            directions=np.array([[0.0, 1.0, 0.0]]),
            t_near=np.array([t_near]),
            t_far=np.array([t_far]),
            hit=np.ones(1, bool),
            world_scale_mm=world_scale,
        )

    def test_bin_centers(self):
        positions, deltas = sample_rays(self._ray(), 4)
        t = positions[0, :, 1] + 3.0  # origin y = -3
        np.testing.assert_allclose(t, [0.125, 0.375, 0.625, 0.875], atol=1e-12)
        np.testing.assert_allclose(deltas[0], 0.25 * 64.0, atol=1e-12)

    def test_single_sample_is_midpoint(self):
        positions, deltas = sample_rays(self._ray(2.0, 4.0), 1)
        assert positions[0, 0, 1] + 3.0 == pytest.approx(3.0)
        assert deltas[0, 0] == pytest.approx(2.0 * 64.0)

    def test_jitter_stays_in_bins_and_conserves_length(self):
        rng = np.random.default_rng(0)
        ray = self._ray(0.5, 2.5)
        positions, deltas = sample_rays(ray, 256, jitter=True, rng=rng)
        t = positions[0, :, 1] + 3.0
        edges = 0.5 + 2.0 * np.arange(257) / 256
        assert np.all(t >= edges[:-1]) and np.all(t <= edges[1:])
        assert deltas.sum() == pytest.approx(2.0 * 64.0, rel=1e-9)

    def test_miss_ray_rejected(self):
        ray = self._ray()
        ray.hit[0] = False
        with pytest.raises(ValueError):
            sample_rays(ray, 4)

    def test_chord_length_property(self):
        rng = np.random.default_rng(5)
        rays = make_rays(CArmPose(33, 12), DetectorGrid(16, 16, 8.0), SceneBounds())
        sel = rays.select(rays.hit)
        _, deltas = sample_rays(sel, 17, jitter=True, rng=rng)
        chords = (sel.t_far - sel.t_near) * sel.world_scale_mm
        np.testing.assert_allclose(deltas.sum(axis=1), chords, rtol=1e-9)
