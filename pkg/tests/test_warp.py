import numpy as np
import pytest

from demakeup import warp
from testutil import bilinear_sample, tps_oracle_field


def random_keypoints(rng, low=4.0, high=28.0, min_dist=0.75):
    """Random non-degenerate keypoint set: landmarks from a detector are
    distinct facial points, so enforce a minimal pairwise separation."""
    points = []
    while len(points) < warp.NUM_KEYPOINTS:
        candidate = rng.uniform(low, high, size=2)
        if all(np.linalg.norm(candidate - p) >= min_dist for p in points):
            points.append(candidate)
    return np.array(points)


class TestThinPlateSpline:
    def test_identity_correspondence_gives_zero_field(self):
        rng = np.random.default_rng(0)
        kps = random_keypoints(rng)
        field = warp.compute_warp_field(kps, kps, 16, 16)
        assert np.abs(field).max() <= 1e-9

    def test_pure_translation_is_reproduced_exactly(self):
        rng = np.random.default_rng(1)
        dst = random_keypoints(rng)
        src = dst + np.array([5.0, 0.0])
        field = warp.compute_warp_field(dst, src, 16, 16)
        assert np.abs(field - np.array([5.0, 0.0])).max() <= 1e-6

    def test_single_displaced_landmark_matches_dense_oracle(self):
        rng = np.random.default_rng(2)
        dst = random_keypoints(rng)
        src = dst.copy()
        src[11] += np.array([3.0, 0.0])
        spline = warp.fit_warp_spline(dst, src)
        at_landmark = spline(dst[11])[0]
        assert np.abs(at_landmark - np.array([3.0, 0.0])).max() <= 1e-6

        field = warp.compute_warp_field(dst, src, 16, 16)
        oracle = tps_oracle_field(dst, src, 16, 16)
        assert np.abs(field - oracle).max() <= 1e-6

        # Influence decays with distance from the displaced landmark (within
        # the control region; TPS extrapolation outside the hull can grow).
        near_mag = np.linalg.norm(spline(dst[11] + np.array([0.3, 0.3]))[0])
        fixed = np.delete(dst, 11, axis=0)
        interior_far = fixed[
            np.argmax(np.linalg.norm(fixed - dst[11], axis=1))
        ]
        far_mag = np.linalg.norm(spline(interior_far)[0])
        assert near_mag > far_mag

    @pytest.mark.parametrize("seed", [3, 4, 5, 6, 7])
    def test_landmark_interpolation_exactness(self, seed):
        rng = np.random.default_rng(seed)
        dst = random_keypoints(rng)
        src = dst + rng.uniform(-3.0, 3.0, size=dst.shape)
        spline = warp.fit_warp_spline(dst, src)
        residual = spline(dst) - (src - dst)
        assert np.abs(residual).max() <= 1e-6

    def test_translation_equivariance(self):
        rng = np.random.default_rng(8)
        dst = random_keypoints(rng)
        src = dst + rng.uniform(-2.0, 2.0, size=dst.shape)
        offset = np.array([7.3, -4.1])
        base = warp.fit_warp_spline(dst, src)
        shifted = warp.fit_warp_spline(dst + offset, src + offset)
        queries = rng.uniform(0.0, 32.0, size=(50, 2))
        assert np.abs(shifted(queries + offset) - base(queries)).max() <= 1e-6

    def test_translation_equivariance_dense_integer_offset(self):
        rng = np.random.default_rng(9)
        dst = random_keypoints(rng, low=8.0, high=20.0)
        src = dst + rng.uniform(-1.5, 1.5, size=dst.shape)
        f0 = warp.compute_warp_field(dst, src, 32, 32)
        f1 = warp.compute_warp_field(dst + np.array([3.0, 2.0]), src + np.array([3.0, 2.0]), 32, 32)
        assert np.abs(f1[3:, 2:] - f0[:-3, :-2]).max() <= 1e-6

    def test_collinear_landmarks_raise(self):
        cols = np.linspace(0.0, 67.0, warp.NUM_KEYPOINTS)
        dst = np.stack([np.full(warp.NUM_KEYPOINTS, 5.0), cols], axis=1)
        with pytest.raises(warp.DegenerateLandmarksError, match="singular"):
            warp.fit_warp_spline(dst, dst + 1.0)

    def test_coincident_landmarks_raise(self):
        dst = np.full((warp.NUM_KEYPOINTS, 2), 7.0)
        with pytest.raises(warp.DegenerateLandmarksError, match="singular"):
            warp.fit_warp_spline(dst, dst)

    def test_duplicate_landmarks_are_merged(self):
        rng = np.random.default_rng(10)
        dst = random_keypoints(rng)
        dst[12] = dst[13] + 1e-10  # closer than merge tolerance
        src = dst + rng.uniform(-1.0, 1.0, size=dst.shape)
        src[12] = src[13]
        spline = warp.fit_warp_spline(dst, src)
        assert np.isfinite(spline(dst)).all()

    def test_rejects_tiny_output(self):
        rng = np.random.default_rng(11)
        kps = random_keypoints(rng)
        with pytest.raises(ValueError, match=">= 8"):
            warp.compute_warp_field(kps, kps, 4, 16)

    def test_validate_keypoints(self):
        with pytest.raises(ValueError, match="68"):
            warp.validate_keypoints(np.zeros((5, 2)))
        bad = np.zeros((68, 2))
        bad[3, 1] = np.nan
        with pytest.raises(ValueError, match="finite"):
            warp.validate_keypoints(bad)


class TestApplyWarp:
    def test_zero_field_is_identity_bit_exact(self):
        rng = np.random.default_rng(20)
        img = rng.uniform(-1.0, 1.0, size=(9, 7, 3)).astype(np.float32)
        out = warp.apply_warp(img, np.zeros((9, 7, 2)))
        assert out.dtype == img.dtype
        assert np.array_equal(out, img)

    def test_unit_column_shift_with_edge_clamp(self):
        rng = np.random.default_rng(21)
        img = rng.uniform(-1.0, 1.0, size=(5, 6))
        field = np.zeros((5, 6, 2))
        field[..., 1] = 1.0
        out = warp.apply_warp(img, field)
        assert np.array_equal(out[:, :-1], img[:, 1:])
        assert np.array_equal(out[:, -1], img[:, -1])

    def test_half_pixel_shift_matches_hand_bilinear(self):
        img = np.array([[0.2, 0.8], [-0.4, 0.6]])
        field = np.zeros((2, 2, 2))
        field[..., 1] = 0.5
        out = warp.apply_warp(img, field)
        expected = np.array(
            [[0.5 * 0.2 + 0.5 * 0.8, 0.8], [0.5 * -0.4 + 0.5 * 0.6, 0.6]]
        )
        assert np.abs(out - expected).max() <= 1e-12

    def test_matches_loop_oracle_on_random_field(self):
        rng = np.random.default_rng(22)
        img = rng.uniform(-1.0, 1.0, size=(8, 8, 3))
        field = rng.uniform(-3.0, 3.0, size=(8, 8, 2))
        out = warp.apply_warp(img, field)
        for r in range(8):
            for c in range(8):
                expected = bilinear_sample(img, r + field[r, c, 0], c + field[r, c, 1])
                assert np.abs(out[r, c] - expected).max() <= 1e-12

    def test_output_range_never_exceeds_input_range(self):
        rng = np.random.default_rng(23)
        for _ in range(10):
            img = rng.uniform(-1.0, 1.0, size=(8, 8, 3))
            field = rng.uniform(-10.0, 10.0, size=(8, 8, 2))
            out = warp.apply_warp(img, field)
            assert out.min() >= img.min() - 1e-12
            assert out.max() <= img.max() + 1e-12

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError, match="does not match"):
            warp.apply_warp(np.zeros((4, 4)), np.zeros((5, 4, 2)))


class TestWarpGroundTruth:
    def test_already_aligned_pair_returns_input(self):
        rng = np.random.default_rng(30)
        img = rng.uniform(-1.0, 1.0, size=(16, 16, 3))
        kps = random_keypoints(rng, low=2.0, high=14.0)
        out = warp.warp_ground_truth(img, kps, kps)
        assert np.array_equal(out, img)

    def test_global_translation_shifts_image(self):
        rng = np.random.default_rng(31)
        img = rng.uniform(-1.0, 1.0, size=(16, 16, 3))
        kps_x = random_keypoints(rng, low=3.0, high=13.0)
        t = np.array([2.0, 0.0])
        kps_y = kps_x + t
        out = warp.warp_ground_truth(img, kps_y, kps_x)
        # W(p) samples Y at p + t: rows shift up by 2, bottom rows clamp.
        assert np.abs(out[:-2] - img[2:]).max() <= 1e-6

    def test_known_affine_misalignment_residual_below_half_pixel(self):
        rng = np.random.default_rng(32)
        kps_y = random_keypoints(rng, low=6.0, high=26.0)
        angle = np.deg2rad(3.0)
        rot = np.array(
            [[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]]
        )
        center = np.array([16.0, 16.0])
        shift = np.array([1.5, -2.0])
        kps_x = (kps_y - center) @ rot.T * 1.02 + center + shift
        field = warp.compute_warp_field(kps_x, kps_y, 32, 32)
        residuals = []
        for i in range(warp.NUM_KEYPOINTS):
            disp = bilinear_sample(field, kps_x[i, 0], kps_x[i, 1])
            residuals.append(np.linalg.norm(kps_x[i] + disp - kps_y[i]))
        assert np.mean(residuals) < 0.5


class TestKeypointFiles:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(40)
        pts = random_keypoints(rng)
        path = tmp_path / "kps.txt"
        warp.save_keypoints(path, pts)
        loaded = warp.load_keypoints(path)
        assert np.abs(loaded - pts).max() <= 5e-7  # 6-decimal file precision

    def test_wrong_count_raises(self, tmp_path):
        path = tmp_path / "kps.txt"
        path.write_text("1.0 2.0\n3.0 4.0\n")
        with pytest.raises(ValueError, match="68"):
            warp.load_keypoints(path)

    def test_malformed_line_raises(self, tmp_path):
        path = tmp_path / "kps.txt"
        path.write_text("1.0 2.0 3.0\n")
        with pytest.raises(ValueError, match="row col"):
            warp.load_keypoints(path)
