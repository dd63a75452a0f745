import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uavmocap.camera import (
    CameraPose, CropParams, Intrinsics, IDENTITY_CROP, crop_intrinsics, crop_params_from_bbox,
    crop_to_full, crop_to_full_jnp, full_to_crop, full_to_crop_jnp, full_to_crop_pixels, project,
    squarify_bbox, tau_denormalize, tau_normalize,
)
from uavmocap.errors import BehindCamera, EmptyBox, NotARotation, ShapeMismatch

K1000 = Intrinsics(1000.0, 1000.0, 500.0, 500.0, 1000, 1000)


class TestProject:
    def test_optical_axis(self):
        for z in (0.1, 1.0, 37.0):
            np.testing.assert_allclose(project([0, 0, z], K1000), [500, 500])

    def test_arithmetic(self):
        np.testing.assert_allclose(project([1, 0, 10], K1000), [600, 500])

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.1, 50), st.floats(0.01, 100))
    def test_ray_invariance(self, x, y, z, lam):
        p = np.array([x, y, z])
        np.testing.assert_allclose(project(lam * p, K1000), project(p, K1000), rtol=1e-10, atol=1e-8)

    def test_behind(self):
        with pytest.raises(BehindCamera):
            project([0, 0, 1e-7], K1000)
        with pytest.raises(BehindCamera):
            project([0, 0, -1], K1000)


class TestCropParams:
    def test_centered(self):
        P = crop_params_from_bbox(500 - 112, 500 - 112, 224, K1000)
        assert P.bx == 0 and P.by == 0 and P.s == 1

    def test_worked_example(self):
        K = Intrinsics(1000, 1000, 512, 512, 1024, 1024)
        P = crop_params_from_bbox(400, 200, 448, K)
        assert P.s == 2 and P.bx == 0.21875 and P.by == -0.171875

    def test_empty(self):
        with pytest.raises(EmptyBox):
            crop_params_from_bbox(0, 0, 0, K1000)
        with pytest.raises(EmptyBox):
            CropParams(0, 0, -1)

    def test_squarify(self):
        x0, y0, side = squarify_bbox(10, 20, 30, 100)
        assert side == 80 and x0 == -20 and y0 == 20
        _, _, padded = squarify_bbox(10, 20, 30, 100, pad=0.1)
        assert padded == pytest.approx(88)


class TestCropFull:
    def test_identity_crop(self):
        t = np.array([0.3, -0.2, 7.0])
        np.testing.assert_array_equal(crop_to_full(t, IDENTITY_CROP, K1000), t)
        np.testing.assert_array_equal(full_to_crop(t, IDENTITY_CROP, K1000), t)

    def test_depth_scaling(self):
        assert crop_to_full([0, 0, 2], CropParams(0, 0, 5), K1000)[2] == 10
        assert full_to_crop([0, 0, 10], CropParams(0, 0, 5), K1000)[2] == 2

    def test_worked_example(self):
        np.testing.assert_allclose(crop_to_full([0.5, 0.3, 4], CropParams(0.2, -0.1, 2), K1000),
                                   [1.3, -0.1, 8.0], atol=1e-15)

    def test_behind(self):
        with pytest.raises(BehindCamera):
            crop_to_full([0, 0, 0], IDENTITY_CROP, K1000)
        with pytest.raises(BehindCamera):
            full_to_crop([0, 0, -1], IDENTITY_CROP, K1000)

    def test_batched_round_trip_and_row_identity(self, rng):
        n = 10_000
        tau = np.c_[rng.uniform(-5, 5, (n, 2)), rng.uniform(0.5, 50, n)]
        p = np.c_[rng.uniform(-1, 1, (n, 2)), rng.uniform(0.2, 5, n)]
        k = np.c_[rng.uniform(300, 3000, (n, 2)), rng.uniform(100, 1000, (n, 2))]
        tc = np.asarray(full_to_crop_jnp(tau, p, k))
        assert np.max(np.abs(np.asarray(crop_to_full_jnp(tc, p, k)) - tau)) < 1e-12
        lhs = k[:, 0] * tau[:, 0] / tau[:, 2]
        rhs = k[:, 0] / p[:, 2] * tc[:, 0] / tc[:, 2] + p[:, 0] * k[:, 2]
        assert np.max(np.abs(lhs - rhs)) < 1e-9

    def test_scalar_matches_batched(self, rng):
        P = CropParams(0.1, -0.3, 1.7)
        t = np.array([0.2, 0.4, 9.0])
        np.testing.assert_allclose(full_to_crop(t, P, K1000),
                                   full_to_crop_jnp(t, P.as_array(), K1000.as_array()))

    def test_crop_camera_consistent_with_root(self):
        """The root lands at the crop center's pixel offset implied by P."""
        K = Intrinsics(1400, 1400, 960, 540, 1920, 1080)
        P = CropParams(0.15, -0.2, 1.8)
        tau_c = np.array([0.1, -0.05, 5.0])
        tau = crop_to_full(tau_c, P, K)
        uv_crop = full_to_crop_pixels(project(tau, K), P, K)
        np.testing.assert_allclose(uv_crop, project(tau_c, crop_intrinsics(P, K)), atol=1e-9)


class TestNormalization:
    def test_examples(self):
        np.testing.assert_array_equal(tau_denormalize([0, 0, 0.5]), [0, 0, 10])
        np.testing.assert_array_equal(tau_normalize([20, 0, 0]), [1, 0, 0])

    def test_inverse(self, rng):
        t = rng.normal(size=3)
        np.testing.assert_allclose(tau_normalize(tau_denormalize(t)), t, atol=1e-15)


class TestValidation:
    def test_intrinsics(self):
        with pytest.raises(ShapeMismatch):
            Intrinsics(0, 1, 1, 1, 2, 2)
        with pytest.raises(ShapeMismatch):
            Intrinsics(1, 1, 3, 1, 2, 2)

    def test_pose(self):
        with pytest.raises(NotARotation):
            CameraPose(np.diag([1, 1, -1.0]), np.zeros(3))
        pose = CameraPose(np.eye(3), np.array([0, 0, 5.0]))
        np.testing.assert_allclose(pose.to_world(pose.to_camera([1, 2, 3])), [1, 2, 3])
        np.testing.assert_allclose(pose.center(), [0, 0, -5])
