import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from denseprob.geometry import (
    DEFAULT_SCALES,
    DegenerateConfigurationError,
    RansacFailure,
    apply_homography,
    compose_flows,
    corner_error,
    fit_homography_dlt,
    flow_from_homography,
    multi_scale_inference,
    ransac_homography,
    scaling_matrix,
    select_matches,
    symmetric_transfer_error,
    two_stage_inference,
    warp_image,
)
from denseprob.network import LevelOutput, Prediction


def random_homography(rng, size=64, jitter=8.0):
    src = np.array([[0, 0], [size - 1, 0], [size - 1, size - 1], [0, size - 1]], float)
    dst = src + rng.uniform(-jitter, jitter, size=(4, 2))
    return fit_homography_dlt(src, dst)


class ConstantNet:
    """Stand-in matcher returning a fixed flow and confidence at every pixel."""

    def __init__(self, flow=(0.0, 0.0), conf=0.5, stride=4):
        self.flow = np.asarray(flow, float)
        self.conf = conf
        self.stride = stride
        self.calls = 0

    def predict(self, ref, query, R=1.0):
        self.calls += 1
        n, h, w = ref.shape[:3]
        s = self.stride
        full = np.broadcast_to(self.flow, (n, h, w, 2)).copy()
        coarse = np.broadcast_to(self.flow / s, (n, h // s, w // s, 2)).copy()
        return Prediction(full, np.full((n, h, w), self.conf), LevelOutput(s, coarse),
                          np.full((n, h // s, w // s), self.conf))


class TestProjective:
    def test_identity_flow(self):
        assert not flow_from_homography(np.eye(3), (5, 7)).any()

    def test_translation_flow(self):
        T = np.array([[1, 0, 2.5], [0, 1, -1.0], [0, 0, 1]])
        f = flow_from_homography(T, (4, 6))
        np.testing.assert_allclose(f, np.broadcast_to([2.5, -1.0], f.shape))

    def test_composition_with_zero_fine_flow(self):
        H = random_homography(np.random.default_rng(0))
        np.testing.assert_array_equal(compose_flows(H, np.zeros((64, 64, 2))), flow_from_homography(H, (64, 64)))

    def test_plane_at_infinity_is_invalid(self):
        H = np.array([[1, 0, 0], [0, 1, 0], [1, 0, 0.0]])
        f = flow_from_homography(H, (2, 2))
        assert np.isnan(f[0, 0]).all() and np.isfinite(f[0, 1]).all()

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_composition_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        H = random_homography(rng, 32, 4.0)
        # fine flow that undoes H: x -> H^-1 x
        fine = flow_from_homography(np.linalg.inv(H), (32, 32))
        out = compose_flows(H, fine)
        assert np.abs(out[np.isfinite(out)]).max() <= 1e-6

    def test_scaling_matrix_maps_pixel_centres(self):
        S = scaling_matrix(0.5)
        # pixel centres 0 and 1 of the full image straddle centre 0 of the half image
        np.testing.assert_allclose(apply_homography(S, np.array([[0.5, 0.5]])), [[0.0, 0.0]])


class TestDLT:
    def test_unit_square_identity(self):
        sq = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)
        np.testing.assert_allclose(fit_homography_dlt(sq, sq), np.eye(3), atol=1e-10)

    def test_exact_on_planted(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            H = random_homography(rng)
            src = rng.uniform(0, 63, size=(12, 2))
            dst = apply_homography(H, src)
            est = fit_homography_dlt(src, dst)
            assert np.abs(apply_homography(est, src) - dst).max() < 1e-8

    def test_three_points(self):
        with pytest.raises(ValueError):
            fit_homography_dlt(np.zeros((3, 2)), np.zeros((3, 2)))

    def test_collinear(self):
        src = np.stack([np.arange(6.0), 2 * np.arange(6.0)], axis=-1)
        with pytest.raises(DegenerateConfigurationError):
            fit_homography_dlt(src, src + 1)


class TestRansac:
    def planted(self, seed, n=1000, outliers=0.3, noise=0.0):
        rng = np.random.default_rng(seed)
        H = random_homography(rng)
        src = rng.uniform(0, 63, size=(n, 2))
        dst = apply_homography(H, src) + rng.normal(scale=noise, size=(n, 2))
        bad = rng.uniform(size=n) < outliers
        dst[bad] = rng.uniform(0, 63, size=(bad.sum(), 2))
        return H, src, dst, ~bad

    def test_recovers_planted(self):
        H, src, dst, good = self.planted(0, noise=0.2)
        res = ransac_homography(src, dst, threshold=1.0, seed=0)
        assert corner_error(res.H, H, (64, 64)) < 0.5
        assert (res.inliers & good).sum() / good.sum() > 0.95

    def test_exact_matches_all_inliers(self):
        H, src, dst, _ = self.planted(1, n=50, outliers=0.0)
        res = ransac_homography(src, dst)
        assert res.inlier_ratio == 1.0

    def test_seed_deterministic_and_mask_consistent(self):
        H, src, dst, _ = self.planted(2, n=300, noise=0.5)
        a = ransac_homography(src, dst, threshold=1.0, seed=5)
        b = ransac_homography(src, dst, threshold=1.0, seed=5)
        assert a.H.tobytes() == b.H.tobytes() and np.array_equal(a.inliers, b.inliers)
        np.testing.assert_array_equal(a.inliers, symmetric_transfer_error(a.H, src, dst) <= 2.0)

    def test_failure(self):
        rng = np.random.default_rng(3)
        src = rng.uniform(0, 63, size=(4, 2))
        with pytest.raises((RansacFailure, DegenerateConfigurationError)):
            ransac_homography(src, rng.uniform(0, 63, size=(4, 2)) * np.array([1, 0]), max_iters=20)
        with pytest.raises(ValueError):
            ransac_homography(src[:3], src[:3])


class TestSelectMatches:
    def test_threshold_one_is_empty(self):
        assert len(select_matches(np.zeros((4, 4, 2)), np.full((4, 4), 0.999), threshold=1.0)) == 0

    def test_uniform_confidence_selects_all(self):
        valid = np.ones((4, 5), bool)
        valid[0, 0] = False
        m = select_matches(np.ones((4, 5, 2)), np.full((4, 5), 0.5), threshold=0.4, valid=valid)
        assert len(m) == 19

    def test_scaling_to_full_resolution(self):
        flow = np.zeros((2, 2, 2))
        flow[1, 1] = [1.0, 0.0]
        m = select_matches(flow, np.ones((2, 2)), 0.1, scale=4)
        np.testing.assert_allclose(m.src[-1], [5.5, 5.5])
        np.testing.assert_allclose(m.dst[-1], [9.5, 5.5])

    def test_bounds(self):
        flow = np.full((3, 3, 2), 2.0)
        m = select_matches(flow, np.ones((3, 3)), 0.1, bounds=(3, 3))
        assert len(m) == 1

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            select_matches(np.zeros((3, 3, 2)), np.ones((2, 3)))


class TestInference:
    def pair(self, seed=0, size=32):
        rng = np.random.default_rng(seed)
        return rng.uniform(size=(size, size, 3)), rng.uniform(size=(size, size, 3))

    def test_default_scale_list(self):
        assert DEFAULT_SCALES == (0.5, 0.88, 1.0, 1.33, 1.66, 2.0)

    def test_identity_alignment_keeps_single_pass(self):
        ref, query = self.pair()
        net = ConstantNet((0.0, 0.0), 0.5)
        single = net.predict(ref[None], query[None])
        out = two_stage_inference(net, ref, query)
        assert not out.fallback
        np.testing.assert_allclose(out.homography, np.eye(3), atol=1e-9)
        assert np.abs(out.flow - single.flow[0]).mean() < 0.1

    def test_ransac_failure_falls_back_bit_exact(self):
        ref, query = self.pair(1)
        net = ConstantNet((1.0, 0.5), 0.5)

        def broken(*a, **k):
            raise RansacFailure("injected")

        single = net.predict(ref[None], query[None])
        for out in (two_stage_inference(net, ref, query, ransac=broken),
                    multi_scale_inference(net, ref, query, ransac=broken)):
            assert out.fallback
            assert out.flow.tobytes() == single.flow[0].tobytes()
            assert out.confidence.tobytes() == single.confidence[0].tobytes()

    def test_low_confidence_falls_back(self):
        ref, query = self.pair(2)
        net = ConstantNet((1.0, 0.0), 0.05)
        out = two_stage_inference(net, ref, query, threshold=0.1)
        assert out.fallback

    def test_unit_scale_list_equals_two_stage(self):
        ref, query = self.pair(3)
        net = ConstantNet((2.0, -1.0), 0.5)
        a = two_stage_inference(net, ref, query)
        b = multi_scale_inference(net, ref, query, (1.0,))
        assert a.flow.tobytes() == b.flow.tobytes()
        assert a.homography.tobytes() == b.homography.tobytes()

    def test_translation_is_composed(self):
        ref, query = self.pair(4)
        net = ConstantNet((2.0, -1.0), 0.5)
        out = two_stage_inference(net, ref, query)
        # coarse fit recovers the translation; the second pass adds it again
        np.testing.assert_allclose(out.homography, [[1, 0, 2], [0, 1, -1], [0, 0, 1]], atol=1e-9)
        np.testing.assert_allclose(out.flow, np.broadcast_to([4.0, -2.0], out.flow.shape), atol=1e-9)

    def test_empty_scale_list(self):
        ref, query = self.pair()
        with pytest.raises(ValueError):
            multi_scale_inference(ConstantNet(), ref, query, ())

    def test_warp_image_identity_and_translation(self):
        img = np.random.default_rng(5).uniform(size=(8, 8, 1))
        np.testing.assert_array_equal(warp_image(img, np.eye(3)), img)
        T = np.array([[1, 0, 1.0], [0, 1, 0], [0, 0, 1]])
        np.testing.assert_allclose(warp_image(img, T)[:, :-1], img[:, 1:])
        np.testing.assert_array_equal(warp_image(img, T)[:, -1], img[:, -1])
        assert not warp_image(img, T, border="zero")[:, -1].any()
        with pytest.raises(ValueError):
            warp_image(img, T, border="wrap")
