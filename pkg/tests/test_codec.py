import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posekit.codec import (AnnotationSet, AugmentParams, FlipPairs, HeatmapStack, Pose, affine_matrix,
                           apply_affine, augment, decode_heatmaps, flip_average, mse_loss, ohkm_mse_loss,
                           peak_normalize, peak_normalize_backward, render_targets, to_compare_domain,
                           top_r_mean, transform_pose)
from posekit.errors import ConfigError, ShapeError
from posekit.gradcheck import check_gradients
from posekit.tensor import make_rng


def pose(*xyv):
    return Pose(np.array(xyv, dtype=float))


class TestRender:
    def test_peak_and_neighbour(self):
        stack, mask = render_targets([pose([10, 5, 2])], (16, 20))
        m = stack.maps[0, 0]
        assert m[5, 10] == 1.0
        assert m[5, 11] == pytest.approx(np.exp(-0.5), abs=1e-15)
        assert m[5, 11] == pytest.approx(0.60653, abs=1e-5)
        assert mask[0, 0] == 1 and stack.normalization == "peak"

    def test_rounds_to_nearest_pixel(self):
        stack, _ = render_targets([pose([3.4, 7.6, 2])], (12, 12))
        assert np.unravel_index(stack.maps[0, 0].argmax(), (12, 12)) == (8, 3)

    def test_unlabeled_is_masked(self):
        stack, mask = render_targets([pose([4, 4, 0], [40, 4, 2], [4, 4, 1])], (10, 10))
        assert not stack.maps[0, 0].any() and mask[0, 0] == 0
        assert not stack.maps[0, 1].any() and mask[0, 1] == 0  # outside the map
        assert mask[0, 2] == 1  # labeled but invisible still trains

    def test_sigma_must_be_positive(self):
        with pytest.raises(ValueError):
            render_targets([pose([1, 1, 2])], (4, 4), sigma=0)

    def test_stack_invariants(self):
        with pytest.raises(ValueError):
            HeatmapStack(np.full((1, 1, 2, 2), 2.0), "peak")
        with pytest.raises(ValueError):
            HeatmapStack(np.full((1, 1, 2, 2), 0.3), "sum")
        HeatmapStack(np.full((1, 1, 2, 2), 0.25), "sum")


class TestRoundTrip:
    def test_every_interior_location(self):
        h, w = 64, 48
        start = time.perf_counter()
        pts = [(x, y) for y in range(2, h - 2) for x in range(2, w - 2)]
        worst = 0.0
        for i in range(0, len(pts), 256):
            chunk = pts[i:i + 256]
            stack, _ = render_targets([pose([x, y, 2]) for x, y in chunk], (h, w))
            coords, _ = decode_heatmaps(stack.maps)
            err = np.abs(coords[:, 0] - np.array(chunk, dtype=float)).max()
            worst = max(worst, err)
        assert worst <= 0.25
        assert time.perf_counter() - start < 30

    @given(st.floats(2, 45), st.floats(2, 61))
    @settings(max_examples=200, deadline=None)
    def test_subpixel_within_three_quarters(self, x, y):
        # rounding to the grid (<= 0.5 px per axis) plus at most a quarter step
        stack, _ = render_targets([pose([x, y, 2])], (64, 48))
        coords, _ = decode_heatmaps(stack.maps)
        assert np.abs(coords[0, 0] - [x, y]).max() <= 0.75


class TestDecode:
    def test_quarter_offset(self):
        m = np.zeros((1, 1, 10, 16))
        m[0, 0, 5, 10] = 1.0
        m[0, 0, 5, 11] = 0.8
        coords, conf = decode_heatmaps(m)
        np.testing.assert_array_equal(coords[0, 0], [10.25, 5.0])
        assert conf[0, 0] == 1.0

    def test_diagonal_offset(self):
        m = np.zeros((1, 1, 10, 10))
        m[0, 0, 4, 4] = 1.0
        m[0, 0, 2, 1] = 0.9
        coords, _ = decode_heatmaps(m)
        np.testing.assert_array_equal(coords[0, 0], [3.75, 3.75])
        coords, _ = decode_heatmaps(m, second="neighbor")
        np.testing.assert_array_equal(coords[0, 0], [4.0, 4.0])

    def test_symmetric_peak_no_offset(self):
        m = np.full((1, 1, 7, 7), 0.1)
        m[0, 0, 3, 3] = 1.0
        coords, _ = decode_heatmaps(m)
        np.testing.assert_array_equal(coords[0, 0], [3.0, 3.0])

    def test_flat_map_first_argmax(self):
        coords, conf = decode_heatmaps(np.full((1, 1, 4, 5), 0.2))
        np.testing.assert_array_equal(coords[0, 0], [0.0, 0.0])
        assert conf[0, 0] == 0.2

    def test_argmax_ties_row_major(self):
        m = np.zeros((1, 1, 5, 5))
        m[0, 0, 3, 1] = 1.0
        m[0, 0, 1, 3] = 1.0
        coords, _ = decode_heatmaps(m)
        assert coords[0, 0, 1] == pytest.approx(1.0 + 0.25)  # first max (row 1), nudged toward row 3

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            decode_heatmaps(np.zeros((1, 1, 2, 2)), second="local")


class TestOhkm:
    def test_hand_example(self):
        assert top_r_mean([0.5, 0.2, 0.9, 0.1], 2) == pytest.approx(0.7, abs=1e-15)

    def test_loss_hand_example(self):
        losses = np.array([0.5, 0.2, 0.9, 0.1])
        pred = np.sqrt(losses)[None, :, None, None] * np.ones((1, 4, 2, 2))
        assert ohkm_mse_loss(pred, np.zeros_like(pred), r=2) == pytest.approx(0.7, abs=1e-15)

    def test_r_equals_k_is_mse(self):
        rng = make_rng(0)
        for _ in range(50):
            pred = rng.random((3, 6, 5, 4))
            target = rng.random((3, 6, 5, 4))
            mask = (rng.random((3, 6)) > 0.3).astype(float)
            mask[:, 0] = 1
            per_sample = [np.mean([((pred[i, k] - target[i, k]) ** 2).mean() for k in range(6) if mask[i, k]])
                          for i in range(3)]
            plain = np.mean(per_sample)
            assert abs(ohkm_mse_loss(pred, target, mask, r=6) - plain) < 1e-12
            assert mse_loss(pred, target, mask) == ohkm_mse_loss(pred, target, mask, r=6)

    def test_monotone_in_r(self):
        rng = make_rng(1)
        for _ in range(1000):
            v = rng.random(int(rng.integers(1, 18)))
            means = [top_r_mean(v, r) for r in range(1, v.size + 1)]
            assert all(b <= a + 1e-15 for a, b in zip(means, means[1:]))

    @given(st.lists(st.floats(0, 1e3), min_size=1, max_size=20))
    @settings(max_examples=200, deadline=None)
    def test_non_negative(self, vals):
        for r in range(1, len(vals) + 1):
            assert top_r_mean(vals, r) >= 0

    def test_default_r(self):
        import inspect
        assert inspect.signature(ohkm_mse_loss).parameters["r"].default == 8

    def test_ties_prefer_lower_index(self):
        pred = np.ones((1, 3, 2, 2))
        pred[0, 2] = 0.5
        _, g = ohkm_mse_loss(pred, np.zeros_like(pred), r=1, return_grad=True)
        assert g[0, 0].any() and not g[0, 1].any() and not g[0, 2].any()

    @pytest.mark.parametrize("r", [0, 5])
    def test_r_out_of_range(self, r):
        with pytest.raises(ValueError):
            ohkm_mse_loss(np.zeros((1, 4, 2, 2)), np.zeros((1, 4, 2, 2)), r=r)

    def test_masked_joints_zero_gradient(self):
        rng = make_rng(2)
        pred = rng.random((2, 5, 4, 4))
        mask = np.array([[1, 0, 1, 1, 0], [0, 1, 1, 1, 1]], dtype=float)
        _, g = ohkm_mse_loss(pred, np.zeros_like(pred), mask, r=3, return_grad=True)
        assert np.all(g[mask == 0] == 0.0)

    def test_gradient(self):
        rng = make_rng(3)
        pred = rng.random((2, 5, 3, 3))
        target = rng.random((2, 5, 3, 3))

        def grads():
            return {"pred": ohkm_mse_loss(pred, target, r=2, return_grad=True)[1]}

        for c in check_gradients(lambda: ohkm_mse_loss(pred, target, r=2), grads, {"pred": pred}):
            assert c.max_rel_error < 1e-7

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ohkm_mse_loss(np.zeros((1, 2, 3, 3)), np.zeros((1, 2, 3, 4)))


class TestCompareDomain:
    def test_peak_renormalization(self):
        rng = make_rng(0)
        maps = rng.random((2, 3, 4, 5))
        maps /= maps.sum(axis=(2, 3), keepdims=True)
        vals, _ = to_compare_domain(maps, "sum", "peak")
        np.testing.assert_allclose(vals.max(axis=(2, 3)), 1.0)
        same, _ = to_compare_domain(maps, "sum", "sum")
        assert same is maps

    def test_peak_to_sum_rejected(self):
        with pytest.raises(ValueError):
            to_compare_domain(np.ones((1, 1, 2, 2)), "peak", "sum")

    def test_backward(self):
        rng = make_rng(4)
        maps = rng.random((2, 2, 3, 4)) + 0.1
        w = rng.standard_normal(maps.shape)

        def grads():
            return {"maps": peak_normalize_backward(maps, w)}

        for c in check_gradients(lambda: peak_normalize(maps) * w, grads, {"maps": maps}):
            assert c.max_rel_error < 1e-7


class TestFlip:
    pairs = FlipPairs([(0, 1), (3, 4)])

    def test_constant_symmetric_model(self):
        maps = np.zeros((1, 2, 4, 6))
        maps[0, :, 1:3, 2:4] = 1.0  # mirror-symmetric
        plain = flip_average(lambda v: maps, np.zeros((1, 1, 4, 6)), FlipPairs([]))
        np.testing.assert_array_equal(plain, maps)

    def test_channel_swap(self):
        stack = np.broadcast_to(np.arange(5.0)[None, :, None, None], (1, 5, 3, 3)).copy()
        out = flip_average(lambda v: stack, np.zeros((1, 1, 3, 3)), self.pairs)
        np.testing.assert_array_equal(out[0, :, 0, 0], [0.5, 0.5, 2.0, 3.5, 3.5])

    def test_idempotent(self):
        rng = make_rng(0)
        W = rng.standard_normal((5, 6))

        def model(v):
            # a deterministic, not mirror-aware model
            return np.einsum("kw,nchw->nkhw", W, v) + v.cumsum(axis=3)

        x = rng.standard_normal((2, 1, 4, 6))
        once = flip_average(model, x, self.pairs)
        twice = flip_average(lambda v: flip_average(model, v, self.pairs), x, self.pairs)
        np.testing.assert_allclose(twice, once, atol=1e-12)

    def test_shift_moves_flipped_half(self):
        maps = np.zeros((1, 1, 1, 5))
        maps[0, 0, 0, 1] = 1.0
        out = flip_average(lambda v: maps, np.zeros((1, 1, 1, 5)), FlipPairs([]), shift=True)
        np.testing.assert_array_equal(out[0, 0, 0], [0, 0.5, 0, 0, 0.5])

    def test_pairs_validated(self):
        with pytest.raises(ConfigError):
            FlipPairs([(0, 1), (1, 2)]).validate(3)
        with pytest.raises(ConfigError):
            FlipPairs([(0, 5)]).validate(3)


def blob_image(xy, shape, sigma=1.5):
    h, w = shape
    ys, xs = np.mgrid[:h, :w]
    return np.exp(-((xs - xy[0]) ** 2 + (ys - xy[1]) ** 2) / (2 * sigma ** 2))[None]


class TestAugment:
    def test_identity(self):
        img = make_rng(0).random((1, 8, 6))
        p = pose([1, 2, 2], [3, 4, 1])
        out, q = apply_affine(img, p)
        np.testing.assert_array_equal(out, img)
        np.testing.assert_array_equal(q.keypoints, p.keypoints)

    def test_rotate_180(self):
        h, w = 9, 7
        img = make_rng(1).random((1, h, w))
        p = pose([1.5, 2.25, 2], [6, 0, 2])
        out, q = apply_affine(img, p, angle=180.0)
        np.testing.assert_allclose(q.xy, [[w - 1 - 1.5, h - 1 - 2.25], [0, h - 1]], atol=1e-12)
        np.testing.assert_allclose(out, img[:, ::-1, ::-1], atol=1e-9)

    def test_flip_relabels(self):
        p = pose([1, 1, 2], [5, 1, 2], [3, 3, 2])
        m = affine_matrix((8, 7), flip=True)
        q = transform_pose(p, m, (8, 7), flip=True, pairs=FlipPairs([(0, 1)]))
        np.testing.assert_allclose(q.xy, [[1, 1], [5, 1], [3, 3]])  # mirrored and swapped back onto the same spots

    def test_outside_marked_unlabeled(self):
        p = pose([0, 0, 2], [3, 3, 2])
        _, q = apply_affine(np.zeros((1, 8, 8)), p, scale=1.3)
        assert q.visibility.tolist() == [0.0, 2.0]

    @pytest.mark.parametrize("seed", range(20))
    def test_landmarks_follow_pixels(self, seed):
        rng = make_rng(seed)
        shape = (64, 48)
        xy = rng.uniform([14, 18], [34, 46])
        img = blob_image(xy, shape)
        out, q = augment(img, pose([xy[0], xy[1], 2]), rng, AugmentParams(), FlipPairs([]))
        ys, xs = np.mgrid[:64, :48]
        wsum = out[0].sum()
        centroid = np.array([(out[0] * xs).sum() / wsum, (out[0] * ys).sum() / wsum])
        assert np.linalg.norm(centroid - q.xy[0]) < 0.5

    def test_deterministic(self):
        img = make_rng(0).random((1, 16, 12))
        p = pose([5, 5, 2], [7, 9, 2])
        a = augment(img, p, make_rng(3))
        b = augment(img, p, make_rng(3))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1].keypoints, b[1].keypoints)


class TestAnnotations:
    def make(self):
        return AnnotationSet([{"id": 0, "width": 4, "height": 4, "file": "a"}],
                             [{"image_id": 0, "keypoints": [1, 1, 2, 2, 2, 2], "head_box": [0, 0, 1, 1]}],
                             2, [(0, 1)], [0.5, 0.5])

    def test_roundtrip(self, tmp_path):
        ann = self.make()
        ann.save(tmp_path / "a.json")
        back = AnnotationSet.load(tmp_path / "a.json")
        assert back.to_json() == ann.to_json()
        assert back.pairs.pairs == [(0, 1)]

    def test_schema_keys(self):
        obj = self.make().to_json()
        assert set(obj) == {"images", "annotations", "meta"}
        assert set(obj["meta"]) == {"K", "flip_pairs", "kappa"}

    def test_rejects(self):
        with pytest.raises(ConfigError):
            AnnotationSet([], [{"image_id": 0, "keypoints": [1, 1, 2]}], 2, [], [0.5, 0.5])
        with pytest.raises(ConfigError):
            AnnotationSet([], [], 2, [], [0.5])
        with pytest.raises(ConfigError):
            AnnotationSet.from_json({"images": [], "annotations": []})
