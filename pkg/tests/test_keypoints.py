import numpy as np
import pytest

from sparsewarp.errors import InvalidInputError
from sparsewarp.keypoints import (
    KeypointSet,
    detect_2d_slices,
    farthest_point_sample,
    foerstner_detect,
    foerstner_score,
)
from sparsewarp.volume import Volume3


def fps_oracle(positions, scores, n):
    """Brute-force greedy maximin starting from the highest score."""
    pts = np.asarray(positions, np.float64)
    chosen = [int(np.argmax(scores))]
    while len(chosen) < n:
        dmin = np.min([np.linalg.norm(pts - pts[c], axis=1) for c in chosen], axis=0)
        chosen.append(int(np.argmax(dmin)))
    return chosen


def cube_phantom(dims=(24, 24, 24), lo=7, hi=16):
    vol = np.zeros(dims, np.float32)
    vol[lo:hi + 1, lo:hi + 1, lo:hi + 1] = 1.0
    corners = np.array([[a, b, c] for a in (lo, hi) for b in (lo, hi) for c in (lo, hi)], np.float64)
    return Volume3(vol), corners


class TestFoerstner:
    def test_constant_volume_empty(self):
        assert len(foerstner_detect(Volume3(np.full((10, 10, 10), 0.7, np.float32)))) == 0

    def test_score_nonnegative_and_zero_on_flat(self, rng):
        v = Volume3(rng.normal(size=(8, 8, 8)).astype(np.float32))
        assert foerstner_score(v).min() >= 0.0
        assert np.all(foerstner_score(Volume3(np.zeros((8, 8, 8), np.float32))) == 0)

    def test_cube_corners_found(self):
        vol, corners = cube_phantom()
        kps = foerstner_detect(vol, sigma=1.4, nms_radius=3)
        assert len(kps) >= 8
        # gradient mass from three faces overlaps just inside each corner, so the
        # response peak sits within one voxel per axis of the geometric corner
        for corner in corners:
            d = np.abs(kps.positions - corner).max(axis=1).min()
            assert d <= 1.0, f"corner {corner} nearest detection {d:.2f} voxels away"

    def test_sorted_by_descending_score(self, rng):
        v = Volume3(rng.normal(size=(16, 16, 16)).astype(np.float32))
        kps = foerstner_detect(v)
        assert np.all(np.diff(kps.scores) <= 1e-7)

    def test_positions_in_bounds(self, rng):
        v = Volume3(rng.normal(size=(12, 14, 16)).astype(np.float32))
        kps = foerstner_detect(v)
        assert np.all(kps.positions >= 0)
        assert np.all(kps.positions < np.array([12, 14, 16]))

    def test_nms_suppresses_close_keeps_far(self, rng):
        # two sharp bumps 2 voxels apart collapse to one detection; far bumps survive
        base = np.zeros((20, 20, 40), np.float32)
        for center in ((10, 10, 8), (10, 10, 10), (10, 10, 30)):
            zz, yy, xx = np.meshgrid(*[np.arange(s) for s in base.shape], indexing="ij")
            r2 = (zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2
            base += np.exp(-r2 / 2.0).astype(np.float32)
        kps = foerstner_detect(Volume3(base), sigma=1.0, nms_radius=3)
        near_pair = np.sum(np.abs(kps.positions[:, 2] - 9) <= 3)
        far = np.sum(np.abs(kps.positions[:, 2] - 30) <= 3)
        assert near_pair >= 1 and far >= 1
        # no two detections within the suppression radius
        d = np.linalg.norm(kps.positions[:, None] - kps.positions[None], axis=-1)
        np.fill_diagonal(d, np.inf)
        assert d.min() > 3.0

    def test_max_points_cap(self, rng):
        v = Volume3(rng.normal(size=(16, 16, 16)).astype(np.float32))
        assert len(foerstner_detect(v, max_points=5)) == 5

    def test_translation_equivariance(self, rng):
        from sparsewarp.volume import gaussian_blur
        # texture embedded in a zero skirt wider than the score's blur support, so
        # rolling translates every nonzero voxel instead of wrapping content
        base = np.zeros((1, 32, 32, 32), np.float32)
        base[0, 8:22, 8:22, 8:22] = rng.normal(size=(14, 14, 14)).astype(np.float32)
        base = gaussian_blur(Volume3(base), 1.0).data
        base[np.abs(base) < 1e-4] = 0.0
        shift = (2, 3, 1)
        shifted = np.roll(base, shift, axis=(1, 2, 3))
        a = foerstner_detect(Volume3(base), nms_radius=2).positions
        b = foerstner_detect(Volume3(shifted), nms_radius=2).positions
        assert len(a) > 0
        for p in a:
            moved = p + np.asarray(shift)
            assert np.abs(b - moved).max(axis=1).min() <= 1.0

    def test_2d_slice_detector_same_contract(self):
        vol, corners = cube_phantom()
        kps = detect_2d_slices(vol, sigma=1.4, nms_radius=3)
        assert len(kps) > 0
        assert np.all(kps.positions >= 0) and np.all(kps.positions < 24)
        # cube edges in-plane produce responses near corners on corner slices
        for corner in corners:
            d = np.linalg.norm(kps.positions - corner, axis=1).min()
            assert d <= 3.0


class TestFarthestPointSample:
    def test_small_input_returned_unchanged(self, rng):
        kps = KeypointSet(rng.uniform(0, 10, (4, 3)), rng.uniform(size=4))
        assert farthest_point_sample(kps, 10) is kps

    def test_cube_corners_pick_opposite(self):
        corners = np.array([[a, b, c] for a in (0, 9) for b in (0, 9) for c in (0, 9)], np.float32)
        scores = np.linspace(1, 2, 8).astype(np.float32)
        out = farthest_point_sample(KeypointSet(corners, scores), 2)
        assert len(out) == 2
        d = np.linalg.norm(out.positions[0] - out.positions[1])
        assert d == pytest.approx(np.sqrt(3 * 81), rel=1e-6)

    def test_collinear_endpoints_then_midpoint(self):
        pts = np.stack([np.zeros(11), np.zeros(11), np.arange(11.0)], axis=1)
        scores = np.zeros(11)
        scores[0] = 1.0  # start at x=0
        out = farthest_point_sample(KeypointSet(pts, scores), 3)
        assert sorted(out.positions[:, 2].tolist()) == [0.0, 5.0, 10.0]

    def test_matches_bruteforce_oracle(self, rng):
        for seed in range(20):
            r = np.random.default_rng(seed)
            pts = r.uniform(0, 30, size=(40, 3)).astype(np.float32)
            scores = r.uniform(size=40).astype(np.float32)
            got = farthest_point_sample(KeypointSet(pts, scores), 7)
            want = fps_oracle(pts, scores, 7)
            np.testing.assert_array_equal(got.positions, pts[want])

    def test_spreads_better_than_random(self, rng):
        pts = rng.uniform(0, 50, size=(200, 3)).astype(np.float32)
        kps = KeypointSet(pts, rng.uniform(size=200).astype(np.float32))
        out = farthest_point_sample(kps, 20)

        def min_pairwise(p):
            d = np.linalg.norm(p[:, None] - p[None], axis=-1)
            np.fill_diagonal(d, np.inf)
            return d.min()

        fps_spread = min_pairwise(out.positions.astype(np.float64))
        wins = 0
        for seed in range(30):
            sub = np.random.default_rng(seed).choice(200, 20, replace=False)
            if fps_spread >= min_pairwise(pts[sub].astype(np.float64)):
                wins += 1
        assert wins >= 28

    def test_empty_input(self):
        assert len(farthest_point_sample(KeypointSet.empty(), 5)) == 0

    def test_invalid_n(self):
        with pytest.raises(InvalidInputError):
            farthest_point_sample(KeypointSet.empty(), 0)

    def test_deterministic(self, rng):
        pts = rng.uniform(0, 20, size=(50, 3)).astype(np.float32)
        scores = rng.uniform(size=50).astype(np.float32)
        a = farthest_point_sample(KeypointSet(pts, scores), 10, seed=1)
        b = farthest_point_sample(KeypointSet(pts.copy(), scores.copy()), 10, seed=2)
        np.testing.assert_array_equal(a.positions, b.positions)
