"""Tests for chamfer, blurred cross-entropy, and disorientation metrics."""

import numpy as np
import pytest

from grainfuse import metrics, synthgen
from grainfuse.orientation import (
    normalize_cu,
    qu2cu,
    quat_multiply,
    random_quaternions,
    symmetry_group,
)


def brute_chamfer(p, q):
    fwd = np.mean([min(np.sum((x - y) ** 2) for y in q) for x in p])
    back = np.mean([min(np.sum((x - y) ** 2) for x in p) for y in q])
    return fwd, back


class TestChamfer:
    """Point-cloud chamfer distance."""

    def test_hand_case(self):
        r = metrics.chamfer([[0.0, 0.0]], [[0.0, 0.5]])
        assert r.forward == pytest.approx(0.25, abs=1e-15)
        assert r.backward == pytest.approx(0.25, abs=1e-15)
        assert r.total == pytest.approx(0.5, abs=1e-15)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(21)
        for _ in range(50):
            p = rng.uniform(0, 1, (rng.integers(1, 40), 2))
            q = rng.uniform(0, 1, (rng.integers(1, 40), 2))
            got = metrics.chamfer(p, q)
            fwd, back = brute_chamfer(p, q)
            assert got.forward == pytest.approx(fwd, abs=1e-12)
            assert got.backward == pytest.approx(back, abs=1e-12)

    def test_identical_clouds_zero(self):
        rng = np.random.default_rng(2)
        p = rng.uniform(0, 1, (30, 2))
        r = metrics.chamfer(p, p.copy())
        assert r.forward == 0.0 and r.backward == 0.0

    def test_swap_exchanges_directions(self):
        rng = np.random.default_rng(3)
        p = rng.uniform(0, 1, (12, 2))
        q = rng.uniform(0, 1, (17, 2))
        ab = metrics.chamfer(p, q)
        ba = metrics.chamfer(q, p)
        assert ab.forward == ba.backward and ab.backward == ba.forward

    def test_empty_prediction_penalty(self):
        r = metrics.chamfer(np.zeros((0, 2)), [[0.5, 0.5]])
        assert r.forward == 0.0
        assert r.backward == metrics.EMPTY_PENALTY

    def test_empty_reference_penalty(self):
        r = metrics.chamfer([[0.5, 0.5]], np.zeros((0, 2)))
        assert r.forward == metrics.EMPTY_PENALTY
        assert r.backward == 0.0

    def test_both_empty_zero(self):
        r = metrics.chamfer(np.zeros((0, 2)), np.zeros((0, 2)))
        assert r.forward == 0.0 and r.backward == 0.0 and r.total == 0.0

    def test_far_point_monotonicity(self):
        """A far extra predicted point raises forward, never backward."""
        rng = np.random.default_rng(4)
        p = rng.uniform(0.4, 0.6, (10, 2))
        q = rng.uniform(0.4, 0.6, (10, 2))
        base = metrics.chamfer(p, q)
        p_plus = np.vstack([p, [0.0, 0.0]])
        grown = metrics.chamfer(p_plus, q)
        assert grown.forward > base.forward
        assert grown.backward <= base.backward

    def test_boundary_to_points_normalization(self):
        bmap = np.zeros((10, 20), dtype=np.uint8)
        bmap[5, 10] = 1
        pts = metrics.boundary_to_points(bmap)
        np.testing.assert_allclose(pts, [[0.5, 0.5]])


class TestGaussianBlur:
    """Truncated-kernel blur with edge replication."""

    def test_constant_map_fixed_point(self):
        out = metrics.gaussian_blur(np.ones((16, 16)))
        np.testing.assert_allclose(out, 1.0, atol=1e-12)

    def test_interior_delta_reproduces_kernel(self):
        img = np.zeros((31, 31))
        img[15, 15] = 1.0
        out = metrics.gaussian_blur(img, sigma=3.0, radius=5)
        ax = np.arange(-5, 6, dtype=np.float64)
        xx, yy = np.meshgrid(ax, ax, indexing="ij")
        kernel = np.exp(-(xx**2 + yy**2) / 18.0)
        kernel /= kernel.sum()
        np.testing.assert_allclose(out[10:21, 10:21], kernel, atol=1e-15)
        assert out.sum() == pytest.approx(1.0, abs=1e-12)

    def test_kernel_footprint_truncated(self):
        """Nothing leaks beyond the radius."""
        img = np.zeros((31, 31))
        img[15, 15] = 1.0
        out = metrics.gaussian_blur(img, sigma=3.0, radius=5)
        assert out[15, 21] == 0.0
        assert out[9, 15] == 0.0

    def test_output_in_unit_interval(self):
        rng = np.random.default_rng(6)
        img = (rng.uniform(0, 1, (20, 20)) < 0.3).astype(float)
        out = metrics.gaussian_blur(img)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_rejects_non_2d(self):
        with pytest.raises(ValueError):
            metrics.gaussian_blur(np.zeros((4, 4, 2)))


class TestGbce:
    """Blurred-target cross-entropy."""

    def test_half_half_is_ln2(self):
        assert metrics.soft_bce(0.5, 0.5) == pytest.approx(np.log(2.0), abs=1e-12)

    def test_perfect_confident_prediction_near_zero(self):
        """On an all-zero target, predicting zeros costs ~0."""
        target = np.zeros((16, 16), dtype=np.uint8)
        assert metrics.gbce(np.zeros((16, 16)), target) < 1e-5

    def test_clamp_keeps_finite(self):
        target = np.ones((8, 8), dtype=np.uint8)
        val = metrics.gbce(np.zeros((8, 8)), target)
        assert np.isfinite(val)
        assert val == pytest.approx(-np.log(metrics.CLAMP), rel=1e-3)

    def test_constant_prediction_minimized_at_target_mean(self):
        rng = np.random.default_rng(5)
        target = (rng.uniform(0, 1, (32, 32)) < 0.1).astype(np.uint8)
        g_mean = metrics.gaussian_blur(target).mean()
        grid = np.linspace(0.01, 0.6, 241)
        losses = [metrics.gbce(np.full((32, 32), s), target) for s in grid]
        assert grid[int(np.argmin(losses))] == pytest.approx(g_mean, abs=0.01)

    def test_moving_toward_target_decreases_loss(self):
        rng = np.random.default_rng(8)
        target = (rng.uniform(0, 1, (24, 24)) < 0.2).astype(np.uint8)
        g = metrics.gaussian_blur(target)
        far = np.full_like(g, 0.5)
        near = 0.5 * (far + g)
        assert metrics.soft_bce(near, g) < metrics.soft_bce(far, g)

    def test_tolerates_one_pixel_offset(self):
        """A boundary predicted one pixel off scores strictly better than
        one placed across the map, and much better for soft predictions."""
        target = np.zeros((32, 32), dtype=np.uint8)
        target[:, 16] = 1
        shifted = np.zeros((32, 32))
        shifted[:, 17] = 1.0
        wrong = np.zeros((32, 32))
        wrong[:, 2] = 1.0
        assert metrics.gbce(shifted, target) < metrics.gbce(wrong, target)
        assert metrics.gbce(0.5 * shifted, target) < metrics.gbce(
            0.5 * wrong, target
        )
        # And the exactly-placed line beats both.
        exact = metrics.gbce(target.astype(float), target)
        assert exact < metrics.gbce(shifted, target)


class TestDisorientationError:
    """Stratified per-pixel orientation error."""

    @staticmethod
    def make_truth(seed=7):
        sym = symmetry_group("hexagonal")
        ids = np.ones((4, 4), dtype=np.int32)
        ids[:, 2:] = 2
        rng = np.random.default_rng(seed)
        quats = random_quaternions(2, rng)
        table = np.vstack([[1.0, 0, 0, 0], quats])
        cu = normalize_cu(qu2cu(table))
        return sym, ids, quats, cu[ids]

    def test_perfect_prediction_zero(self):
        sym, ids, _, truth = self.make_truth()
        stats = metrics.disorientation_error(truth, truth.copy(), ids, sym=sym)
        assert stats.mean_all == pytest.approx(0.0, abs=1e-9)
        assert stats.mean_intra == pytest.approx(0.0, abs=1e-9)
        assert stats.mean_boundary == pytest.approx(0.0, abs=1e-9)

    def test_counts_partition(self):
        sym, ids, _, truth = self.make_truth()
        stats = metrics.disorientation_error(truth, truth, ids, sym=sym)
        assert stats.n_all == stats.n_intra + stats.n_boundary
        assert stats.n_all == 16

    def test_observed_pixels_excluded(self):
        sym, ids, _, truth = self.make_truth()
        observed = np.zeros((4, 4), dtype=bool)
        observed[0] = True
        stats = metrics.disorientation_error(truth, truth, ids, observed, sym)
        assert stats.n_all == 12

    def test_null_pixels_excluded(self):
        sym, ids, _, truth = self.make_truth()
        ids = ids.copy()
        ids[0, 0] = 0
        stats = metrics.disorientation_error(truth, truth, ids, sym=sym)
        assert stats.n_all == 15

    def test_single_boundary_pixel_rotation(self):
        """One boundary pixel rotated 30 degrees about z (hexagonal) adds
        exactly 30 degrees / n_boundary to the boundary stratum."""
        sym, ids, quats, truth = self.make_truth()
        pred = truth.copy()
        angle = np.radians(30.0)
        rot = np.array([np.cos(angle / 2), 0.0, 0.0, np.sin(angle / 2)])
        pred[1, 1] = normalize_cu(qu2cu(quat_multiply(rot, quats[0])[None]))[0]
        stats = metrics.disorientation_error(pred, truth, ids, sym=sym)
        n_b = int(synthgen.extract_boundaries(ids).sum())
        assert n_b == 8
        assert stats.mean_boundary == pytest.approx(angle / n_b, abs=1e-9)
        assert stats.mean_intra == pytest.approx(0.0, abs=1e-9)

    def test_out_of_range_prediction_clipped(self):
        sym, ids, _, truth = self.make_truth()
        pred = truth.copy()
        pred[0, 0] = [1.5, -2.0, 1.2]
        stats = metrics.disorientation_error(pred, truth, ids, sym=sym)
        assert np.isfinite(stats.mean_all)

    def test_requires_symmetry(self):
        _, ids, _, truth = self.make_truth()
        with pytest.raises(ValueError):
            metrics.disorientation_error(truth, truth, ids)

    def test_degrees_helper(self):
        sym, ids, _, truth = self.make_truth()
        stats = metrics.disorientation_error(truth, truth, ids, sym=sym)
        assert stats.degrees() == pytest.approx((0.0, 0.0, 0.0), abs=1e-6)


class TestMetricReport:
    """Score container invariants."""

    def test_chamfer_total_consistent(self):
        rng = np.random.default_rng(9)
        p = rng.uniform(0, 1, (20, 2))
        q = rng.uniform(0, 1, (25, 2))
        r = metrics.chamfer(p, q)
        report = metrics.MetricReport(
            chamfer_forward=r.forward, chamfer_backward=r.backward
        )
        assert report.chamfer_total == pytest.approx(r.forward + r.backward,
                                                     abs=1e-12)

    def test_scores_cover_all_fields(self):
        report = metrics.MetricReport()
        scores = report.scores()
        assert set(scores) == set(metrics.MetricReport._SCORE_FIELDS)

    def test_to_row_includes_labels(self):
        report = metrics.MetricReport(gbce=0.5, labels={"task": "demo", "rep": 3})
        row = report.to_row(label_keys=("task", "rep", "missing"))
        assert row["task"] == "demo" and row["rep"] == 3 and row["missing"] == ""
        assert row["gbce"] == 0.5
