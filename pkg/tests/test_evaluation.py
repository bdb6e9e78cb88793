"""Metric suite: errors, prob-at-GT, rejection ranking, orientation ops."""

import math

import numpy as np
import pytest

from cvloc.errors import ConfigError, DataError
from cvloc.evaluation import (
    SampleRecord,
    center_only,
    classify_orientation,
    classify_orientation_joint,
    error_meters,
    error_stats,
    evaluate_heatmap_model,
    orientation_perturb,
    prob_at_gt,
    rejection_curve,
)
from cvloc.synthdata import Sample, shift_panorama


def make_sample(gt, mpp=0.114, L=64, rng=None):
    ground = None if rng is None else rng.random((3, 8, 32)).astype(np.float32)
    satellite = None if rng is None else rng.random((3, L, L)).astype(np.float32)
    return Sample(
        ground=ground,
        satellite=satellite,
        gt_pixel=gt,
        heading=0.0,
        meters_per_px=mpp,
        kind="positive",
    )


class TestErrorMeters:
    def test_zero_distance(self):
        assert error_meters((3.0, 4.0), (3.0, 4.0), 0.5) == 0.0

    def test_paper_resolution(self):
        assert error_meters((0.0, 0.0), (100.0, 0.0), 0.114) == pytest.approx(11.4)

    def test_three_four_five(self):
        assert error_meters((3.0, 0.0), (0.0, 4.0), 1.0) == pytest.approx(5.0)

    def test_symmetry_and_triangle(self, rng):
        for _ in range(50):
            a, b, c = (tuple(rng.uniform(0, 64, 2)) for _ in range(3))
            ab = error_meters(a, b, 0.114)
            assert ab == pytest.approx(error_meters(b, a, 0.114))
            assert ab <= error_meters(a, c, 0.114) + error_meters(c, b, 0.114) + 1e-12

    def test_bad_resolution_rejected(self):
        with pytest.raises(ConfigError):
            error_meters((0, 0), (1, 1), 0.0)


class TestErrorStats:
    def test_odd_count(self):
        assert error_stats([1, 2, 3]) == (2.0, 2.0)

    def test_outlier_bias(self):
        mean, median = error_stats([1, 1, 1, 100])
        assert mean == pytest.approx(25.75)
        assert median == 1.0

    def test_single(self):
        assert error_stats([5.0]) == (5.0, 5.0)

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            error_stats([])


class TestProbAtGt:
    def test_uniform_512(self):
        h = np.full((512, 512), 1.0 / 512**2)
        assert prob_at_gt(h, (100.2, 300.8)) == pytest.approx(3.81e-6, abs=5e-9)

    def test_uniform_64(self):
        h = np.full((64, 64), 1.0 / 4096)
        assert prob_at_gt(h, (10.0, 20.0)) == pytest.approx(2.4414e-4, abs=1e-8)

    def test_one_hot(self):
        h = np.zeros((16, 16))
        h[3, 7] = 1.0
        assert prob_at_gt(h, (3.5, 7.9)) == 1.0

    def test_out_of_grid_rejected(self):
        with pytest.raises(DataError):
            prob_at_gt(np.full((8, 8), 1 / 64), (8.0, 0.0))

    def test_sums_to_one_over_all_cells(self, rng):
        h = rng.random((8, 8))
        h /= h.sum()
        total = sum(prob_at_gt(h, (u + 0.5, v + 0.5)) for u in range(8) for v in range(8))
        assert total == pytest.approx(1.0, abs=1e-9)


class TestRejectionCurve:
    def _records(self, errors, probs):
        return [
            SampleRecord(id=i, error_m=e, max_prob=p)
            for i, (e, p) in enumerate(zip(errors, probs))
        ]

    def test_full_fraction_equals_error_stats(self, rng):
        errors = rng.uniform(0, 20, 40).tolist()
        probs = rng.random(40).tolist()
        curve = rejection_curve(self._records(errors, probs), [1.0])
        mean, median = error_stats(errors)
        assert curve[0][0] == 1.0
        assert curve[0][1] == pytest.approx(mean)
        assert curve[0][2] == pytest.approx(median)

    def test_anticorrelated_confidence_helps(self):
        errors = list(range(100))
        probs = [1.0 - e / 100 for e in errors]  # confident exactly when right
        curve = rejection_curve(self._records(errors, probs), [1.0, 0.5, 0.1])
        medians = {f: med for f, _, med, _, _ in curve}
        assert medians[0.1] <= medians[0.5] <= medians[1.0]

    def test_matches_sort_and_slice_oracle(self, rng):
        for _ in range(30):
            n = int(rng.integers(5, 60))
            errors = rng.uniform(0, 30, n)
            probs = rng.random(n)
            fractions = [1.0, 0.7, 0.4, 0.2]
            curve = rejection_curve(self._records(errors.tolist(), probs.tolist()), fractions)
            order = sorted(range(n), key=lambda i: (-probs[i], i))
            for f, mean, median, q25, q75 in curve:
                k = max(1, int(math.floor(f * n + 0.5)))
                kept = np.array([errors[i] for i in order[:k]])
                assert mean == pytest.approx(kept.mean())
                assert median == pytest.approx(np.median(kept))
                assert q25 == pytest.approx(np.percentile(kept, 25))
                assert q75 == pytest.approx(np.percentile(kept, 75))

    def test_fractions_sorted_descending(self, rng):
        errors = rng.uniform(0, 5, 10).tolist()
        probs = rng.random(10).tolist()
        curve = rejection_curve(self._records(errors, probs), [0.2, 1.0, 0.5])
        assert [p[0] for p in curve] == [1.0, 0.5, 0.2]

    def test_ties_break_by_id(self):
        records = [
            SampleRecord(id=1, error_m=10.0, max_prob=0.5),
            SampleRecord(id=0, error_m=1.0, max_prob=0.5),
        ]
        curve = rejection_curve(records, [0.5])
        assert curve[0][2] == 1.0  # id 0 kept first

    def test_requires_max_prob(self):
        with pytest.raises(DataError):
            rejection_curve([SampleRecord(id=0, error_m=1.0)], [1.0])

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            rejection_curve([], [1.0])


class StubModel:
    """Logit map peaked at a fixed cell, sharpest for the aligned input."""

    def __init__(self, L=32, peak=(5.0, 9.0)):
        self.L = L
        self.peak = peak
        self.base = None

    def __call__(self, G, S):
        if self.base is None:
            self.base = G.copy()
        logits = np.zeros((self.L, self.L), np.float32)
        match = 1.0 - min(1.0, float(np.abs(G - self.base).mean()) * 5.0)
        logits[int(self.peak[0]), int(self.peak[1])] = 10.0 * match
        return logits


class TestOrientationOps:
    def test_zero_shift_identical(self, rng):
        sample = make_sample((16.2, 17.1), L=32, rng=rng)
        model = StubModel()
        errs = orientation_perturb(model, sample, [0.0, 0.0])
        assert errs[0] == errs[1]

    def test_full_turn_identical(self, rng):
        sample = make_sample((16.2, 17.1), L=32, rng=rng)
        model = StubModel()
        errs = orientation_perturb(model, sample, [0.0, 2 * math.pi])
        assert errs[0] == errs[1]

    def test_planted_model_classifies_aligned_as_zero(self, rng):
        G = rng.random((3, 8, 32)).astype(np.float32)
        S = rng.random((3, 32, 32)).astype(np.float32)
        model = StubModel()
        model(G, S)  # lock the aligned view
        assert classify_orientation(model, G, S, n_rot=16) == 0

    def test_planted_rotation_recovered(self, rng):
        G = rng.random((3, 8, 32)).astype(np.float32)
        S = rng.random((3, 32, 32)).astype(np.float32)
        model = StubModel()
        model(G, S)
        for true_k in (1, 5, 11):
            rotated = shift_panorama(G, true_k * 2)  # 32 cols / 16 classes
            assert classify_orientation(model, rotated, S, n_rot=16) == true_k

    def test_constant_logit_shift_invariant(self, rng):
        G = rng.random((3, 8, 32)).astype(np.float32)
        S = rng.random((3, 32, 32)).astype(np.float32)
        model = StubModel()
        model(G, S)
        base = classify_orientation(model, G, S, n_rot=8)
        shifted = classify_orientation(
            lambda g, s: model(g, s) + 123.0, G, S, n_rot=8
        )
        assert base == shifted

    def test_single_rotation_returns_zero(self, rng):
        G = rng.random((3, 8, 32)).astype(np.float32)
        S = rng.random((3, 32, 32)).astype(np.float32)
        assert classify_orientation(StubModel(), G, S, n_rot=1) == 0

    def test_joint_mode_returns_location_too(self, rng):
        G = rng.random((3, 8, 32)).astype(np.float32)
        S = rng.random((3, 32, 32)).astype(np.float32)
        model = StubModel()
        model(G, S)
        k, loc, p = classify_orientation_joint(model, G, S, n_rot=4)
        assert k == 0
        assert loc == (5.5, 9.5)
        assert 0 < p <= 1


class TestCenterOnly:
    def test_gt_at_center_is_zero(self):
        report = center_only([make_sample((32.0, 32.0))], 64)
        assert report.mean_err_m == 0.0

    def test_positive_bound(self, rng):
        samples = [
            make_sample((float(rng.uniform(16, 48)), float(rng.uniform(16, 48))))
            for _ in range(200)
        ]
        report = center_only(samples, 64)
        bound = math.sqrt(2) * 16 * 0.114
        assert all(r.error_m <= bound + 1e-9 for r in report.records)

    def test_mean_matches_monte_carlo(self, rng):
        samples = [
            make_sample((float(rng.uniform(16, 48)), float(rng.uniform(16, 48))))
            for _ in range(4000)
        ]
        report = center_only(samples, 64)
        mc = np.linalg.norm(rng.uniform(-16, 16, size=(200000, 2)), axis=1).mean() * 0.114
        assert report.mean_err_m == pytest.approx(mc, rel=0.05)


class TestEvaluateHeatmapModel:
    def test_report_fields(self, rng):
        samples = [make_sample((10.0, 12.0), L=32, rng=rng) for _ in range(6)]

        def fn(G, S):
            h = rng.random((32, 32))
            return h / h.sum()

        report = evaluate_heatmap_model(fn, samples, [1.0, 0.5])
        assert len(report.records) == 6
        assert report.rejection_curve[0][0] == 1.0
        assert report.prob_at_gt_mean is not None
        _, median = error_stats([r.error_m for r in report.records])
        assert report.median_err_m == median


class TestOrientationModeGuard:
    def test_front_view_rejected_for_column_shift(self, rng):
        sample = make_sample((16.0, 16.0), L=32, rng=rng)
        with pytest.raises(ConfigError):
            orientation_perturb(StubModel(), sample, [0.1], view="front")
