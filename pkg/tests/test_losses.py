"""Loss stack: closed forms, brute-force oracles, and the stated invariants."""

import math

import numpy as np
import pytest

from cvloc import autodiff as ad, losses
from cvloc.autodiff import Tensor
from cvloc.errors import ConfigError, DataError
from cvloc.losses import (
    LossConfig,
    bottleneck_loss,
    gaussian_target,
    infonce_cell,
    output_loss,
    positiveness_weights,
    total_loss,
)

from conftest import check_gradients


class TestGaussianTarget:
    def test_sigma_zero_is_one_hot(self):
        t = gaussian_target((3.0, 3.0), 8, 0.0)
        expected = np.zeros((8, 8), np.float32)
        expected[3, 3] = 1.0
        np.testing.assert_array_equal(t.t, expected)
        assert t.gt_pixel == (3, 3)

    @pytest.mark.parametrize("sigma", [0.0, 1.0, 4.0, 8.0])
    def test_sums_to_one(self, sigma):
        t = gaussian_target((10.2, 50.9), 64, sigma)
        assert abs(float(t.t.sum()) - 1.0) < 1e-6
        assert (t.t >= 0).all()

    def test_matches_direct_formula(self):
        L, sigma = 64, 4.0
        gt = (32.0, 32.0)
        t = gaussian_target(gt, L, sigma)
        centers = np.arange(L) + 0.5
        d2 = (centers[:, None] - gt[0]) ** 2 + (centers[None, :] - gt[1]) ** 2
        expected = np.exp(-d2 / (2 * sigma**2))
        expected /= expected.sum()
        np.testing.assert_allclose(t.t, expected, atol=1e-6)

    def test_argmax_is_gt_cell(self, rng):
        for _ in range(50):
            gt = tuple(rng.uniform(0, 16, size=2))
            t = gaussian_target(gt, 16, 2.0)
            assert np.unravel_index(t.t.argmax(), t.t.shape) == t.gt_pixel
            assert t.gt_pixel == (int(gt[0]), int(gt[1]))

    def test_outside_grid_rejected(self):
        with pytest.raises(DataError):
            gaussian_target((16.0, 3.0), 16, 2.0)


class TestOutputLoss:
    def test_uniform_logits_closed_form(self):
        logits = Tensor(np.zeros((64, 64), np.float32))
        t = gaussian_target((20.3, 40.7), 64, 4.0)
        assert output_loss(logits, t).item() == pytest.approx(math.log(4096), abs=1e-4)

    def test_spike_at_gt_drives_loss_to_zero(self):
        t = gaussian_target((3.0, 5.0), 8, 0.0)
        logits = np.zeros((8, 8), np.float32)
        logits[3, 5] = 50.0
        assert output_loss(Tensor(logits), t).item() == pytest.approx(0.0, abs=1e-4)

    def test_matches_naive_oracle(self, rng):
        logits = rng.standard_normal((16, 16)).astype(np.float32) * 3
        t = gaussian_target((7.7, 3.2), 16, 2.0)
        val = output_loss(Tensor(logits), t).item()
        p = np.exp(logits.astype(np.float64) - logits.max())
        p /= p.sum()
        naive = -(t.t.astype(np.float64) * np.log(p)).sum()
        assert val == pytest.approx(naive, abs=1e-5)

    def test_gibbs_inequality(self, rng):
        # Cross-entropy is bounded below by the target's own entropy.
        for _ in range(20):
            logits = Tensor(rng.standard_normal((16, 16)) * rng.uniform(0.5, 4))
            t = gaussian_target(tuple(rng.uniform(0, 16, 2)), 16, rng.uniform(0.5, 4))
            entropy = -(t.t[t.t > 0] * np.log(t.t[t.t > 0])).sum()
            assert output_loss(logits, t).item() >= entropy - 1e-5

    def test_gradients(self, rng, f64):
        logits = Tensor(rng.standard_normal((8, 8)), requires_grad=True)
        t = gaussian_target((4.4, 2.2), 8, 1.5)
        check_gradients(lambda: output_loss(logits, t), logits, indices=range(10))


class TestPositivenessWeights:
    def test_one_hot_target_stays_one_hot(self):
        t = gaussian_target((9.0, 2.0), 16, 0.0)
        w = positiveness_weights(t, 4)
        expected = np.zeros((4, 4), np.float32)
        expected[2, 0] = 1.0
        np.testing.assert_array_equal(w.w, expected)
        assert w.ij_pos == (2, 0)

    def test_sums_to_one(self, rng):
        for _ in range(20):
            t = gaussian_target(tuple(rng.uniform(0, 64, 2)), 64, rng.uniform(0.5, 8))
            w = positiveness_weights(t, 4)
            assert abs(float(w.w.sum()) - 1.0) < 1e-6

    def test_border_gt_spreads_over_two_cells(self):
        # gt just inside cell (0, 0) of a 4x4 pooling of a 64x64 map, near the
        # vertical border at v = 16: cells (0,0) and (0,1) both carry weight.
        t = gaussian_target((8.0, 15.9), 64, 4.0)
        w = positiveness_weights(t, 4)
        assert w.w[0, 0] > 0.2
        assert w.w[0, 1] > 0.2

    def test_matches_blockwise_oracle(self, rng):
        for _ in range(20):
            t = gaussian_target(tuple(rng.uniform(0, 32, 2)), 32, rng.uniform(1, 6))
            N = int(rng.choice([2, 4, 8]))
            w = positiveness_weights(t, N)
            s = 32 // N
            expected = np.zeros((N, N))
            for i in range(N):
                for j in range(N):
                    expected[i, j] = t.t[i * s : (i + 1) * s, j * s : (j + 1) * s].max()
            expected /= expected.sum()
            np.testing.assert_allclose(w.w, expected, atol=1e-6)

    def test_divisibility_enforced(self):
        t = gaussian_target((3.0, 3.0), 16, 1.0)
        with pytest.raises(ConfigError):
            positiveness_weights(t, 3)


class TestInfonce:
    def test_uniform_map_n4(self):
        M = Tensor(np.full((4, 4), 0.5, np.float32))
        assert infonce_cell(M, (1, 2), 0.1).item() == pytest.approx(math.log(16), abs=1e-4)

    def test_uniform_map_n8(self):
        M = Tensor(np.full((8, 8), -0.3, np.float32))
        assert infonce_cell(M, (0, 0), 0.1).item() == pytest.approx(math.log(64), abs=1e-4)

    def test_strong_positive_matches_direct_evaluation(self):
        M = np.full((4, 4), -1.0, np.float32)
        M[2, 1] = 1.0
        val = infonce_cell(Tensor(M), (2, 1), 0.1).item()
        direct = -math.log(math.exp(10.0) / (math.exp(10.0) + 15 * math.exp(-10.0)))
        assert val == pytest.approx(direct, abs=1e-5)

    def test_shift_invariance(self, rng):
        M = rng.uniform(-1, 1, (4, 4)).astype(np.float32)
        a = infonce_cell(Tensor(M), (1, 1), 0.1).item()
        b = infonce_cell(Tensor(M + 0.37), (1, 1), 0.1).item()
        assert a == pytest.approx(b, abs=1e-4)

    def test_finite_for_extreme_inputs(self):
        M = Tensor(np.array([[1.0, -1.0], [1.0, -1.0]], np.float32))
        assert math.isfinite(infonce_cell(M, (0, 0), 1e-3).item())


class TestBottleneckLoss:
    def test_one_hot_weights_reduce_to_single_cell(self, rng):
        M = Tensor(rng.uniform(-1, 1, (4, 4)).astype(np.float32))
        t = gaussian_target((17.0, 33.0), 64, 0.0)
        w = positiveness_weights(t, 4)
        ij = w.ij_pos
        assert bottleneck_loss(M, w, 0.1).item() == pytest.approx(
            infonce_cell(M, ij, 0.1).item(), abs=1e-6
        )

    def test_uniform_map_gives_log_cells(self, rng):
        M = Tensor(np.full((4, 4), 0.2, np.float32))
        t = gaussian_target(tuple(rng.uniform(0, 64, 2)), 64, 4.0)
        w = positiveness_weights(t, 4)
        assert bottleneck_loss(M, w, 0.1).item() == pytest.approx(math.log(16), abs=1e-4)

    def test_matches_double_sum_oracle(self, rng):
        M = rng.uniform(-1, 1, (4, 4)).astype(np.float32)
        t = gaussian_target(tuple(rng.uniform(0, 64, 2)), 64, 4.0)
        w = positiveness_weights(t, 4)
        val = bottleneck_loss(Tensor(M), w, 0.1).item()
        scaled = M.astype(np.float64) / 0.1
        lse = np.log(np.exp(scaled - scaled.max()).sum()) + scaled.max()
        oracle = sum(
            w.w[i, j] * (lse - scaled[i, j]) for i in range(4) for j in range(4)
        )
        assert val == pytest.approx(oracle, abs=1e-5)

    def test_monotone_in_positive_similarity(self):
        t = gaussian_target((33.0, 17.0), 64, 0.0)
        w = positiveness_weights(t, 4)
        base = np.zeros((4, 4), np.float32)
        prev = math.inf
        for bump in (0.0, 0.2, 0.5, 0.9):
            M = base.copy()
            M[w.ij_pos] = bump
            val = bottleneck_loss(Tensor(M), w, 0.1).item()
            assert val < prev
            prev = val

    def test_gradients(self, rng, f64):
        M = Tensor(rng.uniform(-0.9, 0.9, (4, 4)), requires_grad=True)
        t = gaussian_target((30.0, 30.0), 64, 4.0)
        w = positiveness_weights(t, 4)
        check_gradients(lambda: bottleneck_loss(M, w, 0.5), M, indices=range(16))


class TestTotalLoss:
    def test_beta_zero_equals_output_loss(self, rng):
        logits = Tensor(rng.standard_normal((64, 64)).astype(np.float32))
        M = Tensor(rng.uniform(-1, 1, (4, 4)).astype(np.float32))
        t = gaussian_target((20.0, 22.0), 64, 4.0)
        cfg = LossConfig(beta=0.0)
        assert total_loss(logits, M, t, cfg).item() == output_loss(logits, t).item()

    def test_uniform_closed_form_sum(self):
        logits = Tensor(np.zeros((64, 64), np.float32))
        M = Tensor(np.zeros((4, 4), np.float32))
        t = gaussian_target((31.5, 31.5), 64, 4.0)
        val = total_loss(logits, M, t, LossConfig(beta=1e4, tau=0.1)).item()
        assert val == pytest.approx(math.log(4096) + 1e4 * math.log(16), rel=1e-5)

    def test_beta_additivity_exact(self, rng):
        logits = Tensor(rng.standard_normal((64, 64)).astype(np.float32))
        M = Tensor(rng.uniform(-1, 1, (4, 4)).astype(np.float32))
        t = gaussian_target((40.1, 13.9), 64, 4.0)
        cfg = LossConfig(beta=1e4, tau=0.1)
        total = total_loss(logits, M, t, cfg).item()
        parts = (
            output_loss(logits, t).item()
            + 1e4 * bottleneck_loss(M, positiveness_weights(t, 4), 0.1).item()
        )
        assert total == np.float32(parts)

    def test_logit_gradient_independent_of_beta(self, rng):
        base_logits = rng.standard_normal((16, 16)).astype(np.float32)
        base_M = rng.uniform(-1, 1, (4, 4)).astype(np.float32)
        t = gaussian_target((7.0, 9.0), 16, 2.0)

        def grad_for(beta):
            logits = Tensor(base_logits.copy(), requires_grad=True)
            M = Tensor(base_M.copy(), requires_grad=True)
            ad.backward(total_loss(logits, M, t, LossConfig(beta=beta, tau=0.1)))
            return logits.grad.copy()

        np.testing.assert_array_equal(grad_for(0.0), grad_for(1e4))

    def test_finite_for_finite_inputs(self, rng):
        logits = Tensor((rng.standard_normal((16, 16)) * 1e3).astype(np.float32))
        M = Tensor(rng.uniform(-1, 1, (4, 4)).astype(np.float32))
        t = gaussian_target((3.0, 3.0), 16, 2.0)
        assert math.isfinite(total_loss(logits, M, t, LossConfig()).item())
