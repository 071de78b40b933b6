"""Diffusion algebra: schedule, noising inversion, DDIM round trips, CFG."""

import numpy as np
import pytest

from streamedit import diffusion as df
from streamedit.autodiff import Tensor, gradient_check, mean_square, mul, sub
from streamedit.rng import FUZZ, philox


def t(data):
    return Tensor(np.asarray(data, dtype=np.float32))


class TestSchedule:
    def test_single_step(self):
        s = df.build_schedule(1, 0.02, 0.02)
        assert abs(s.alpha_bar(1) - 0.98) < 1e-12

    def test_thousand_step_product(self):
        s = df.build_schedule(1000, 1e-4, 0.02)
        betas = np.linspace(1e-4, 0.02, 1000)
        direct = np.prod(1.0 - betas)  # independent product oracle
        assert abs(s.alpha_bar(1000) - direct) / direct < 1e-12
        assert abs(s.alpha_bar(1000) - 4.0e-5) < 1e-5

    def test_strictly_decreasing(self):
        s = df.build_schedule(100)
        bars = [s.alpha_bar(t) for t in range(1, 101)]
        assert all(a > b for a, b in zip(bars, bars[1:]))

    def test_cumulative_matches_product(self):
        s = df.build_schedule(50)
        for step in (1, 7, 50):
            prod = float(np.prod(s.alphas[:step]))
            assert abs(s.alpha_bar(step) - prod) <= 1e-6 * prod

    def test_invalid_ranges(self):
        with pytest.raises(ValueError):
            df.build_schedule(0)
        with pytest.raises(ValueError):
            df.build_schedule(10, 0.0, 0.02)
        with pytest.raises(ValueError):
            df.build_schedule(10, 0.5, 0.2)


class TestQSample:
    def test_degenerate_noiseless_schedule_returns_x0(self):
        s = df.NoiseSchedule([1.0 - 1e-12])
        x0 = t([1.0, -2.0])
        out = df.q_sample(x0, 1, t([5.0, 5.0]), s)
        assert np.allclose(out.data, x0.data, atol=1e-5)

    def test_zero_signal(self):
        s = df.build_schedule(100)
        eps = t([1.0, 2.0])
        out = df.q_sample(t([0.0, 0.0]), 40, eps, s)
        coef = np.sqrt(1.0 - s.alpha_bar(40))
        assert np.allclose(out.data, coef * eps.data, atol=1e-6)

    def test_monte_carlo_moments(self):
        # 1e5 gaussian draws: sample mean -> sqrt(ab)*x0, std -> sqrt(1-ab)
        s = df.build_schedule(100)
        step, x0_val, n = 60, 1.5, 100_000
        rng = philox(11, FUZZ)
        eps = rng.normal(size=n).astype(np.float32)
        out = df.q_sample(t(np.full(n, x0_val)), step, t(eps), s).data
        ab = s.alpha_bar(step)
        want_mean, want_std = np.sqrt(ab) * x0_val, np.sqrt(1 - ab)
        se_mean = want_std / np.sqrt(n)
        se_std = want_std / np.sqrt(2 * n)
        assert abs(out.mean() - want_mean) < 3 * se_mean
        assert abs(out.std(ddof=1) - want_std) < 3 * se_std

    def test_shape_and_range_errors(self):
        s = df.build_schedule(10)
        with pytest.raises(ValueError):
            df.q_sample(t([1.0]), 5, t([1.0, 2.0]), s)
        with pytest.raises(IndexError):
            df.q_sample(t([1.0]), 11, t([1.0]), s)


class TestPredictX0:
    def test_inverts_q_sample(self):
        s = df.build_schedule(100)
        rng = philox(12, FUZZ)
        for trial in range(50):
            step = int(rng.integers(1, 101))
            x0 = rng.normal(size=(4, 4)).astype(np.float32)
            eps = rng.normal(size=(4, 4)).astype(np.float32)
            xt = df.q_sample(t(x0), step, t(eps), s)
            rec = df.predict_x0(xt, step, t(eps), s)
            assert np.max(np.abs(rec.data - x0)) <= 1e-4

    def test_zero_eps(self):
        s = df.build_schedule(100)
        xt = t([2.0])
        out = df.predict_x0(xt, 30, t([0.0]), s)
        assert np.allclose(out.data, xt.data / np.sqrt(s.alpha_bar(30)), atol=1e-6)

    def test_noiseless_limit(self):
        s = df.NoiseSchedule([1.0 - 1e-12])
        xt = t([3.0, -1.0])
        out = df.predict_x0(xt, 1, t([0.5, 0.5]), s)
        assert np.allclose(out.data, xt.data, atol=1e-5)


class TestReconLoss:
    def test_zero_when_equal(self):
        assert df.recon_loss(t([1.0, 2.0]), t([1.0, 2.0])).item() == 0.0

    def test_hand_value(self):
        assert abs(df.recon_loss(t([0.0, 0.0]), t([1.0, 1.0])).item() - 1.0) < 1e-7

    def test_gradient_matches_fd_and_analytic(self):
        rng = philox(13, FUZZ)
        true = Tensor(rng.normal(size=(2, 3)).astype(np.float32))
        pred0 = Tensor(rng.normal(size=(2, 3)).astype(np.float32))
        f = lambda p: df.recon_loss(true, p)
        ok, max_rel = gradient_check(f, pred0)
        assert ok, max_rel
        from streamedit.autodiff import backward, tape
        p = Tensor(pred0.data.copy(), requires_grad=True)
        with tape():
            g = backward(f(p))[p].data
        assert np.allclose(g, 2 * (p.data - true.data) / p.data.size, atol=1e-6)


class TestCFG:
    def test_lambda_zero_is_conditional_exactly(self):
        c, u = t([1.0, 2.0]), t([9.0, 9.0])
        out = df.cfg_combine(c, u, 0.0)
        assert out is c

    def test_equal_branches_collapse(self):
        rng = philox(14, FUZZ)
        arr = rng.normal(size=5).astype(np.float32)
        out = df.cfg_combine(t(arr), t(arr), 3.7)
        assert np.allclose(out.data, arr, atol=1e-6)

    def test_hand_value(self):
        out = df.cfg_combine(t([2.0]), t([1.0]), 1.0)
        assert np.allclose(out.data, [3.0])

    def test_affine_in_lambda(self):
        rng = philox(15, FUZZ)
        c = t(rng.normal(size=8).astype(np.float32))
        u = t(rng.normal(size=8).astype(np.float32))
        for l1, l2 in [(0.5, 1.5), (1.0, 2.0), (0.0, 3.0)]:
            lhs = df.cfg_combine(c, u, l1).data + df.cfg_combine(c, u, l2).data \
                - df.cfg_combine(c, u, 0.0).data
            rhs = df.cfg_combine(c, u, l1 + l2).data
            assert np.max(np.abs(lhs - rhs)) <= 1e-5

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            df.cfg_combine(t([1.0]), t([1.0]), -0.1)


class TestDDIM:
    def test_final_step_returns_x0_estimate(self):
        s = df.build_schedule(100)
        rng = philox(16, FUZZ)
        xt = t(rng.normal(size=(3,)).astype(np.float32))
        eps = t(rng.normal(size=(3,)).astype(np.float32))
        out = df.ddim_step(xt, 40, 0, eps, s)
        assert np.array_equal(out.data, df.predict_x0(xt, 40, eps, s).data)

    def test_consistent_with_q_sample_pair(self):
        # with the true eps of a q_sample pair, stepping t -> t_prev lands on
        # the q_sample of the same (x0, eps) at t_prev
        s = df.build_schedule(100)
        rng = philox(17, FUZZ)
        x0 = rng.normal(size=(4,)).astype(np.float32)
        eps = rng.normal(size=(4,)).astype(np.float32)
        for t_hi, t_lo in [(100, 66), (66, 33), (33, 1)]:
            xt = df.q_sample(t(x0), t_hi, t(eps), s)
            stepped = df.ddim_step(xt, t_hi, t_lo, t(eps), s)
            want = df.q_sample(t(x0), t_lo, t(eps), s)
            assert np.max(np.abs(stepped.data - want.data)) <= 1e-4

    def test_invert_then_step_identity_fuzzed(self):
        s = df.build_schedule(100)
        rng = philox(18, FUZZ)
        for trial in range(50):
            lo = int(rng.integers(0, 60))
            hi = int(rng.integers(lo + 1, 101))
            x = rng.normal(size=(2, 3)).astype(np.float32)
            eps = rng.normal(size=(2, 3)).astype(np.float32)
            up = df.ddim_invert_step(t(x), lo, hi, t(eps), s)
            back = df.ddim_step(up, hi, lo, t(eps), s)
            assert np.max(np.abs(back.data - x)) <= 1e-4

    def test_invert_zero_eps_is_pure_rescale(self):
        s = df.build_schedule(100)
        x = t([1.0, -2.0])
        out = df.ddim_invert_step(x, 10, 50, t([0.0, 0.0]), s)
        coef = np.sqrt(s.alpha_bar(50) / s.alpha_bar(10))
        assert np.allclose(out.data, coef * x.data, atol=1e-6)

    def test_shape_preserved_any_rank(self):
        s = df.build_schedule(100)
        rng = philox(19, FUZZ)
        for shape in [(5,), (2, 3), (3, 2, 2)]:
            x = t(rng.normal(size=shape).astype(np.float32))
            eps = t(rng.normal(size=shape).astype(np.float32))
            assert df.ddim_invert_step(x, 0, 50, eps, s).shape == shape

    def test_step_order_errors(self):
        s = df.build_schedule(100)
        with pytest.raises(df.StepOrderError):
            df.ddim_step(t([1.0]), 10, 10, t([0.0]), s)
        with pytest.raises(df.StepOrderError):
            df.ddim_invert_step(t([1.0]), 50, 10, t([0.0]), s)


class TestGuidanceConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            df.GuidanceConfig(lam=-1.0)
        with pytest.raises(ValueError):
            df.GuidanceConfig(steps=[])
        with pytest.raises(ValueError):
            df.GuidanceConfig(steps=[10, 10, 20])
        with pytest.raises(ValueError):
            df.GuidanceConfig(steps=[0, 5])
        cfg = df.GuidanceConfig(steps=[33, 66, 100])
        cfg.validate_against(df.build_schedule(100))
        with pytest.raises(ValueError):
            cfg.validate_against(df.build_schedule(50))
