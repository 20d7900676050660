from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pointdiff.sampler import (
    ConsistentOraclePredictor,
    SamplerConfig,
    SamplerError,
    build_initial_noisy,
    cfg_combine,
    jump_step,
    posterior_sigma,
    reverse_step,
    sample,
    step_sequence,
)
from pointdiff.schedule import forward_noise_local, make_linear_schedule, noise_scale, schedule_from_betas

SCHED = make_linear_schedule()
vecs = arrays(np.float64, (5, 3), elements=st.floats(-10, 10, allow_nan=False))


class TestGuidance:
    @given(vecs, st.floats(-10, 10))
    def test_equal_predictions(self, e, s):
        np.testing.assert_allclose(cfg_combine(e, e, s), e, atol=0)

    @given(vecs, vecs)
    def test_weight_one_is_conditional_bitwise(self, eu, ec):
        assert cfg_combine(eu, ec, 1.0).tobytes() == ec.tobytes()

    @given(vecs, vecs)
    def test_weight_zero_is_unconditional(self, eu, ec):
        np.testing.assert_array_equal(cfg_combine(eu, ec, 0.0), eu)

    def test_scalar_example(self):
        out = cfg_combine([[0.1, 0, 0]], [[0.2, 0, 0]], 6.0)[0, 0]
        exact = Fraction(0.1) + 6 * (Fraction(0.2) - Fraction(0.1))
        assert out == float(exact)
        assert out == pytest.approx(0.7, abs=2e-16)

    def test_length_mismatch(self):
        with pytest.raises(SamplerError):
            cfg_combine(np.zeros((2, 3)), np.zeros((3, 3)), 2.0)


class TestReverseStep:
    def test_zero_noise_is_identity(self):
        x = np.random.default_rng(0).normal(size=(4, 3))
        np.testing.assert_array_equal(reverse_step(x, np.zeros_like(x), 500, SCHED), x)

    def test_hand_scalar(self):
        s = schedule_from_betas([1 - 0.5 / 0.99, 0.01])
        assert s.alpha_bar(2) == pytest.approx(0.5, abs=1e-15)
        eps = np.array([[1 / np.sqrt(0.5), 0, 0]])
        out = reverse_step([[1.0, 0, 0]], eps, 2, s)
        assert out[0, 0] == pytest.approx(0.98, abs=1e-12)

    def test_final_step_zeroes_residual(self):
        base = np.random.default_rng(0).normal(size=(10, 3))
        x = base + 0.3
        oracle = ConsistentOraclePredictor(base, SCHED)
        out = reverse_step(x, oracle.predict(x, None, 1), 1, SCHED)
        np.testing.assert_allclose(out, base, atol=1e-12)

    def test_stochastic_adds_scaled_noise(self):
        x = np.zeros((20000, 3))
        cfg = SamplerConfig(stochastic=True, seed=3)
        out = reverse_step(x, np.zeros_like(x), 500, SCHED, cfg)
        assert out.std() == pytest.approx(posterior_sigma(500, SCHED), rel=0.02)
        det = reverse_step(x, np.zeros_like(x), 1, SCHED, cfg)
        np.testing.assert_array_equal(det, x)

    def test_posterior_sigma_modes(self):
        var = (1 - SCHED.alpha_bar(9)) / (1 - SCHED.alpha_bar(10)) * SCHED.beta(10)
        assert posterior_sigma(10, SCHED, "std") == pytest.approx(np.sqrt(var), rel=1e-14)
        assert posterior_sigma(10, SCHED, "verbatim") == pytest.approx(var, rel=1e-14)
        assert posterior_sigma(1, SCHED) == 0.0


class TestJumpStep:
    def test_to_zero_returns_estimate(self):
        base = np.random.default_rng(1).normal(size=(6, 3))
        eps = np.random.default_rng(2).normal(size=(6, 3))
        x = forward_noise_local(base, 700, eps, SCHED)
        np.testing.assert_allclose(jump_step(x, eps, 700, 0, SCHED), base, atol=1e-12)

    def test_between_steps_matches_forward_noise(self):
        base = np.zeros((3, 3))
        eps = np.eye(3)
        x = forward_noise_local(base, 900, eps, SCHED)
        np.testing.assert_allclose(jump_step(x, eps, 900, 400, SCHED),
                                   forward_noise_local(base, 400, eps, SCHED), atol=1e-12)

    def test_order(self):
        with pytest.raises(SamplerError):
            jump_step(np.zeros((1, 3)), np.zeros((1, 3)), 10, 10, SCHED)


class TestStepSequence:
    @pytest.mark.parametrize("steps", [1, 2, 7, 50, 999, 1000])
    def test_strictly_decreasing_and_ends_at_one(self, steps):
        seq = step_sequence(1000, steps)
        assert len(seq) == steps and seq[-1] == 1
        assert np.all(np.diff(seq) < 0)
        if steps > 1:
            assert seq[0] == 1000

    def test_full(self):
        np.testing.assert_array_equal(step_sequence(1000, 1000), np.arange(1000, 0, -1))

    @pytest.mark.parametrize("steps", [0, 1001])
    def test_out_of_range(self, steps):
        with pytest.raises(SamplerError):
            step_sequence(1000, steps)


class TestInitialNoisy:
    def test_size_and_determinism(self):
        scan = np.random.default_rng(0).normal(size=(1800, 3))
        a = build_initial_noisy(scan, 10, SCHED, seed=4)
        assert a.shape == (18000, 3)
        np.testing.assert_array_equal(a, build_initial_noisy(scan, 10, SCHED, seed=4))

    def test_large_replication_count(self):
        assert build_initial_noisy(np.zeros((18000, 3)), 10, SCHED, 0).shape == (180000, 3)

    def test_displacement_statistics(self):
        scan = np.random.default_rng(0).normal(size=(500, 3))
        out = build_initial_noisy(scan, 4, SCHED, seed=1)
        d = (out - np.tile(scan, (4, 1))) / noise_scale(SCHED.T, SCHED)
        assert abs(d.mean()) < 3 / np.sqrt(d.size)
        assert d.std() == pytest.approx(1.0, rel=0.05)


class TestOracle:
    def test_zero_offset(self):
        base = np.ones((3, 3))
        np.testing.assert_array_equal(ConsistentOraclePredictor(base, SCHED).predict(base, None, 5), 0)

    def test_inverts_local_noise(self):
        base = np.random.default_rng(0).normal(size=(8, 3))
        eps = np.random.default_rng(1).normal(size=(8, 3))
        x = forward_noise_local(base, 321, eps, SCHED)
        np.testing.assert_allclose(ConsistentOraclePredictor(base, SCHED).predict(x, None, 321), eps, atol=1e-12)


def _oracle_chain(base, seed):
    init = forward_noise_local(base, SCHED.T, np.random.default_rng(seed).normal(size=base.shape), SCHED)
    norms = []
    cfg = SamplerConfig(steps=SCHED.T, solver="ddpm", s=6.0)
    out = sample(ConsistentOraclePredictor(base, SCHED), base, init, SCHED, cfg,
                 callback=lambda t, x, ec, e: norms.append(np.linalg.norm(x - base, axis=1)))
    norms.append(np.linalg.norm(out - base, axis=1))
    return out, np.array(norms)


class TestSample:
    def test_oracle_full_chain_recovers_base(self):
        base = np.random.default_rng(5).uniform(-20, 20, size=(50, 3))
        out, norms = _oracle_chain(base, 6)
        np.testing.assert_allclose(out, base, rtol=0, atol=1e-9)
        assert np.all(np.diff(norms, axis=0) < 0)

    @pytest.mark.parametrize("steps", [1, 10, 50])
    def test_strided_jump_solver_recovers_base(self, steps):
        base = np.random.default_rng(0).normal(size=(30, 3))
        init = build_initial_noisy(base, 1, SCHED, 1)
        out = sample(ConsistentOraclePredictor(base, SCHED), base, init, SCHED, SamplerConfig(steps=steps))
        np.testing.assert_allclose(out, base, atol=1e-9)

    def test_zero_guidance_uses_only_unconditional(self):
        class Split:
            def predict(self, x, cond, t):
                return np.full_like(x, 0.01) if cond is None else np.full_like(x, 5.0)

        class Uncond:
            def predict(self, x, cond, t):
                return np.full_like(x, 0.01)

        init = np.random.default_rng(0).normal(size=(5, 3))
        cfg = SamplerConfig(s=0.0, steps=20)
        np.testing.assert_array_equal(sample(Split(), "c", init, SCHED, cfg),
                                      sample(Uncond(), "c", init, SCHED, cfg))

    @pytest.mark.parametrize("solver", ["ddim", "ddpm"])
    def test_deterministic_repeat(self, solver):
        base = np.random.default_rng(0).normal(size=(10, 3))
        init = build_initial_noisy(base, 2, SCHED, 0)
        oracle = ConsistentOraclePredictor(np.tile(base, (2, 1)) * 0.9, SCHED)
        cfg = SamplerConfig(steps=100, solver=solver, stochastic=True, seed=11)
        a = sample(oracle, None, init, SCHED, cfg)
        b = sample(oracle, None, init, SCHED, cfg)
        assert a.tobytes() == b.tobytes()

    def test_callback_sees_every_step(self):
        seen = []
        init = np.zeros((2, 3))
        sample(lambda x, c, t: np.zeros_like(x), None, init, SCHED, SamplerConfig(steps=7),
               callback=lambda t, *rest: seen.append(t))
        assert seen == step_sequence(1000, 7).tolist()

    @pytest.mark.parametrize("kw", [{"steps": 0}, {"solver": "euler"}, {"sigma_mode": "x"},
                                    {"s": float("nan")}, {"replicate": 0}])
    def test_bad_config(self, kw):
        with pytest.raises(SamplerError):
            sample(lambda x, c, t: x, None, np.zeros((1, 3)), SCHED, SamplerConfig(**kw))

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 10_000))
    def test_oracle_offsets_shrink_for_any_seed(self, seed):
        base = np.random.default_rng(seed).normal(size=(5, 3))
        _, norms = _oracle_chain(base, seed + 1)
        assert np.all(np.diff(norms, axis=0) < 0)
