import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import alpha_bar_logsum
from pointdiff.schedule import (
    ScheduleError,
    forward_noise_global,
    forward_noise_local,
    make_linear_schedule,
    noise_scale,
    schedule_from_betas,
)

SCHED = make_linear_schedule()


def test_linear_endpoints():
    assert SCHED.T == 1000
    assert SCHED.beta(1) == 3.5e-5
    assert SCHED.beta(1000) == pytest.approx(0.007, abs=1e-15)


def test_alpha_bar_final():
    assert SCHED.alpha_bar(1000) == pytest.approx(0.0295, abs=1e-3)
    assert abs(SCHED.alpha_bar(1000) - alpha_bar_logsum(SCHED.betas)) < 1e-12


def test_two_step_hand_product():
    s = schedule_from_betas([0.5, 0.5])
    np.testing.assert_array_equal(s.alpha_bars, [0.5, 0.25])


def test_step_zero_convention():
    assert SCHED.alpha_bar(0) == 1.0
    with pytest.raises(ScheduleError):
        SCHED.beta(0)
    with pytest.raises(ScheduleError):
        SCHED.alpha_bar(1001)


def test_arrays_read_only():
    with pytest.raises(ValueError):
        SCHED.betas[0] = 0.1


@pytest.mark.parametrize("betas", [[], [0.0, 0.1], [1.0], [[0.1]]])
def test_bad_betas(betas):
    with pytest.raises(ScheduleError):
        schedule_from_betas(betas)


def test_alpha_bar_monotone_in_unit_interval():
    ab = SCHED.alpha_bars
    assert np.all(np.diff(ab) < 0) and ab[-1] > 0 and ab[0] < 1


@given(st.lists(st.floats(1e-6, 0.5), min_size=1, max_size=200))
def test_cumprod_matches_logsum(betas):
    s = schedule_from_betas(betas)
    assert s.alpha_bar(len(betas)) == pytest.approx(alpha_bar_logsum(betas), rel=1e-12)


def test_global_noise_zero_noise_full_signal():
    s = schedule_from_betas([1e-12])
    x0 = np.array([[1.0, 2.0, 3.0]])
    np.testing.assert_allclose(forward_noise_global(x0, 1, np.zeros((1, 3)), s), x0, atol=1e-12)


def test_global_noise_hand_value():
    s = schedule_from_betas([0.5, 0.5])
    out = forward_noise_global([[4.0, 0, 0]], 2, [[2.0, 0, 0]], s)
    np.testing.assert_allclose(out, [[2 + np.sqrt(0.75) * 2, 0, 0]], rtol=1e-15)


def test_global_noise_washes_out_signal():
    eps = np.random.default_rng(0).normal(size=(50, 3))
    x0 = np.random.default_rng(1).normal(size=(50, 3))
    s = schedule_from_betas([0.9999] * 3)
    out = forward_noise_global(x0, 3, eps, s)
    bound = np.sqrt(s.alpha_bar(3)) * np.linalg.norm(x0, axis=1) + 1e-12
    assert np.all(np.linalg.norm(out - eps * np.sqrt(1 - s.alpha_bar(3)), axis=1) <= bound)


def test_local_noise_zero_noise():
    p = np.random.default_rng(0).normal(size=(7, 3))
    np.testing.assert_array_equal(forward_noise_local(p, 500, np.zeros_like(p), SCHED), p)


def test_local_noise_half_scale():
    s = schedule_from_betas([0.25])
    out = forward_noise_local([[1.0, 2.0, 3.0]], 1, [[1.0, 0.0, -1.0]], s)
    np.testing.assert_allclose(out, [[1.5, 2.0, 2.5]], rtol=1e-15)


def test_local_noise_final_step():
    out = forward_noise_local([[0.0, 0, 0]], 1000, [[1.0, 0, 0]], SCHED)
    assert out[0, 0] == pytest.approx(0.98513, abs=1e-4)
    assert out[0, 0] == pytest.approx(np.sqrt(1 - alpha_bar_logsum(SCHED.betas)), rel=1e-12)


def test_noise_scale_values():
    assert noise_scale(1, SCHED) == pytest.approx(5.916e-3, abs=1e-6)
    assert noise_scale(1, SCHED) == pytest.approx(np.sqrt(3.5e-5), rel=1e-12)
    assert noise_scale(1000, SCHED) == pytest.approx(0.98513, abs=1e-4)


def test_noise_shape_mismatch():
    with pytest.raises(ScheduleError):
        forward_noise_local(np.zeros((2, 3)), 1, np.zeros((3, 3)), SCHED)
