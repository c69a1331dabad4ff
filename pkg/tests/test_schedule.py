import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regdesk.schedule import LinearSchedule, ScheduleError, noise, score_from_velocity, velocity_target

S = LinearSchedule()


def test_linear_coefficients():
    for t in np.linspace(0, 1, 11):
        assert S.alpha(t) == pytest.approx(1 - t)
        assert S.sigma(t) == pytest.approx(t)
        assert S.d_alpha(t) == -1.0
        assert S.d_sigma(t) == 1.0
        assert S.diffusion(t) == S.sigma(t)
        assert S.denominator(t) == 1.0


def test_boundaries():
    assert S.alpha(0.0) == 1 and S.sigma(0.0) == 0
    assert S.alpha(1.0) == 0 and S.sigma(1.0) == 1


@pytest.mark.parametrize(
    "x0,eps,t,expected",
    [(1.0, 0.0, 0.0, 1.0), (1.0, -2.0, 1.0, -2.0), (2.0, 0.5, 0.3, 1.55)],
)
def test_noise_examples(x0, eps, t, expected):
    assert noise(np.array(x0), np.array(eps), t, S) == pytest.approx(expected, abs=1e-15)


def test_velocity_target_examples():
    for t in (0.0, 0.2, 0.9):
        assert velocity_target(np.array(2.0), np.array(0.5), t, S) == -1.5
    assert velocity_target(np.zeros(3), np.zeros(3), 0.4, S).tolist() == [0, 0, 0]
    v = np.array([0.3, -1.2])
    assert np.all(velocity_target(v, v, 0.7, S) == 0)


def test_noise_errors():
    with pytest.raises(ScheduleError):
        noise(np.zeros(3), np.zeros(4), 0.5, S)
    with pytest.raises(ScheduleError):
        noise(np.zeros(3), np.zeros(3), 1.5, S)
    with pytest.raises(ScheduleError):
        noise(np.zeros(3), np.zeros(3), -0.1, S)
    with pytest.raises(ScheduleError):
        velocity_target(np.zeros(2), np.zeros(3), 0.5, S)


def test_score_undefined_at_data_end():
    with pytest.raises(ScheduleError):
        score_from_velocity(np.ones(2), np.ones(2), 0.0, S)


def test_score_from_velocity_examples():
    # unit Gaussian data, x=1, t=0.5: exact velocity is (2t-1)x/((1-t)^2+t^2) = 0
    t, x = 0.5, 1.0
    v = (2 * t - 1) * x / ((1 - t) ** 2 + t**2)
    assert score_from_velocity(np.array(v), np.array(x), t, S) == pytest.approx(-2.0, abs=1e-15)
    assert score_from_velocity(np.array(0.8), np.array(0.0), 0.5, S) == pytest.approx(-0.8)


def test_time_array_broadcast():
    x0 = np.ones((3, 2))
    eps = np.zeros((3, 2))
    t = np.array([0.0, 0.5, 1.0]).reshape(3, 1)
    np.testing.assert_allclose(noise(x0, eps, t, S)[:, 0], [1.0, 0.5, 0.0])


@settings(max_examples=200, deadline=None)
@given(
    x0=st.floats(-5, 5),
    eps=st.floats(-5, 5),
    t=st.floats(0.01, 0.99),
)
def test_velocity_is_time_derivative_of_noise(x0, eps, t):
    x0, eps = np.array(x0), np.array(eps)
    errs = []
    for h in (1e-2, 5e-3):
        fd = (noise(x0, eps, t + h, S) - noise(x0, eps, t - h, S)) / (2 * h)
        errs.append(abs(fd - velocity_target(x0, eps, t, S)))
    # linear path: central difference is exact up to rounding
    assert max(errs) < 1e-9 * (1 + abs(x0) + abs(eps)) / 5e-3


@settings(max_examples=200, deadline=None)
@given(t=st.floats(1e-6, 1.0), d=st.integers(1, 4), seed=st.integers(0, 2**31))
def test_gaussian_round_trip(t, d, seed):
    """score_from_velocity(exact velocity) == exact score for N(m, s^2 I) data."""
    r = np.random.default_rng(seed)
    m, s = r.normal(size=d), r.uniform(0.2, 2.0)
    x = r.normal(size=d) * 2
    a, sg = 1 - t, t
    var = a * a * s * s + sg * sg
    ex = m + a * s * s / var * (x - a * m)
    ee = sg / var * (x - a * m)
    v = -ex + ee
    score = -(x - a * m) / var
    np.testing.assert_allclose(score_from_velocity(v, x, t, S), score, rtol=1e-9, atol=1e-9)
