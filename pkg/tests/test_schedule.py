import math

import numpy as np
import pytest

from lesionaug.errors import ConfigError, FingerprintError
from lesionaug.schedule import (check_fingerprint, forward_diffuse, make_linear_schedule,
                                schedule_from_config)


def test_single_step_schedule():
    s = make_linear_schedule(1, 1e-4, 1e-4)
    assert s.alpha_bar[0] == pytest.approx(0.9999, abs=1e-15)


def test_two_step_hand_product():
    s = make_linear_schedule(2, 0.1, 0.2)
    np.testing.assert_allclose(s.beta, [0.1, 0.2])
    np.testing.assert_allclose(s.alpha_bar, [0.9, 0.72], rtol=1e-15)


def test_default_schedule_against_product_oracle():
    s = make_linear_schedule()
    betas = [1e-4 + (0.02 - 1e-4) * i / 999 for i in range(1000)]
    prod = 1.0
    for b in betas:
        prod *= 1.0 - b
    assert s.alpha_bar[-1] == pytest.approx(prod, rel=1e-10)
    assert s.alpha_bar[-1] < 1e-4
    assert np.all(np.diff(s.alpha_bar) < 0)
    np.testing.assert_array_equal(s.sigma, np.sqrt(s.beta))
    assert s.beta[0] == 1e-4 and s.beta[-1] == 0.02


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02),
                                  (10, 1e-4, 1.0)])
def test_schedule_bounds(args):
    with pytest.raises(ConfigError):
        make_linear_schedule(*args)


def test_alpha_bar_zero_convention():
    s = make_linear_schedule(10, 0.01, 0.1)
    assert s.alpha_bar_at(0) == 1.0
    assert s.alpha_bar_at(3) == s.alpha_bar[2]
    with pytest.raises(ConfigError):
        s.alpha_bar_at(11)


def test_fingerprint_checks():
    s = schedule_from_config({"T": 50, "beta_start": 1e-3, "beta_end": 0.05})
    check_fingerprint(s, {"T": 50, "beta_start": 1e-3, "beta_end": 0.05})
    with pytest.raises(FingerprintError):
        check_fingerprint(s, {"T": 51, "beta_start": 1e-3, "beta_end": 0.05})
    with pytest.raises(ConfigError):
        schedule_from_config({"steps": 3})


def test_zero_noise_scales_signal(rng):
    s = make_linear_schedule()
    x0 = rng.uniform(size=(4, 4, 1))
    for t in (1, 500, 1000):
        np.testing.assert_array_equal(forward_diffuse(x0, t, np.zeros_like(x0), s),
                                      np.sqrt(s.alpha_bar[t - 1]) * x0)


def test_first_step_is_near_identity(rng):
    s = make_linear_schedule()
    x0 = rng.uniform(-1, 1, size=(8, 8, 3))
    xt = forward_diffuse(x0, 1, rng.standard_normal(x0.shape), s)
    assert np.max(np.abs(xt - x0)) < 1e-2 * 5
    xt0 = forward_diffuse(x0, 1, rng.uniform(-0.99, 0.99, size=x0.shape), s)
    assert np.max(np.abs(xt0 - x0)) < 1e-2


def test_terminal_statistics_monte_carlo(rng):
    s = make_linear_schedule()
    x0 = np.full((100000,), 0.7)
    xt = forward_diffuse(x0, s.T, rng.standard_normal(x0.shape), s)
    assert abs(xt.mean()) < 0.05
    assert abs(xt.var() - 1.0) < 0.05


@pytest.mark.parametrize("t", [1, 100, 400, 1000])
def test_variance_preservation(rng, t):
    s = make_linear_schedule()
    x0 = rng.standard_normal(100000)
    xt = forward_diffuse(x0, t, rng.standard_normal(x0.shape), s)
    assert xt.var() == pytest.approx(1.0, rel=0.05)


@pytest.mark.parametrize("a", [2.0, -0.5, 8.0, 0.25])
def test_linearity_exact(rng, a):
    s = make_linear_schedule()
    x0, eps = rng.standard_normal((2, 5, 5, 1))
    np.testing.assert_array_equal(forward_diffuse(a * x0, 321, a * eps, s),
                                  a * forward_diffuse(x0, 321, eps, s))


def test_forward_errors():
    s = make_linear_schedule(10, 0.01, 0.1)
    with pytest.raises(ConfigError):
        forward_diffuse(np.zeros((2, 2, 1)), 1, np.zeros((2, 2, 3)), s)
    for t in (0, 11):
        with pytest.raises(ConfigError):
            forward_diffuse(np.zeros(3), t, np.zeros(3), s)
    assert math.isfinite(forward_diffuse(np.zeros(3), 10, np.ones(3), s)[0])
