import math

import numpy as np
import pytest
from scipy import integrate, stats

from quadlaplace.likelihood import GaussianLikelihood


def test_log_density_examples():
    lik = GaussianLikelihood(1.0)
    assert lik.log_density(0.3, 0.3) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)
    assert lik.log_density(2.0, 1.0) == pytest.approx(-0.5 - 0.5 * math.log(2 * math.pi), abs=1e-15)
    four = GaussianLikelihood(4.0)
    ref = stats.norm(loc=0.0, scale=0.5).logpdf(0.5)
    assert abs(four.log_density(0.5, 0.0) - ref) <= 1e-12


@pytest.mark.parametrize("bad", [0.0, -1.0, float("inf"), float("nan")])
def test_rejects_invalid_precision(bad):
    with pytest.raises(ValueError):
        GaussianLikelihood(bad)


def test_residual_and_noise_examples():
    assert GaussianLikelihood(1.0).residual(2.0, 1.0) == 1.0
    assert GaussianLikelihood(3.0).residual(0.4, 0.4) == 0.0
    assert GaussianLikelihood(2.0).residual(0.0, 1.0) == -2.0
    assert GaussianLikelihood(1.0).noise() == 1.0
    assert GaussianLikelihood(0.25).noise() == 0.25


def test_derivatives_in_f_match_residual_and_noise():
    rng = np.random.default_rng(0)
    h = 1e-4
    for _ in range(20):
        lik = GaussianLikelihood(float(rng.uniform(0.1, 5)))
        y, f = rng.standard_normal(2)
        d1 = (lik.log_density(y, f + h) - lik.log_density(y, f - h)) / (2 * h)
        d2 = (lik.log_density(y, f + h) - 2 * lik.log_density(y, f) + lik.log_density(y, f - h)) / h**2
        assert abs(d1 - lik.residual(y, f)) <= 1e-8 * max(1, abs(d1))
        assert abs(d2 + lik.noise()) <= 1e-6 * lik.noise() + 1e-6


def test_density_integrates_to_one():
    lik = GaussianLikelihood(2.5)
    val, _ = integrate.quad(lambda y: math.exp(lik.log_density(y, 0.7)), -np.inf, np.inf)
    assert abs(val - 1.0) <= 1e-8


def test_vectorized():
    lik = GaussianLikelihood(2.0)
    y = np.array([0.0, 1.0])
    out = lik.log_density(y, np.zeros(2))
    assert out.shape == (2,) and out[0] > out[1]
