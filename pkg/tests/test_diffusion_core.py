import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from echolab import nn_core
from echolab.diffusion_core import (
    GaussianDenoiser,
    GMMDenoiser,
    NeuralDenoiser,
    NoiseSchedule,
    analytic_denoiser,
    c_in,
    c_noise,
    c_out,
    c_skip,
    default_denoiser_net,
    denoise,
    denoiser_params,
    edm_train_loss,
    loss_weight,
    precondition_apply,
    score_from_denoiser,
    sigma_steps,
)
from echolab.errors import ConfigError, NumericError
from oracles import central_diff, edm_sigmas, gaussian_score, gmm_logpdf, rel_err

GMM2 = dict(
    weights=[0.3, 0.7],
    means=[[-1.0, 0.5], [1.2, -0.3]],
    covs=[[[0.2, 0.05], [0.05, 0.1]], [[0.15, -0.02], [-0.02, 0.3]]],
)


def noisy_gmm_logpdf(x, sigma):
    covs = [np.array(c) + sigma**2 * np.eye(2) for c in GMM2["covs"]]
    return gmm_logpdf(x, GMM2["weights"], np.array(GMM2["means"]), covs)


def zero_net(d):
    net = default_denoiser_net((d,), hidden=(4,), seed=0)
    return net.with_params(np.zeros_like(net.params))


# --- schedules -------------------------------------------------------------


def test_single_step_is_sigma_max_then_zero():
    np.testing.assert_array_equal(sigma_steps(NoiseSchedule.edm(), 1), [80.0, 0.0])


def test_edm_thirty_steps_endpoints():
    s = sigma_steps(NoiseSchedule.edm(), 30)
    assert len(s) == 31
    assert s[0] == pytest.approx(80.0, rel=1e-14)
    assert s[29] == pytest.approx(0.002, rel=1e-12)
    assert s[30] == 0.0
    np.testing.assert_allclose(s, edm_sigmas(30), rtol=1e-13)


def test_rho_one_is_linear():
    s = sigma_steps(NoiseSchedule.edm(rho=1.0), 11)[:-1]
    np.testing.assert_allclose(np.diff(s), np.full(10, (0.002 - 80.0) / 10), rtol=1e-10)


def test_invalid_schedule_rejected():
    with pytest.raises(ConfigError):
        sigma_steps(NoiseSchedule.edm(sigma_min=5.0, sigma_max=1.0), 10)


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(["edm", "vp", "ve"]), st.integers(1, 1000))
def test_schedule_strictly_decreasing(kind, n):
    sch = getattr(NoiseSchedule, kind)()
    s = sigma_steps(sch, n)
    assert len(s) == n + 1 and s[-1] == 0.0
    assert np.all(np.diff(s) < 0)


@pytest.mark.parametrize("kind", ["vp", "ve"])
def test_sigma_of_t_increasing_and_invertible(kind):
    sch = getattr(NoiseSchedule, kind)()
    t = np.linspace(1e-3, 1.0, 200)
    s = sch.sigma(t)
    assert np.all(np.diff(s) > 0)
    np.testing.assert_allclose(sch.sigma_inv(s), t, rtol=1e-9)


def test_vp_matches_closed_form():
    t = 0.4
    expected = math.sqrt(math.exp(0.5 * 19.9 * t**2 + 0.1 * t) - 1)
    assert NoiseSchedule.vp().sigma(t) == pytest.approx(expected, rel=1e-14)


def test_training_sigmas_lognormal():
    s = NoiseSchedule.edm().sample_training_sigmas(np.random.default_rng(0), 200_000)
    assert np.log(s).mean() == pytest.approx(-1.2, abs=0.01)
    assert np.log(s).std() == pytest.approx(1.2, abs=0.01)


# --- preconditioning ---------------------------------------------------------


def test_coefficient_limits():
    assert c_skip(1e-9) == pytest.approx(1.0)
    assert c_out(1e-9) == pytest.approx(0.0, abs=1e-8)
    assert c_skip(0.5) == pytest.approx(0.5)


def test_zero_net_small_sigma_is_identity():
    x = np.random.default_rng(0).standard_normal((4, 3))
    np.testing.assert_allclose(precondition_apply(zero_net(3), x, 1e-9), x, atol=1e-6)


def test_zero_net_at_sigma_data_halves():
    x = np.random.default_rng(1).standard_normal((4, 3))
    np.testing.assert_allclose(precondition_apply(zero_net(3), x, 0.5, 0.5), x / 2, rtol=1e-15)


def test_random_net_matches_hand_composed_coefficients():
    # sigma = 1, sigma_data = 0.5: c_skip = 0.2, c_out = 0.5/sqrt(1.25), c_in = 1/sqrt(1.25), c_noise = 0
    net = default_denoiser_net((3,), hidden=(5,), seed=3)
    x = np.random.default_rng(3).standard_normal((2, 3))
    inp = np.concatenate([x / math.sqrt(1.25), np.zeros((2, 1))], axis=1)
    expected = 0.2 * x + 0.5 / math.sqrt(1.25) * net(inp)
    np.testing.assert_allclose(precondition_apply(net, x, 1.0, 0.5), expected, rtol=1e-14)
    assert c_noise(1.0) == 0.0 and c_in(1.0) == pytest.approx(1 / math.sqrt(1.25))


# --- analytic denoisers ------------------------------------------------------


def test_sigma_zero_returns_input():
    x = np.random.default_rng(2).standard_normal((3, 2))
    for d in (GaussianDenoiser(np.zeros(2), np.eye(2)), GMMDenoiser(**GMM2)):
        out = denoise(d, x, 0.0)
        assert np.array_equal(out, x) and out is not x


def test_non_finite_input_rejected():
    with pytest.raises(NumericError):
        GaussianDenoiser(np.zeros(2), np.eye(2))(np.array([[np.nan, 0.0]]), 1.0)


def test_gaussian_posterior_mean_closed_form():
    rng = np.random.default_rng(4)
    a = rng.standard_normal((3, 3))
    cov = a @ a.T + 0.5 * np.eye(3)
    mu = rng.standard_normal(3)
    x = rng.standard_normal((5, 3))
    sigma = 0.7
    expected = mu + (cov @ np.linalg.inv(cov + sigma**2 * np.eye(3)) @ (x - mu).T).T
    np.testing.assert_allclose(GaussianDenoiser(mu, cov)(x, sigma), expected, rtol=1e-12)


def test_gmm_tweedie_against_finite_differences():
    d = GMMDenoiser(**GMM2)
    x = np.array([[0.3, -0.2]])
    for sigma in (0.1, 0.5, 2.0):
        fd = central_diff(lambda z: noisy_gmm_logpdf(z, sigma)[0], x, h=1e-5)
        assert rel_err(d(x, sigma), x + sigma**2 * fd) < 1e-5
        assert rel_err(d.score(x, sigma), fd) < 1e-5


def test_gmm_log_density_matches_oracle():
    d = GMMDenoiser(**GMM2)
    x = np.random.default_rng(5).standard_normal((10, 2))
    np.testing.assert_allclose(d.log_density(x, 0.3), noisy_gmm_logpdf(x, 0.3), rtol=1e-12)


def test_isotropic_score():
    x = np.random.default_rng(6).standard_normal((4, 3))
    np.testing.assert_allclose(score_from_denoiser(GaussianDenoiser(np.zeros(3), np.eye(3)), x, 1.0),
                               -x / 2, rtol=1e-13)


def test_score_zero_at_mean():
    mu = np.array([0.3, -1.0])
    d = GaussianDenoiser(mu, [[0.5, 0.1], [0.1, 0.2]])
    np.testing.assert_allclose(d.score(mu[None, :], 0.8), 0.0, atol=1e-15)


def test_gaussian_score_exact():
    cov = np.array([[0.5, 0.1], [0.1, 0.2]])
    x = np.random.default_rng(7).standard_normal((6, 2))
    d = GaussianDenoiser(np.zeros(2), cov)
    np.testing.assert_allclose(d.score(x, 0.4), gaussian_score(x, 0, cov + 0.16 * np.eye(2)), rtol=1e-12)


def test_score_rejects_sigma_zero():
    with pytest.raises(ValueError):
        score_from_denoiser(GaussianDenoiser(np.zeros(2), np.eye(2)), np.zeros((1, 2)), 0.0)


@pytest.mark.parametrize("sigma", [0.01, 0.1, 1.0, 10.0])
def test_tweedie_consistency(sigma):
    x = np.random.default_rng(8).standard_normal((20, 2)) * 2
    for d in (GaussianDenoiser([0.1, -0.2], [[0.3, 0.1], [0.1, 0.4]]), GMMDenoiser(**GMM2)):
        np.testing.assert_allclose(d(x, sigma), x + sigma**2 * d.score(x, sigma), rtol=0, atol=1e-10)


def test_gmm_noisy_marginal_moments():
    d = GMMDenoiser(**GMM2)
    rng = np.random.default_rng(9)
    n, sigma = 50_000, 0.5
    y = d.sample(n, rng) + sigma * rng.standard_normal((n, 2))
    w, m = np.array(GMM2["weights"]), np.array(GMM2["means"])
    mean = w @ m
    cov = sum(wi * (np.array(c) + np.outer(mi, mi)) for wi, mi, c in zip(w, m, GMM2["covs"]))
    cov = cov - np.outer(mean, mean) + sigma**2 * np.eye(2)
    se = np.sqrt(np.diag(cov) / n)
    assert np.all(np.abs(y.mean(axis=0) - mean) < 4 * se)
    emp = np.cov(y.T)
    se_cov = np.sqrt((cov**2 + np.outer(np.diag(cov), np.diag(cov))) / n)
    assert np.all(np.abs(emp - cov) < 4 * se_cov)


def test_gmm_weights_validated():
    with pytest.raises(ConfigError):
        GMMDenoiser([0.5, 0.6], GMM2["means"], GMM2["covs"])
    with pytest.raises(ConfigError):
        GMMDenoiser([1.0, 0.0], GMM2["means"], GMM2["covs"])


def test_covariance_must_be_spd():
    with pytest.raises(ConfigError):
        GaussianDenoiser(np.zeros(2), [[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(ConfigError):
        GaussianDenoiser(np.zeros(2), [[1.0, 0.5], [0.0, 1.0]])


def test_gmm_stable_at_tiny_sigma():
    d = GMMDenoiser(**GMM2)
    x = np.array([[5.0, 5.0], [-4.0, 3.0]])
    out = d(x, 1e-4)
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, x, atol=1e-6)


def test_parameter_block_round_trip():
    d = GMMDenoiser(**GMM2)
    back = analytic_denoiser(denoiser_params(d))
    x = np.random.default_rng(10).standard_normal((3, 2))
    np.testing.assert_array_equal(back(x, 0.3), d(x, 0.3))


def test_image_shaped_gaussian():
    d = GaussianDenoiser(np.zeros(8), 0.25, shape=(2, 2, 2))
    x = np.random.default_rng(11).standard_normal((3, 2, 2, 2))
    np.testing.assert_allclose(d(x, 0.5), x * 0.25 / 0.5, rtol=1e-14)


# --- training loss -----------------------------------------------------------


def test_train_loss_rejects_analytic():
    with pytest.raises(TypeError):
        edm_train_loss(GaussianDenoiser(np.zeros(2), np.eye(2)), np.zeros((1, 2)), np.random.default_rng(0))


def test_identity_denoiser_tiny_sigma_limit():
    # lambda ~ 1/sigma^2 cancels the sigma*eps residual, so the weighted loss
    # of an identity denoiser tends to mean ||eps||^2 rather than zero
    d = NeuralDenoiser(zero_net(3))
    rng = np.random.default_rng(12)
    x, eps = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    loss, _ = edm_train_loss(d, x, rng, sigma=1e-7, noise=eps)
    assert loss == pytest.approx(np.mean(np.sum(eps**2, axis=1)), rel=1e-6)
    resid = d(x + 1e-7 * eps, 1e-7) - x
    assert np.max(np.abs(resid)) < 1e-6


def test_train_loss_single_draw_by_hand():
    net = default_denoiser_net((3,), hidden=(4,), seed=13)
    d = NeuralDenoiser(net)
    rng = np.random.default_rng(13)
    x, eps = rng.standard_normal((1, 3)), rng.standard_normal((1, 3))
    loss, _ = edm_train_loss(d, x, rng, sigma=1.0, noise=eps)
    expected = loss_weight(1.0) * np.sum((d(x + eps, 1.0) - x) ** 2)
    assert loss == pytest.approx(expected, rel=1e-13)
    assert loss_weight(1.0) == pytest.approx(1.25 / 0.25)


def test_train_loss_gradient_finite_differences():
    net = default_denoiser_net((2,), hidden=(3,), seed=14)
    rng = np.random.default_rng(14)
    x, eps = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
    sig = np.exp(rng.standard_normal(5))
    _, grad = edm_train_loss(NeuralDenoiser(net), x, rng, sigma=sig, noise=eps)

    def f(p):
        return edm_train_loss(NeuralDenoiser(net.with_params(p)), x, rng, sigma=sig, noise=eps)[0]

    assert rel_err(grad, central_diff(f, net.params)) < 1e-4


def test_training_approaches_bayes_optimal_loss():
    rng = np.random.default_rng(15)
    truth = GaussianDenoiser([0.5, -0.5], 0.1)
    data = truth.sample(2000, rng)
    net = default_denoiser_net((2,), hidden=(32, 32), seed=15)
    d = NeuralDenoiser(net)
    state = nn_core.AdamState.fresh(net.params.size, 1e-3)
    x, eps = data[:512], np.random.default_rng(0).standard_normal((512, 2))
    sig = np.full(512, 0.3)
    optimum = np.mean(loss_weight(0.3) * np.sum((truth(x + 0.3 * eps, 0.3) - x) ** 2, axis=1))
    before = edm_train_loss(d, x, rng, sigma=sig, noise=eps)[0]
    for _ in range(12):
        for bi in nn_core.minibatches(len(data), 128, rng):
            _, g = edm_train_loss(d, data[bi], rng)
            net.params, state = nn_core.adam_step(net.params, g, state)
    after = edm_train_loss(d, x, rng, sigma=sig, noise=eps)[0]
    assert before > 1.3 * optimum
    assert after < 1.05 * optimum
