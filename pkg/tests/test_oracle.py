import math

import numpy as np
import pytest
import torch
from helpers import tiny_model

from structdgp.errors import DegenerateWeights, TooLarge
from structdgp.kernel import KernelParams, kmat
from structdgp.linalg import DTYPE
from structdgp.model import eval_cache, layer_posterior, path_rows, sample_layer, start_state
from structdgp.oracle import (
    dense_reference_elbo,
    exact_gp_lml,
    mc_layer_conditional,
    mf_reference_elbo,
)
from structdgp.training import elbo, per_path_loglik
from structdgp import rng


def analytic_conditional(model, x_n, num_prev_layers, seed=0):
    """Analytic (mu_hat, sig_hat) at layer `num_prev_layers`, plus the sampled
    conditioning values that produced it."""
    cache = eval_cache(model)
    x_rows, ids, reps = path_rows(torch.as_tensor(x_n).reshape(1, -1), 1)
    state = start_state(x_rows)
    for l in range(num_prev_layers):
        eps = rng.layer_noise(seed, rng.STREAM_LAYER, ids, reps, l, model.arch.widths[l])
        _, state = sample_layer(model, l, state, eps, cache)
    post, state = sample_layer(model, num_prev_layers, state, None, cache)
    f_prev = [f[0].numpy() for f in state.samples[:num_prev_layers]]
    return post.mu_hat[0], post.sig_hat[0], f_prev


class TestMcLayerConditional:
    def test_first_layer_plain_mc(self):
        model, xn, _ = tiny_model("fc", layers=2, m=3, seed=0)
        mu, sig, _ = analytic_conditional(model, xn[0], 0)
        est, se_mean, se_cov, ess = mc_layer_conditional(model, xn[0], [], 10**4, seed=1)
        assert ess == pytest.approx(10**4)  # no conditioning -> uniform weights
        assert bool(((est.mean - mu).abs() < 3 * se_mean + 1e-12).all())
        assert bool(((est.cov - sig).abs() < 3 * se_cov + 1e-12).all())

    def test_mf_matches_marginal_formula(self):
        model, xn, _ = tiny_model("mf", layers=2, m=3, seed=3)
        mu, sig, f_prev = analytic_conditional(model, xn[1], 1, seed=5)
        est, se_mean, se_cov, _ = mc_layer_conditional(model, xn[1], f_prev, 10**5, seed=3)
        assert bool(((est.mean - mu).abs() < 3 * se_mean + 1e-12).all())
        assert bool(((est.cov - sig).abs() < 3 * se_cov + 1e-12).all())

    def test_fc_second_layer_headline(self):
        model, xn, _ = tiny_model("fc", layers=2, m=3, seed=3)
        mu, sig, f_prev = analytic_conditional(model, xn[2], 1, seed=7)
        est, se_mean, se_cov, _ = mc_layer_conditional(model, xn[2], f_prev, 10**5, seed=3)
        assert bool(((est.mean - mu).abs() < 3 * se_mean + 1e-12).all())
        assert bool(((est.cov - sig).abs() < 3 * se_cov + 1e-12).all())

    def test_size_guard(self):
        model, xn, _ = tiny_model("fc", layers=3, tau=3, m=8, seed=4)
        with pytest.raises(TooLarge):
            mc_layer_conditional(model, xn[0], [], 10**4, seed=0)

    def test_degenerate_weights(self):
        model, xn, _ = tiny_model("fc", layers=2, m=3, seed=5)
        # absurd conditioning values produce collapsed importance weights
        f_prev = [np.full(model.arch.widths[0], 500.0)]
        with pytest.raises(DegenerateWeights):
            mc_layer_conditional(model, xn[0], f_prev, 10**4, seed=0)


class TestExactGpLml:
    def test_single_point_trivial(self):
        kp = KernelParams(1, variance=1.0)
        val = exact_gp_lml(np.zeros((1, 1)), np.zeros(1), kp, 0.0)
        np.testing.assert_allclose(val, -0.5 * math.log(2 * math.pi), rtol=1e-12)

    def test_matches_gauss_hermite_quadrature(self):
        kp = KernelParams(1, lengthscales=0.9, variance=1.4)
        x = np.array([[0.0], [0.7]])
        y = np.array([0.3, -0.4])
        s2 = 0.4
        k = kmat(kp, x).numpy()
        l = np.linalg.cholesky(k)
        nodes, weights = np.polynomial.hermite.hermgauss(80)
        # E_{u~N(0,I_2)}[N(y | L u, s2 I)] via tensor-product Gauss-Hermite
        total = 0.0
        for i, wi in enumerate(weights):
            for j, wj in enumerate(weights):
                u = math.sqrt(2.0) * np.array([nodes[i], nodes[j]])
                f = l @ u
                dens = np.exp(-0.5 * np.sum((y - f) ** 2) / s2) / (2 * math.pi * s2)
                total += wi * wj * dens
        quad = math.log(total / math.pi)
        direct = exact_gp_lml(x, y, kp, s2)
        assert abs(direct - quad) < 1e-6

    def test_size_guard(self):
        kp = KernelParams(1)
        with pytest.raises(TooLarge):
            exact_gp_lml(np.zeros((201, 1)), np.zeros(201), kp, 0.1)


class TestDenseReference:
    def test_size_guard(self):
        model, xn, yn = tiny_model("fc", layers=3, tau=3, m=12, seed=6)
        with pytest.raises(TooLarge):
            dense_reference_elbo(model, xn, yn, 1, seed=0, n_total=len(yn))

    def test_zero_variance_factor_reduces_to_mean_propagation(self):
        model, xn, yn = tiny_model("fc", seed=7)
        with torch.no_grad():
            model.factor.fc_log.fill_(-45.0)
            model.factor.fc_low.zero_()
        fast = float(elbo(model, xn, yn, 2, seed=1, n_total=len(yn)))
        dense = dense_reference_elbo(model, xn, yn, 2, seed=1, n_total=len(yn))
        assert abs(fast - dense) < 1e-8
        # no coupling left: the conditional means equal the prior-conditional means
        cache = eval_cache(model)
        x_rows, ids, reps = path_rows(torch.as_tensor(xn), 1)
        state = start_state(x_rows)
        for l in range(model.arch.layers):
            eps = rng.layer_noise(1, rng.STREAM_LAYER, ids, reps, l, model.arch.widths[l])
            post, state = sample_layer(model, l, state, eps, cache)
            assert float((post.mu_hat - state.mu_t[l]).abs().max()) < 1e-12

    def test_mf_three_way_agreement(self):
        model, xn, yn = tiny_model("mf", seed=8)
        fast = float(elbo(model, xn, yn, 2, seed=5, n_total=len(yn)))
        dense = dense_reference_elbo(model, xn, yn, 2, seed=5, n_total=len(yn))
        ref = mf_reference_elbo(model, xn, yn, 2, seed=5, n_total=len(yn))
        assert abs(fast - dense) < 1e-8
        assert abs(fast - ref) < 1e-10
