"""Brute-force reference implementations used to validate the fast paths.

These deliberately avoid the main path's tricks: no diag-trick, no block
Cholesky updates, no sparse factor traversal.  They share the keyed noise
convention, so comparisons against the main path are pathwise where a test
says so and distributional otherwise.  They are slow by design.
"""

import math

import numpy as np
import torch

from . import kernel, rng, variational
from .errors import DegenerateWeights, NotPositiveDefinite, TooLarge
from .linalg import DTYPE, GaussianMoments, as_tensor
from .model import SAMPLE_JITTER
from .training import expected_log_lik

MC_DIM_LIMIT = 32
DENSE_DIM_LIMIT = 64


def _jittered_kmm(model, l):
    k = kernel.kmat(model.kernels[l], model.inducing[l])
    return k + model.jitter * torch.eye(k.shape[0], dtype=DTYPE)


def _dense_conditional(model, l, h):
    """K~ row and conditional prior variance for a single input, densely."""
    kmm = _jittered_kmm(model, l)
    kmx = kernel.kmat(model.kernels[l], model.inducing[l], h)     # (M, 1)
    kt = torch.linalg.solve(kmm, kmx).T                            # (1, M)
    kxx = model.kernels[l].variance
    kd = kxx - (kt @ kmx)[0, 0]
    return kt[0], torch.clamp(kd, min=0.0)


def exact_gp_lml(x, y, params, sigma2):
    """Exact single-layer GP log marginal likelihood (dense, N <= 200)."""
    x = as_tensor(x)
    y = as_tensor(y)
    n = x.shape[0]
    if n > 200:
        raise TooLarge("exact_gp_lml limited to N <= 200")
    k = kernel.kmat(params, x) + sigma2 * torch.eye(n, dtype=DTYPE)
    try:
        l = torch.linalg.cholesky(k)
    except torch.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    alpha = torch.cholesky_solve(y[:, None], l)
    return float(
        -0.5 * (y[:, None] * alpha).sum()
        - torch.log(torch.diagonal(l)).sum()
        - 0.5 * n * math.log(2.0 * math.pi)
    )


def mc_layer_conditional(model, x_n, f_prev, n_samples=10**5, seed=0):
    """Monte-Carlo estimate of q(f_n^l | f_n^{1:l-1}) via sampling f_M ~ q.

    f_prev lists the observed outputs of the completed layers (possibly
    empty).  Inducing outputs are drawn from q, pushed through the prior
    conditionals, and importance-weighted by the density of the observed
    f_prev under the sampled path (self-normalized, log-space weights).

    Returns (GaussianMoments, se_mean, se_cov, ess); raises DegenerateWeights
    if the effective sample size drops below 100.
    """
    arch = model.arch
    m = arch.num_inducing
    if arch.total_gps * m > MC_DIM_LIMIT:
        raise TooLarge("mc_layer_conditional limited to T*M <= 32")
    target_layer = len(f_prev)
    with torch.no_grad():
        # Layer inputs are deterministic given the fixed f_prev values.
        h = as_tensor(x_n).reshape(1, -1)
        inputs = [h]
        for j, f in enumerate(f_prev):
            h = h @ model.mean_maps[j] + as_tensor(f).reshape(1, -1)
            inputs.append(h)
        conds = [_dense_conditional(model, j, inputs[j]) for j in range(target_layer + 1)]

        gen = torch.Generator().manual_seed(seed)
        ld = model.factor.dense_factor()
        xi = torch.randn(n_samples, ld.shape[0], generator=gen, dtype=DTYPE)
        f_m = model.factor.mu + xi @ ld.T                          # (S, T M)

        logw = torch.zeros(n_samples, dtype=DTYPE)
        for j in range(target_layer):
            kt, kd = conds[j]
            o = arch.layer_offset(j) * m
            fm_j = f_m[:, o : o + arch.widths[j] * m].reshape(n_samples, arch.widths[j], m)
            mean_j = fm_j @ kt                                     # (S, T_j)
            var_j = kd + SAMPLE_JITTER
            obs = as_tensor(f_prev[j])
            logw = logw - 0.5 * (
                ((obs - mean_j) ** 2 / var_j).sum(1)
                + arch.widths[j] * torch.log(2.0 * math.pi * var_j)
            )
        logw = logw - logw.max()
        w = torch.exp(logw)
        w = w / w.sum()
        ess = float(1.0 / (w * w).sum())
        if ess < 100.0:
            raise DegenerateWeights(f"effective sample size {ess:.1f} < 100")

        kt, kd = conds[target_layer]
        o = arch.layer_offset(target_layer) * m
        t_l = arch.widths[target_layer]
        fm_l = f_m[:, o : o + t_l * m].reshape(n_samples, t_l, m)
        means = fm_l @ kt                                          # (S, T_l)
        mu_hat = (w[:, None] * means).sum(0)
        centered = means - mu_hat
        spread = torch.einsum("s,st,sk->tk", w, centered, centered)
        sig_hat = kd * torch.eye(t_l, dtype=DTYPE) + spread
        se_mean = torch.sqrt((w[:, None] ** 2 * centered**2).sum(0))
        g = centered[:, :, None] * centered[:, None, :]            # (S, T_l, T_l)
        se_cov = torch.sqrt((w[:, None, None] ** 2 * (g - spread) ** 2).sum(0))
    return GaussianMoments(mu_hat, sig_hat), se_mean, se_cov, ess


def _dense_layer_blocks(model, l, inputs, s_m):
    """mu_tilde and the Stilde row for layer l, with dense formulas."""
    arch = model.arch
    m = arch.num_inducing
    kt, kd = _dense_conditional(model, l, inputs[l])
    kcal = torch.kron(torch.eye(arch.widths[l], dtype=DTYPE), kt.reshape(1, m))
    mu_l = kcal @ model.factor.mu_layer(l).reshape(-1)
    blocks = {}
    for lp in range(l + 1):
        ro, rw = arch.layer_offset(l) * m, arch.widths[l] * m
        co, cw = arch.layer_offset(lp) * m, arch.widths[lp] * m
        s_block = s_m[ro : ro + rw, co : co + cw]
        ktp, _ = _dense_conditional(model, lp, inputs[lp])
        kcal_p = torch.kron(torch.eye(arch.widths[lp], dtype=DTYPE), ktp.reshape(1, m))
        if lp == l:
            # delta_ll K_nn - K~ (delta_ll K_MM - S_M) K~^T
            kmm = _jittered_kmm(model, l)
            prior = torch.kron(torch.eye(arch.widths[l], dtype=DTYPE), kmm)
            val = (
                model.kernels[l].variance * torch.eye(arch.widths[l], dtype=DTYPE)
                - kcal @ (prior - s_block) @ kcal_p.T
            )
        else:
            val = kcal @ s_block @ kcal_p.T
        blocks[lp] = val
    return mu_l, blocks, kd


def dense_reference_elbo(model, x, y, num_samples, seed, n_total, ids=None):
    """training.elbo computed with densified factors and dense formulas.

    Per-datapoint python loop, dense S_M, dense matrix inverses; identical
    keyed noise, so the result matches the fast path to float accumulation.
    """
    arch = model.arch
    m = arch.num_inducing
    if arch.total_gps * m > DENSE_DIM_LIMIT:
        raise TooLarge("dense_reference_elbo limited to T*M <= 64")
    x = as_tensor(x)
    y = as_tensor(y)
    n = x.shape[0]
    if ids is None:
        ids = np.arange(n, dtype=np.int64)
    with torch.no_grad():
        _, s_m = model.factor.densify()
        sigma2 = model.noise_variance
        total = torch.zeros((), dtype=DTYPE)
        for i in range(n):
            for r in range(num_samples):
                inputs = [x[i : i + 1]]
                f_vals, mu_all = [], []
                joint = None
                for l in range(arch.layers):
                    mu_l, blocks, _ = _dense_layer_blocks(model, l, inputs, s_m)
                    t_l = arch.widths[l]
                    if l == 0:
                        mu_hat, sig_hat = mu_l, blocks[0]
                    else:
                        prev = joint.shape[0]
                        cross = torch.cat([blocks[lp] for lp in range(l)], dim=1)
                        gain = cross @ torch.linalg.inv(joint)
                        resid = torch.cat(f_vals) - torch.cat(mu_all)
                        mu_hat = mu_l + gain @ resid
                        sig_hat = blocks[l] - gain @ cross.T
                        sig_hat = 0.5 * (sig_hat + sig_hat.T)
                    if l == arch.layers - 1:
                        total = total + expected_log_lik(
                            y[i], mu_hat[0], sig_hat[0, 0], sigma2
                        )
                        break
                    eps = rng.layer_noise(seed, rng.STREAM_LAYER, [ids[i]], [r], l, t_l)[0]
                    c = torch.linalg.cholesky(
                        sig_hat + SAMPLE_JITTER * torch.eye(t_l, dtype=DTYPE)
                    )
                    f = mu_hat + c @ eps
                    f_vals.append(f)
                    mu_all.append(mu_l)
                    # grow the accumulated Stilde matrix
                    if joint is None:
                        joint = blocks[0] + SAMPLE_JITTER * torch.eye(t_l, dtype=DTYPE)
                    else:
                        cross = torch.cat([blocks[lp] for lp in range(l)], dim=1)
                        joint = torch.cat(
                            [
                                torch.cat([joint, cross.T], dim=1),
                                torch.cat(
                                    [cross, blocks[l] + SAMPLE_JITTER * torch.eye(t_l, dtype=DTYPE)],
                                    dim=1,
                                ),
                            ],
                            dim=0,
                        )
                    inputs.append(inputs[l] @ model.mean_maps[l] + f.reshape(1, -1))
        scale = n_total / (n * num_samples)
        return float(scale * total - _dense_kl(model, s_m))


def _dense_kl(model, s_m):
    """Two-Gaussian KL with dense matrices (independent of the sparse path)."""
    arch = model.arch
    prior_blocks = []
    for l in range(arch.layers):
        kmm = _jittered_kmm(model, l)
        for _ in range(arch.widths[l]):
            prior_blocks.append(kmm)
    p = torch.block_diag(*prior_blocks)
    mu = model.factor.mu
    d = mu.shape[0]
    lp = torch.linalg.cholesky(p)
    sol = torch.cholesky_solve(s_m, lp)
    alpha = torch.cholesky_solve(mu[:, None], lp)[:, 0]
    logdet_p = 2.0 * torch.log(torch.diagonal(lp)).sum()
    _, logdet_s = torch.linalg.slogdet(s_m)
    return 0.5 * (torch.trace(sol) + mu @ alpha - d + logdet_p - logdet_s)


def mf_reference_elbo(model, x, y, num_samples, seed, n_total, ids=None):
    """Independent mean-field-only ELBO (per-GP marginals, no couplings)."""
    if model.structure != variational.MEAN_FIELD:
        raise ValueError("mf_reference_elbo needs a mean-field model")
    arch = model.arch
    x = as_tensor(x)
    y = as_tensor(y)
    n = x.shape[0]
    if ids is None:
        ids = np.arange(n, dtype=np.int64)
    with torch.no_grad():
        diag = model.factor.diag_blocks()
        s_tt = diag @ diag.transpose(1, 2)
        sigma2 = model.noise_variance
        total = torch.zeros((), dtype=DTYPE)
        for i in range(n):
            for r in range(num_samples):
                h = x[i : i + 1]
                for l in range(arch.layers):
                    kt, kd = _dense_conditional(model, l, h)
                    t_l = arch.widths[l]
                    o = arch.layer_offset(l)
                    mu_t = model.factor.mu_layer(l) @ kt
                    var_t = kd + torch.einsum("m,tmk,k->t", kt, s_tt[o : o + t_l], kt)
                    if l == arch.layers - 1:
                        total = total + expected_log_lik(y[i], mu_t[0], var_t[0], sigma2)
                        break
                    eps = rng.layer_noise(seed, rng.STREAM_LAYER, [ids[i]], [r], l, t_l)[0]
                    f = mu_t + torch.sqrt(var_t + SAMPLE_JITTER) * eps
                    h = h @ model.mean_maps[l] + f.reshape(1, -1)
        scale = n_total / (n * num_samples)
        kl = torch.zeros((), dtype=DTYPE)
        for l in range(arch.layers):
            kmm = _jittered_kmm(model, l)
            lk = torch.linalg.cholesky(kmm)
            logdet_k = 2.0 * torch.log(torch.diagonal(lk)).sum()
            m = arch.num_inducing
            for t in range(arch.widths[l]):
                s = s_tt[arch.slot_index(l, t)]
                mu_b = model.factor.mu_block(l, t)
                _, logdet_s = torch.linalg.slogdet(s)
                kl = kl + 0.5 * (
                    torch.trace(torch.cholesky_solve(s, lk))
                    + mu_b @ torch.cholesky_solve(mu_b[:, None], lk)[:, 0]
                    - m
                    + logdet_k
                    - logdet_s
                )
        return float(scale * total - kl)
