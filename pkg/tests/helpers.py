"""Shared test utilities: random-but-sane models, factors and datasets."""

import numpy as np
import torch

from structdgp import Architecture, NormStats, toy_sine
from structdgp.model import build_model
from structdgp.variational import STRUCTURES


def randomize_factor(factor, gen, mu_scale=0.5, low_scale=0.3):
    """Fill a factor with random, well-conditioned values."""
    m = factor.arch.num_inducing
    with torch.no_grad():
        for name, t in factor.trainable_tensors():
            if name == "mu":
                vals = gen.standard_normal(tuple(t.shape)) * mu_scale
            elif name.endswith("_log"):
                vals = gen.uniform(-0.3, 0.3, tuple(t.shape))
            else:
                vals = gen.standard_normal(tuple(t.shape)) * low_scale / np.sqrt(m)
            t.copy_(torch.from_numpy(np.asarray(vals)).double())
    return factor


def randomize_model(model, gen):
    """Perturb kernel hyperparameters and noise a little, factor a lot."""
    with torch.no_grad():
        for kp in model.kernels:
            kp.log_lengthscales.add_(
                torch.from_numpy(gen.uniform(-0.3, 0.3, kp.input_dim)).double()
            )
            kp.log_variance.add_(float(gen.uniform(-0.3, 0.3)))
        # moderate noise keeps ELBO magnitudes small enough for the tightest
        # absolute cross-implementation tolerances
        model.log_noise.fill_(float(gen.uniform(np.log(0.05), np.log(0.5))))
    randomize_factor(model.factor, gen)
    return model


def tiny_model(structure, layers=3, tau=2, m=4, d=1, n=12, seed=0, randomize=True,
               jitter=1e-6):
    """Small random model plus its (normalized) dataset."""
    gen = np.random.default_rng(seed)
    if d == 1:
        x, y = toy_sine(n, seed=seed)
    else:
        x = gen.standard_normal((n, d))
        y = np.sin(x.sum(axis=1)) + 0.1 * gen.standard_normal(n)
    stats = NormStats.fit(x, y)
    xn, yn = stats.normalize(x, y)
    widths = tuple([tau] * (layers - 1) + [1])
    arch = Architecture(layers, widths, m, d)
    model = build_model(xn, arch, structure, seed=seed, jitter=jitter)
    if randomize:
        randomize_model(model, gen)
    return model, xn, yn


def spd_matrix(gen, n, cond_boost=1.0):
    a = gen.standard_normal((n, n))
    return a @ a.T + cond_boost * n * np.eye(n)
