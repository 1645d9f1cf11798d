"""Test-set metrics and paired method comparison."""

import math

import numpy as np
import torch

from .linalg import as_tensor
from .model import predict


def test_metrics(model, x_test, y_test, stats, num_paths=100, seed=0):
    """Predictive metrics in the original (de-normalized) units.

    The predictive density per point is the uniform mixture over num_paths
    sampled paths of N(y | mu_r, var_r + sigma^2), de-normalized by change of
    variables (log density shifts by -log std_y).  Returns a dict with tll,
    rmse and per-point mixture mean / variance / log density.
    """
    x_norm = stats.normalize(x_test)
    mu_n, var_n = predict(model, x_norm, num_paths, seed)      # normalized units
    sigma2 = float(model.noise_variance)
    y_std, y_mean = stats.y_std, stats.y_mean
    mu = y_mean + y_std * mu_n.numpy()                          # (n, R)
    var = (y_std**2) * (var_n.numpy() + sigma2)
    y = np.asarray(y_test, dtype=np.float64)[:, None]
    logp_paths = -0.5 * np.log(2.0 * np.pi * var) - 0.5 * (y - mu) ** 2 / var
    log_density = _logsumexp(logp_paths, axis=1) - math.log(mu.shape[1])
    mix_mean = mu.mean(axis=1)
    mix_var = (var + mu**2).mean(axis=1) - mix_mean**2
    rmse = float(np.sqrt(np.mean((mix_mean - y[:, 0]) ** 2)))
    return {
        "tll": float(log_density.mean()),
        "rmse": rmse,
        "per_point": {
            "mu": mix_mean.tolist(),
            "var": mix_var.tolist(),
            "log_density": log_density.tolist(),
        },
    }


def _logsumexp(a, axis):
    m = a.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def win_frequency(ll_a, ll_b):
    """Fraction of test points where method A beats B; ties count 0.5."""
    a = np.asarray(ll_a, dtype=np.float64)
    b = np.asarray(ll_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("per-point log-likelihood arrays differ in length")
    wins = (a > b).astype(np.float64) + 0.5 * (a == b)
    return float(wins.mean())


def compare_runs(metrics_a, metrics_b):
    """Table-2-style paired comparison over repetitions.

    metrics_a/b are lists of metrics dicts (one per repetition); returns the
    per-repetition win frequencies of A over B plus their mean and standard
    error.
    """
    if len(metrics_a) != len(metrics_b):
        raise ValueError("need one metrics file per repetition on both sides")
    freqs = [
        win_frequency(ma["per_point"]["log_density"], mb["per_point"]["log_density"])
        for ma, mb in zip(metrics_a, metrics_b)
    ]
    freqs = np.asarray(freqs)
    se = float(freqs.std(ddof=1) / np.sqrt(len(freqs))) if len(freqs) > 1 else 0.0
    return {"per_repetition": freqs.tolist(), "mean": float(freqs.mean()), "se": se}
