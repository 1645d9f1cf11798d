"""Wall-time benchmark of one gradient step per configuration."""

import time

import numpy as np

from . import training
from .data import NormStats
from .model import build_model
from .variational import Architecture


def _gradient_step(model, opt, x, y, num_samples, seed, lr=1e-3):
    def objective(m):
        return -training.elbo(m, x, y, num_samples, seed, x.shape[0])

    _, grads = training._grad_list(model, objective)
    opt.step(grads, lr)


def bench_runtime(structures, m_list, layers=3, tau=5, reps=20, n_data=512,
                  num_samples=5, seed=0, input_dim=8, warmup=2):
    """Median wall time of a full ELBO+gradient evaluation per configuration.

    Returns rows of {structure, M, L, tau, reps, median_s, cv}; reps >= 20
    recommended for stable medians.  Synthetic data keeps the measurement
    self-contained.
    """
    if reps < 1:
        raise ValueError("reps must be positive")
    gen = np.random.default_rng(seed)
    x = gen.standard_normal((n_data, input_dim))
    y = np.sin(x.sum(axis=1)) + 0.1 * gen.standard_normal(n_data)
    stats = NormStats.fit(x, y)
    xn, yn = stats.normalize(x, y)
    rows = []
    for structure in structures:
        for m in m_list:
            arch = Architecture(layers, tuple([tau] * (layers - 1) + [1]), m, input_dim)
            model = build_model(xn, arch, structure, seed=seed)
            import torch

            xt = torch.as_tensor(xn)
            yt = torch.as_tensor(yn)
            opt = training.Adam(training.trainable_entries(model))
            times = []
            for rep in range(warmup + reps):
                t0 = time.perf_counter()
                _gradient_step(model, opt, xt, yt, num_samples, seed + rep)
                dt = time.perf_counter() - t0
                if rep >= warmup:
                    times.append(dt)
            times = np.asarray(times)
            rows.append(
                {
                    "structure": structure,
                    "M": m,
                    "L": layers,
                    "tau": tau,
                    "reps": reps,
                    "median_s": float(np.median(times)),
                    "cv": float(times.std() / times.mean()),
                }
            )
    return rows


def loglog_slope(rows, structure):
    """Least-squares slope of log median time vs log M for one structure."""
    pts = [(r["M"], r["median_s"]) for r in rows if r["structure"] == structure]
    if len(pts) < 2:
        raise ValueError("need at least two M values for a slope")
    ms = np.log([p[0] for p in pts])
    ts = np.log([p[1] for p in pts])
    return float(np.polyfit(ms, ts, 1)[0])


def write_csv(rows, path):
    import csv

    fields = ["structure", "M", "L", "tau", "reps", "median_s", "cv"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
