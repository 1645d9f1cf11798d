"""Data ingestion, normalization, splits and small utilities."""

from dataclasses import dataclass

import numpy as np


def load_csv(path, delimiter=",", target_col=-1):
    """Headerless numeric CSV; one column is the target (default: last)."""
    raw = np.loadtxt(path, delimiter=delimiter, ndmin=2)
    target_col = target_col % raw.shape[1]
    y = raw[:, target_col]
    x = np.delete(raw, target_col, axis=1)
    return x, y


@dataclass(frozen=True)
class SplitSpec:
    """How to partition data: interpolation (90:10 shuffle) or
    extrapolation (sort along a random 1-D projection, 50:50)."""

    mode: str
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("interpolation", "extrapolation"):
            raise ValueError(f"unknown split mode {self.mode!r}")

    @property
    def train_fraction(self):
        return 0.9 if self.mode == "interpolation" else 0.5


def make_split(x, y, spec):
    """Reproducible train/test split; depends only on (seed, mode)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[0]
    gen = np.random.default_rng(spec.seed)
    if spec.mode == "interpolation":
        order = gen.permutation(n)
    else:
        w = gen.standard_normal(x.shape[1])
        z = x @ w
        order = np.argsort(z, kind="stable")
    n_train = int(np.floor(spec.train_fraction * n))
    tr, te = order[:n_train], order[n_train:]
    return (x[tr], y[tr]), (x[te], y[te])


@dataclass
class NormStats:
    """Per-column normalization statistics of the training portion."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float

    @classmethod
    def fit(cls, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        x_std = x.std(axis=0)
        x_std[x_std == 0.0] = 1.0
        y_std = float(y.std()) or 1.0
        return cls(x.mean(axis=0), x_std, float(y.mean()), y_std)

    def normalize(self, x, y=None):
        xn = (np.asarray(x, dtype=np.float64) - self.x_mean) / self.x_std
        if y is None:
            return xn
        return xn, (np.asarray(y, dtype=np.float64) - self.y_mean) / self.y_std

    def denorm_y(self, yn):
        return self.y_mean + self.y_std * np.asarray(yn, dtype=np.float64)

    def to_dict(self):
        return {
            "x_mean": self.x_mean.tolist(),
            "x_std": self.x_std.tolist(),
            "y_mean": self.y_mean,
            "y_std": self.y_std,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.asarray(d["x_mean"], dtype=np.float64),
            np.asarray(d["x_std"], dtype=np.float64),
            float(d["y_mean"]),
            float(d["y_std"]),
        )


def kmeans(x, k, iters=20, rng=None):
    """Lloyd's algorithm with seeded random-point init.

    Empty clusters keep their previous center.  If k exceeds the number of
    points, the points are recycled with a little jitter so the result stays
    usable as inducing inputs.
    """
    x = np.asarray(x, dtype=np.float64)
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    n = x.shape[0]
    if k >= n:
        reps = -(-k // n)
        base = np.tile(x, (reps, 1))[:k]
        scale = 1e-3 * (x.std(axis=0) + 1e-12)
        jitter = gen.standard_normal(base.shape) * scale
        jitter[:n] = 0.0
        return base + jitter
    centers = x[gen.choice(n, size=k, replace=False)].copy()
    for _ in range(iters):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        assign = d2.argmin(axis=1)
        for j in range(k):
            pts = x[assign == j]
            if len(pts):
                centers[j] = pts.mean(axis=0)
    return centers


def toy_sine(n=100, noise=0.1, seed=0, lo=-3.0, hi=3.0):
    """1-D noisy sinusoid used by the desk-scale experiments."""
    gen = np.random.default_rng(seed)
    x = np.sort(gen.uniform(lo, hi, size=n))[:, None]
    y = np.sin(2.0 * x[:, 0]) + 0.5 * x[:, 0] + noise * gen.standard_normal(n)
    return x, y
