"""Counter-based keyed Gaussian noise.

Every stochastic quantity in the ELBO / prediction paths is drawn from a
stateless hash generator keyed by (seed, stream, index coordinates).  Keying
the layer noise by (datapoint id, repetition, layer, unit) makes the batched
evaluation reproduce the row-wise per-datapoint recursion exactly, makes
evaluations deterministic for a fixed seed regardless of scheduling, and
gives the common random numbers that finite-difference gradients need.
"""

import numpy as np
import torch

# Independent key spaces for the different noise uses.
STREAM_LAYER = 1      # layer reparameterisation noise, keys (i, r, layer, unit)
STREAM_INDUCING = 2   # inducing-output draws for the sampled-f_M estimator, keys (i, r, j)
STREAM_PREDICT = 3    # prediction-path layer noise, keys (i, r, layer, unit)

_U64 = np.uint64
_GOLDEN = _U64(0x9E3779B97F4A7C15)
_MIX1 = _U64(0xBF58476D1CE4E5B9)
_MIX2 = _U64(0x94D049BB133111EB)


def _splitmix(x):
    x = (x + _GOLDEN) & _U64(0xFFFFFFFFFFFFFFFF)
    x = (x ^ (x >> _U64(30))) * _MIX1
    x = (x ^ (x >> _U64(27))) * _MIX2
    return x ^ (x >> _U64(31))


def _hash_coords(seed, stream, coords):
    state = _splitmix(_U64(np.int64(seed).astype(np.uint64)) ^ _U64(stream))
    h = np.broadcast_arrays(*[np.asarray(c, dtype=np.int64) for c in coords])
    out = np.full(h[0].shape, state, dtype=np.uint64)
    for c in h:
        out = _splitmix(out ^ c.astype(np.uint64))
    return out


def keyed_normal(seed, stream, coords, dtype=torch.float64):
    """Standard-normal draws keyed by integer coordinates.

    `coords` is a tuple of broadcastable integer arrays; the output shape is
    their broadcast shape.  The same (seed, stream, coords) always yields the
    same values.
    """
    with np.errstate(over="ignore"):
        h1 = _hash_coords(seed, stream, coords)
        h2 = _splitmix(h1 ^ _GOLDEN)
    # 53-bit uniforms; u1 in (0, 1] so the log is finite.
    u1 = ((h1 >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
    u2 = (h2 >> np.uint64(11)).astype(np.float64) * 2.0**-53
    z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
    return torch.from_numpy(np.ascontiguousarray(z)).to(dtype)


def layer_noise(seed, stream, ids, reps, layer, width):
    """Noise tensor of shape (len(ids), width) for one layer.

    `ids` and `reps` are per-row datapoint ids and repetition indices of the
    flattened (datapoint, repetition) batch.
    """
    ids = np.asarray(ids, dtype=np.int64)[:, None]
    reps = np.asarray(reps, dtype=np.int64)[:, None]
    units = np.arange(width, dtype=np.int64)[None, :]
    return keyed_normal(seed, stream, (ids, reps, np.int64(layer), units))


def inducing_noise(seed, ids, reps, dim):
    """Noise tensor of shape (len(ids), dim) for sampling inducing outputs."""
    ids = np.asarray(ids, dtype=np.int64)[:, None]
    reps = np.asarray(reps, dtype=np.int64)[:, None]
    units = np.arange(dim, dtype=np.int64)[None, :]
    return keyed_normal(seed, STREAM_INDUCING, (ids, reps, units))


def derive_seed(seed, *salts):
    """Derive a child seed from a base seed and integer salts (e.g. iteration)."""
    with np.errstate(over="ignore"):
        h = _hash_coords(seed, 0xD5, tuple(np.int64(s) for s in salts))
    return int(h & np.uint64(0x7FFFFFFFFFFFFFFF))
