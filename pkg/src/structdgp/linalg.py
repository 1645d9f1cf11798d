"""Dense and block-structured matrix primitives.

All functions operate on float64 torch tensors and accept arbitrary leading
batch dimensions where that makes sense (the per-datapoint recursion runs
them batched over datapoints).
"""

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DimensionMismatch, NotPositiveDefinite

DTYPE = torch.float64

SYM_RTOL = 1e-8  # relative Frobenius tolerance for symmetry checks


def as_tensor(x):
    """Convert array-like input to a float64 torch tensor."""
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x), dtype=DTYPE)


def _check_symmetric(a):
    with torch.no_grad():
        num = torch.linalg.norm(a - a.transpose(-1, -2))
        den = torch.linalg.norm(a) + 1e-300
        if float(num / den) > SYM_RTOL:
            raise DimensionMismatch("matrix is not symmetric within tolerance")


def cholesky(a, jitter=0.0):
    """Lower Cholesky factor of a symmetric matrix, L L^T = a + jitter*I.

    Raises NotPositiveDefinite if a pivot is non-positive even after the
    given jitter.
    """
    a = as_tensor(a)
    if a.shape[-1] != a.shape[-2]:
        raise DimensionMismatch("cholesky needs a square matrix")
    _check_symmetric(a)
    aj = a
    if jitter:
        aj = a + jitter * torch.eye(a.shape[-1], dtype=DTYPE)
    try:
        return torch.linalg.cholesky(aj)
    except torch.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc


def cholesky_escalated(a, jitter=1e-6, max_jitter=1e-2):
    """Cholesky with jitter escalation (x10 per retry up to max_jitter).

    Standard treatment for kernel matrices whose conditioning depends on
    trainable hyperparameters.  Returns (L, jitter_used).
    """
    j = jitter
    while True:
        try:
            return cholesky(a, j), j
        except NotPositiveDefinite:
            if j == 0.0:
                j = 1e-8
            elif j * 10 <= max_jitter:
                j = j * 10
            else:
                raise


def tri_solve(l, b, transpose=False):
    """Solve L x = b (or L^T x = b) for lower-triangular L."""
    l = as_tensor(l)
    b = as_tensor(b)
    vector = b.ndim == l.ndim - 1
    if vector:
        b = b.unsqueeze(-1)
    if l.shape[-1] != b.shape[-2]:
        raise DimensionMismatch(
            f"triangular solve: L is {tuple(l.shape)}, B is {tuple(b.shape)}"
        )
    mat = l.transpose(-1, -2) if transpose else l
    x = torch.linalg.solve_triangular(mat, b, upper=transpose, left=True)
    return x.squeeze(-1) if vector else x


def block_chol_update(l_prev, s_cross, s_new, jitter=0.0):
    """Extend a Cholesky factor by one block row/column.

    Given L_prev with L_prev L_prev^T = S_11, the cross block S_12 = s_cross
    and the new diagonal block S_22 = s_new, returns the factor of
    [[S_11, S_12], [S_12^T, S_22 + jitter*I]]:
    A = L_prev, B^T solves L_prev B^T = S_12, C = chol(S_22 - B B^T).
    """
    l_prev = as_tensor(l_prev)
    s_cross = as_tensor(s_cross)
    s_new = as_tensor(s_new)
    if s_cross.shape[-2] != l_prev.shape[-1]:
        raise DimensionMismatch("s_cross must have L_prev.dim rows")
    bt = tri_solve(l_prev, s_cross)
    schur = s_new - bt.transpose(-1, -2) @ bt
    schur = 0.5 * (schur + schur.transpose(-1, -2))
    c = cholesky(schur, jitter)
    p, q = l_prev.shape[-1], s_new.shape[-1]
    batch = torch.broadcast_shapes(l_prev.shape[:-2], c.shape[:-2])
    out = torch.zeros(batch + (p + q, p + q), dtype=DTYPE)
    out[..., :p, :p] = l_prev
    out[..., p:, :p] = bt.transpose(-1, -2)
    out[..., p:, p:] = c
    return out


def diag_of_product(c, b, a):
    """diag(C^T B A) via column sums of C o (B A), never forming the product.

    C and A are q x p, B is q x q; returns a length-p vector.
    """
    c, b, a = as_tensor(c), as_tensor(b), as_tensor(a)
    if b.shape[-1] != a.shape[-2] or c.shape[-2] != b.shape[-2]:
        raise DimensionMismatch("diag_of_product: inconsistent shapes")
    if c.shape[-1] != a.shape[-1]:
        raise DimensionMismatch("diag_of_product: C^T B A is not square")
    return (c * (b @ a)).sum(dim=-2)


@dataclass
class GaussianMoments:
    """A mean vector with its covariance matrix."""

    mean: torch.Tensor
    cov: torch.Tensor

    def __post_init__(self):
        self.mean = as_tensor(self.mean)
        self.cov = as_tensor(self.cov)
        if self.cov.shape[-1] != self.mean.shape[-1]:
            raise DimensionMismatch("mean and covariance sizes differ")


@dataclass
class ConditionalMap:
    """Affine Gaussian conditional y|x ~ N(offset + gain x, cov)."""

    offset: torch.Tensor
    gain: torch.Tensor
    cov: torch.Tensor


def gaussian_condition(joint, split_index, jitter=0.0):
    """Split N([x, y]) into the marginal of x and the conditional of y|x.

    Returns (GaussianMoments for x, ConditionalMap) with conditional mean
    b + C^T A^{-1} (x - a) and covariance B - C^T A^{-1} C.
    """
    k = int(split_index)
    d = joint.mean.shape[-1]
    if not 0 < k < d:
        raise DimensionMismatch("split index must be interior")
    a = joint.cov[:k, :k]
    b = joint.cov[k:, k:]
    c = joint.cov[:k, k:]
    la = cholesky(a, jitter)
    w = tri_solve(la, c)                      # L^{-1} C
    gain = tri_solve(la, w, transpose=True).transpose(-1, -2)  # C^T A^{-1}
    cond_cov = b - w.transpose(-1, -2) @ w
    cond_cov = 0.5 * (cond_cov + cond_cov.transpose(-1, -2))
    mean_x = joint.mean[:k]
    offset = joint.mean[k:] - gain @ mean_x
    return GaussianMoments(mean_x, a), ConditionalMap(offset, gain, cond_cov)


def gaussian_propagate(offset, gain, noise_cov, inp):
    """Push GaussianMoments through an affine conditional.

    Returns N(offset + gain m, noise_cov + gain S gain^T) for inp = N(m, S).
    """
    offset, gain, noise_cov = as_tensor(offset), as_tensor(gain), as_tensor(noise_cov)
    if gain.shape[-1] != inp.mean.shape[-1]:
        raise DimensionMismatch("gain columns must match input dimension")
    if noise_cov.shape[-1] != gain.shape[-2]:
        raise DimensionMismatch("noise_cov must match gain rows")
    mean = offset + gain @ inp.mean
    cov = noise_cov + gain @ inp.cov @ gain.transpose(-1, -2)
    return GaussianMoments(mean, 0.5 * (cov + cov.transpose(-1, -2)))


def pca_map(x, d_out):
    """Projection onto the top principal directions of the rows of x.

    Returns a (D_in, d_out) matrix.  Columns beyond D_in, and directions
    with (numerically) zero variance, are zero so degenerate data never
    produces arbitrary axes.  Each column's largest-magnitude entry is made
    positive for determinism.
    """
    x = as_tensor(x)
    n, d_in = x.shape
    xc = x - x.mean(dim=0, keepdim=True)
    cov = (xc.T @ xc) / max(n - 1, 1)
    evals, evecs = torch.linalg.eigh(cov)
    order = torch.argsort(evals, descending=True)
    evals, evecs = evals[order], evecs[:, order]
    w = torch.zeros(d_in, d_out, dtype=DTYPE)
    keep = min(d_in, d_out)
    tol = 1e-12 * max(float(evals.max().clamp(min=0.0)), 1.0)
    for j in range(keep):
        if float(evals[j]) > tol:
            col = evecs[:, j]
            imax = int(torch.argmax(col.abs()))
            w[:, j] = col if float(col[imax]) >= 0 else -col
    return w
