"""RBF kernel with automatic relevance determination and sparse-GP conditionals."""

import math

import torch

from .errors import DimensionMismatch
from .linalg import DTYPE, as_tensor, cholesky_escalated, tri_solve


class KernelParams:
    """ARD lengthscales and signal variance, stored on log scale."""

    def __init__(self, input_dim, lengthscales=1.0, variance=1.0):
        self.input_dim = int(input_dim)
        ls = as_tensor(lengthscales)
        if ls.ndim == 0:
            ls = ls.repeat(self.input_dim)
        if ls.shape != (self.input_dim,):
            raise DimensionMismatch("one lengthscale per input dimension required")
        if bool((ls <= 0).any()) or float(variance) <= 0:
            raise ValueError("lengthscales and variance must be positive")
        self.log_lengthscales = torch.log(ls)
        self.log_variance = torch.log(as_tensor(variance)).reshape(())

    @property
    def lengthscales(self):
        return torch.exp(self.log_lengthscales)

    @property
    def variance(self):
        return torch.exp(self.log_variance)


def kmat(params, x, x2=None):
    """Kernel matrix k(x_i, x'_j) = v * exp(-1/2 sum_d (x_id - x'_jd)^2 / l_d^2)."""
    x = as_tensor(x)
    x2 = x if x2 is None else as_tensor(x2)
    if x.shape[1] != params.input_dim or x2.shape[1] != params.input_dim:
        raise DimensionMismatch("input columns must match lengthscale count")
    ls = params.lengthscales
    a = x / ls
    b = x2 / ls
    sq = (a * a).sum(1, keepdim=True) + (b * b).sum(1) - 2.0 * (a @ b.T)
    sq = sq.clamp(min=0.0)
    return params.variance * torch.exp(-0.5 * sq)


def conditional_terms(params, z, x, jitter=0.0):
    """Inducing-point conditional quantities for inputs x.

    Returns (Ktilde, ktilde_diag) with Ktilde = K_xM K_MM^{-1} and
    ktilde_diag = diag(K_xx - K_xM K_MM^{-1} K_Mx); only the diagonal of the
    conditional covariance is ever needed per datapoint, and it is computed
    without forming any N x N matrix.
    """
    z = as_tensor(z)
    l_mm, _ = cholesky_escalated(kmat(params, z), jitter)
    return conditional_terms_with_chol(params, z, l_mm, x)


def conditional_terms_with_chol(params, z, l_mm, x):
    """Same as conditional_terms, reusing a precomputed factor of K_MM."""
    k_mx = kmat(params, z, x)                      # (M, N)
    v = tri_solve(l_mm, k_mx)                      # L^{-1} K_Mx
    ktilde = tri_solve(l_mm, v, transpose=True).T  # K_xM K_MM^{-1}
    kdiag = params.variance.expand(x.shape[0]) - (v * v).sum(0)
    return ktilde, kdiag.clamp(min=0.0)
