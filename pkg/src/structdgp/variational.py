"""Structured variational posteriors over inducing outputs.

The Gaussian q(f_M) = N(mu_M, S_M) is stored through a sparse block Cholesky
factor L_S (S_M = L_S L_S^T) in one of three structures:

* mean-field ("mf"): one M x M lower-triangular block per GP,
* stripes-and-arrow ("star"): those diagonal blocks, plus full M x M
  "stripe" blocks coupling the same GP position across hidden layers, plus
  "arrow" blocks coupling every hidden GP to the output GP,
* fully-coupled ("fc"): a single dense lower-triangular factor of size T*M.

Structurally absent blocks are never stored.  Diagonal blocks keep their
diagonals positive through a log parameterisation.
"""

import csv
from dataclasses import dataclass, field

import numpy as np
import torch

from . import kernel
from .errors import IndexOutOfRange, TooLarge
from .linalg import DTYPE, cholesky_escalated

MEAN_FIELD = "mf"
STRIPES_ARROW = "star"
FULLY_COUPLED = "fc"
STRUCTURES = (MEAN_FIELD, STRIPES_ARROW, FULLY_COUPLED)

DENSIFY_LIMIT = 4096


@dataclass(frozen=True)
class Architecture:
    """Layer count, GPs per layer, inducing points per layer, input dim."""

    layers: int
    widths: tuple
    num_inducing: int
    input_dim: int

    def __post_init__(self):
        if self.layers < 1 or len(self.widths) != self.layers:
            raise ValueError("widths must list one positive count per layer")
        if any(w < 1 for w in self.widths) or self.num_inducing < 1:
            raise ValueError("widths and num_inducing must be positive")
        if self.widths[-1] != 1:
            raise ValueError("the output layer must hold a single GP")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def total_gps(self):
        return sum(self.widths)

    @property
    def gp_slots(self):
        return [(l, t) for l in range(self.layers) for t in range(self.widths[l])]

    def slot_index(self, l, t):
        if not (0 <= l < self.layers and 0 <= t < self.widths[l]):
            raise IndexOutOfRange(f"no GP ({l}, {t}) in this architecture")
        return sum(self.widths[:l]) + t

    def layer_offset(self, l):
        return sum(self.widths[:l])

    def uniform_hidden_width(self):
        hidden = set(self.widths[:-1])
        if len(hidden) > 1:
            raise ValueError("hidden layers must share one width")
        return self.widths[0] if self.layers > 1 else 1


def _tril_idx(n):
    return torch.tril_indices(n, n, offset=-1)


def _build_lower(log_diag, low_packed, n):
    """Assemble lower-triangular block(s) from log-diagonal + packed strict lower."""
    batch = log_diag.shape[:-1]
    out = torch.zeros(batch + (n, n), dtype=DTYPE)
    idx = _tril_idx(n)
    out[..., idx[0], idx[1]] = low_packed
    ar = torch.arange(n)
    out[..., ar, ar] = torch.exp(log_diag)
    return out


def _pack_lower(l):
    """Inverse of _build_lower for a single lower-triangular matrix."""
    n = l.shape[-1]
    idx = _tril_idx(n)
    return torch.log(torch.diagonal(l, dim1=-2, dim2=-1)), l[..., idx[0], idx[1]]


class VariationalFactor:
    """mu_M and the sparse block Cholesky factor of S_M."""

    def __init__(self, arch, structure):
        if structure not in STRUCTURES:
            raise ValueError(f"unknown structure {structure!r}")
        self.arch = arch
        self.structure = structure
        m = arch.num_inducing
        t_total = arch.total_gps
        self.mu = torch.zeros(t_total * m, dtype=DTYPE)
        nlow = m * (m - 1) // 2
        if structure == FULLY_COUPLED:
            dim = t_total * m
            self.fc_log = torch.zeros(dim, dtype=DTYPE)
            self.fc_low = torch.zeros(dim * (dim - 1) // 2, dtype=DTYPE)
        else:
            self.diag_log = torch.zeros(t_total, m, dtype=DTYPE)
            self.diag_low = torch.zeros(t_total, nlow, dtype=DTYPE)
        if structure == STRIPES_ARROW:
            tau = arch.uniform_hidden_width()
            ll = arch.layers
            self.stripe_keys = [
                (l, lp, t)
                for l in range(1, ll - 1)
                for lp in range(l)
                for t in range(tau)
            ]
            self.arrow_keys = [(lp, t) for lp in range(ll - 1) for t in range(tau)]
            self.stripes = torch.zeros(len(self.stripe_keys), m, m, dtype=DTYPE)
            self.arrow = torch.zeros(len(self.arrow_keys), m, m, dtype=DTYPE)
            self._stripe_pos = {k: i for i, k in enumerate(self.stripe_keys)}
            self._arrow_pos = {k: i for i, k in enumerate(self.arrow_keys)}

    # -- storage access -----------------------------------------------------

    def mu_block(self, l, t):
        m = self.arch.num_inducing
        s = self.arch.slot_index(l, t)
        return self.mu[s * m : (s + 1) * m]

    def mu_layer(self, l):
        m = self.arch.num_inducing
        o = self.arch.layer_offset(l)
        return self.mu[o * m : (o + self.arch.widths[l]) * m].reshape(
            self.arch.widths[l], m
        )

    def diag_blocks(self):
        """All (l, t) diagonal factor blocks, stacked in slot order."""
        if self.structure == FULLY_COUPLED:
            m = self.arch.num_inducing
            dense = self.dense_factor()
            blocks = []
            for l, t in self.arch.gp_slots:
                o = self.arch.slot_index(l, t) * m
                blocks.append(dense[o : o + m, o : o + m])
            return torch.stack(blocks)
        return _build_lower(self.diag_log, self.diag_low, self.arch.num_inducing)

    def stripe_block(self, l, lp, t):
        return self.stripes[self._stripe_pos[(l, lp, t)]]

    def arrow_block(self, lp, t):
        return self.arrow[self._arrow_pos[(lp, t)]]

    def dense_factor(self):
        """The factor as one dense lower-triangular matrix (zeros kept)."""
        m = self.arch.num_inducing
        dim = self.arch.total_gps * m
        if self.structure == FULLY_COUPLED:
            return _build_lower(self.fc_log, self.fc_low, dim)
        out = torch.zeros(dim, dim, dtype=DTYPE)
        diag = self.diag_blocks()
        for i, (l, t) in enumerate(self.arch.gp_slots):
            o = self.arch.slot_index(l, t) * m
            out[o : o + m, o : o + m] = diag[i]
        if self.structure == STRIPES_ARROW:
            for (l, lp, t), i in self._stripe_pos.items():
                r = self.arch.slot_index(l, t) * m
                c = self.arch.slot_index(lp, t) * m
                out[r : r + m, c : c + m] = self.stripes[i]
            for (lp, t), i in self._arrow_pos.items():
                r = self.arch.slot_index(self.arch.layers - 1, 0) * m
                c = self.arch.slot_index(lp, t) * m
                out[r : r + m, c : c + m] = self.arrow[i]
        return out

    # -- derived quantities ---------------------------------------------------

    def logdet(self):
        """log det S_M = 2 sum(log diag L_S); reads only diagonal blocks."""
        if self.structure == FULLY_COUPLED:
            return 2.0 * self.fc_log.sum()
        return 2.0 * self.diag_log.sum()

    def densify(self):
        """Dense (L_S, S_M); guarded to desk scale."""
        dim = self.arch.total_gps * self.arch.num_inducing
        if dim > DENSIFY_LIMIT:
            raise TooLarge(f"densify limited to dimension {DENSIFY_LIMIT}")
        l = self.dense_factor()
        return l, l @ l.T

    def reconstruct_block(self, l, lp, t, tp):
        """The exact M x M block (S_M^{l,lp})_{t,tp} of L_S L_S^T.

        Structurally absent blocks return zeros.  Computed from the stored
        blocks directly, never through the dense S_M.
        """
        arch = self.arch
        m = arch.num_inducing
        si = arch.slot_index(l, t)   # validates indices
        sj = arch.slot_index(lp, tp)
        if (l, t) == (lp, tp) and self.structure != FULLY_COUPLED:
            d = self.diag_blocks()[si]
            out = d @ d.T
            if self.structure == STRIPES_ARROW:
                if l == arch.layers - 1:
                    for a in range(self.arrow.shape[0]):
                        out = out + self.arrow[a] @ self.arrow[a].T
                else:
                    for lpp in range(l):
                        s = self.stripe_block(l, lpp, t)
                        out = out + s @ s.T
            return out
        if si < sj:
            return self.reconstruct_block(lp, l, tp, t).T
        if self.structure == MEAN_FIELD:
            return torch.zeros(m, m, dtype=DTYPE)
        if self.structure == FULLY_COUPLED:
            dense = self.dense_factor()
            w = (sj + 1) * m
            return dense[si * m : (si + 1) * m, :w] @ dense[sj * m : (sj + 1) * m, :w].T
        # stripes-and-arrow, si > sj below
        last = arch.layers - 1
        if l == last and lp < last:
            out = self.arrow_block(lp, tp) @ self.diag_blocks()[sj].T
            for lpp in range(lp):
                out = out + self.arrow_block(lpp, tp) @ self.stripe_block(lp, lpp, tp).T
            return out
        if t == tp and lp < l < last:
            out = self.stripe_block(l, lp, t) @ self.diag_blocks()[sj].T
            for lpp in range(lp):
                out = out + self.stripe_block(l, lpp, t) @ self.stripe_block(lp, lpp, t).T
            return out
        return torch.zeros(m, m, dtype=DTYPE)

    def trainable_tensors(self):
        """Ordered (name, tensor) pairs of the free parameters."""
        out = [("mu", self.mu)]
        if self.structure == FULLY_COUPLED:
            out += [("fc_log", self.fc_log), ("fc_low", self.fc_low)]
        else:
            out += [("diag_log", self.diag_log), ("diag_low", self.diag_low)]
        if self.structure == STRIPES_ARROW:
            out += [("stripes", self.stripes), ("arrow", self.arrow)]
        return out


def nonzero_count(structure, tau, layers, m):
    """Structurally nonzero entries of the symmetric S_M.

    Convention: each structurally nonzero M x M block of S_M counts once per
    matrix position, so off-diagonal blocks contribute twice.  For the
    standard architecture (tau GPs per hidden layer, one output GP):
      mf:   (tau (L-1) + 1) M^2
      star: (tau (L-1) + 1  +  tau (L-1)(L-2)  +  2 tau (L-1)) M^2
      fc:   ((tau (L-1) + 1) M)^2
    """
    if tau < 1 or layers < 1 or m < 1:
        raise ValueError("counts must be positive")
    t_total = tau * (layers - 1) + 1
    if structure == MEAN_FIELD:
        blocks = t_total
    elif structure == STRIPES_ARROW:
        blocks = t_total + tau * (layers - 1) * (layers - 2) + 2 * tau * (layers - 1)
    elif structure == FULLY_COUPLED:
        return (t_total * m) ** 2
    else:
        raise ValueError(f"unknown structure {structure!r}")
    return blocks * m * m


def init_factor(arch, structure, kernels, inducing, jitter=1e-6):
    """Standard initialization of the variational posterior.

    mu_M = 0; diagonal blocks start at chol(1e-5 K_MM) for hidden layers
    (small initial variance) and chol(K_MM) for the output layer (prior);
    stripes and arrow blocks start at zero.
    """
    factor = VariationalFactor(arch, structure)
    scales = [1e-5] * (arch.layers - 1) + [1.0]
    with torch.no_grad():
        blocks = []
        for l in range(arch.layers):
            kmm = kernel.kmat(kernels[l], inducing[l])
            l_mm, _ = cholesky_escalated(kmm, jitter)
            blocks.append(np.sqrt(scales[l]) * l_mm)
        if structure == FULLY_COUPLED:
            m = arch.num_inducing
            dim = arch.total_gps * m
            dense = torch.zeros(dim, dim, dtype=DTYPE)
            for l, t in arch.gp_slots:
                o = arch.slot_index(l, t) * m
                dense[o : o + m, o : o + m] = blocks[l]
            log_d, low = _pack_lower(dense)
            factor.fc_log.copy_(log_d)
            factor.fc_low.copy_(low)
        else:
            for l, t in arch.gp_slots:
                s = arch.slot_index(l, t)
                log_d, low = _pack_lower(blocks[l])
                factor.diag_log[s].copy_(log_d)
                factor.diag_low[s].copy_(low)
    return factor


def to_fully_coupled(factor):
    """Embed an mf/star factor into the fully-coupled storage (same S_M)."""
    dense = factor.dense_factor().detach()
    out = VariationalFactor(factor.arch, FULLY_COUPLED)
    with torch.no_grad():
        log_d, low = _pack_lower(dense)
        out.fc_log.copy_(log_d)
        out.fc_low.copy_(low)
        out.mu.copy_(factor.mu.detach())
    return out


LOG_ABS_CLAMP = -40.0


def covariance_log_abs(factor):
    """ln|S_M| entrywise (numpy), clamped below at -40 (zeros map to -40)."""
    _, s = factor.densify()
    a = np.abs(s.detach().numpy())
    with np.errstate(divide="ignore"):
        out = np.log(a)
    return np.maximum(out, LOG_ABS_CLAMP)


def export_covariance_csv(factor, path):
    """CSV heat-map export of ln|S_M entries| for external plotting."""
    mat = covariance_log_abs(factor)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in mat:
            writer.writerow([f"{v:.9g}" for v in row])
