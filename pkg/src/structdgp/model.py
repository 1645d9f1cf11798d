"""Layered deep-GP model with analytic marginalisation of inducing outputs.

Each datapoint is pushed through the layers by a per-datapoint recursion:
layer l yields a Gaussian conditional on the sampled outputs of layers
1..l-1, with moments

  mu_hat   = mu_tilde + Stilde^{l,1:l-1} (Stilde^{1:l-1,1:l-1})^{-1} (f - mu_tilde_prev)
  Sig_hat  = Stilde^{ll} - Stilde^{l,1:l-1} (Stilde^{1:l-1,1:l-1})^{-1} Stilde^{1:l-1,l}

where Stilde couples the layers through the variational covariance over the
inducing outputs.  The inverse is only ever applied through a running
Cholesky factor of the accumulated Stilde that is extended one block row per
layer.  Everything below is batched over a flattened (datapoint, repetition)
axis; per-row noise comes pre-keyed from rng.layer_noise so batched and
row-wise evaluation agree.
"""

from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np
import torch

from . import kernel, rng, variational
from .errors import DimensionMismatch, NotPositiveDefinite
from .linalg import DTYPE, as_tensor, cholesky_escalated, pca_map

SAMPLE_JITTER = 1e-10

# Below this block size the batched Cholesky runs unrolled over the dimension
# (vectorized over rows); LAPACK's batched kernel loops over the batch and its
# backward dominates small-M configurations otherwise.
UNROLL_LIMIT = 8


def _small_cholesky(a, jitter=0.0):
    """Batched Cholesky for tiny SPD matrices, unrolled over the dimension.

    a: (rows, k, k); returns lower factors of a + jitter*I.  Built from
    unbind/stack so the autograd graph stays free of large zero-fill nodes.
    """
    k = a.shape[-1]
    if k > UNROLL_LIMIT:
        eye = torch.eye(k, dtype=DTYPE)
        try:
            return torch.linalg.cholesky(a + jitter * eye)
        except torch.linalg.LinAlgError as exc:
            raise NotPositiveDefinite(str(exc)) from exc
    # entries[i][j] for j <= i, each (rows,)
    a_cols = [list(col.unbind(-1)) for col in a.unbind(-1)]  # [j][i]
    out = [[None] * k for _ in range(k)]
    zero = torch.zeros(a.shape[0], dtype=DTYPE)
    for j in range(k):
        pivot = a_cols[j][j]
        if jitter:
            pivot = pivot + jitter
        for i in range(j):
            pivot = pivot - out[j][i] * out[j][i]
        if bool((pivot <= 0).any()):
            raise NotPositiveDefinite("non-positive pivot in batched factorization")
        root = torch.sqrt(pivot)
        out[j][j] = root
        for i in range(j + 1, k):
            val = a_cols[j][i]
            for p in range(j):
                val = val - out[i][p] * out[j][p]
            out[i][j] = val / root
    rows = [torch.stack(out[i][: i + 1] + [zero] * (k - i - 1), dim=-1) for i in range(k)]
    return torch.stack(rows, dim=-2)


class DGPModel:
    """Architecture, per-layer kernels/inducing inputs, fixed mean maps,
    likelihood noise and the variational factor."""

    def __init__(self, arch, kernels, inducing, mean_maps, factor,
                 noise_variance=0.01, jitter=1e-6):
        self.arch = arch
        self.kernels = list(kernels)
        self.inducing = [as_tensor(z) for z in inducing]
        self.mean_maps = [as_tensor(w) for w in mean_maps]
        self.factor = factor
        self.log_noise = torch.log(as_tensor(noise_variance)).reshape(())
        self.jitter = float(jitter)
        dims = self.layer_input_dims()
        for l, z in enumerate(self.inducing):
            if z.shape != (arch.num_inducing, dims[l]):
                raise DimensionMismatch(f"inducing inputs of layer {l} misshaped")
        if len(self.mean_maps) != arch.layers - 1:
            raise DimensionMismatch("one mean map per hidden layer required")

    @property
    def noise_variance(self):
        return torch.exp(self.log_noise)

    @property
    def structure(self):
        return self.factor.structure

    def layer_input_dims(self):
        dims = [self.arch.input_dim]
        for l in range(self.arch.layers - 1):
            dims.append(self.arch.widths[l])
        return dims


@dataclass
class LayerPosterior:
    """Per-row conditional moments of one layer's outputs."""

    mu_hat: torch.Tensor     # (rows, T_l)
    sig_hat: torch.Tensor    # (rows, T_l, T_l)


@dataclass
class LayerState:
    """Accumulator carried through the layer recursion for a batch of rows."""

    inputs: list = field(default_factory=list)   # layer inputs, (rows, d_l)
    ktilde: list = field(default_factory=list)   # (rows, M) per layer
    kdiag: list = field(default_factory=list)    # (rows,) per layer
    mu_t: list = field(default_factory=list)     # (rows, T_l) per layer
    stilde: dict = field(default_factory=dict)   # (l, lp) -> (rows, T_l, T_lp)
    samples: list = field(default_factory=list)  # sampled f, (rows, T_l)
    chol: torch.Tensor = None                    # running factor, (rows, c, c)

    def completed_layers(self):
        return len(self.samples)


def start_state(x_rows):
    state = LayerState()
    state.inputs.append(as_tensor(x_rows))
    return state


def eval_cache(model):
    """Per-evaluation shared quantities: K_MM factors, factor blocks, S_M blocks.

    Kernel matrices and factor assemblies are recomputed per evaluation
    (parameters move between gradient steps) but shared across the whole
    batch within one evaluation.
    """
    l_mm = []
    for l in range(model.arch.layers):
        kmm = kernel.kmat(model.kernels[l], model.inducing[l])
        lm, _ = cholesky_escalated(kmm, model.jitter)
        l_mm.append(lm)
    factor = model.factor
    if factor.structure == variational.FULLY_COUPLED:
        dense = factor.dense_factor()
        diag_factors = None
    else:
        dense = None
        diag_factors = factor.diag_blocks()
    cache = SimpleNamespace(l_mm=l_mm, dense_factor=dense, diag_factors=diag_factors)
    cache.sm = _sm_blocks(model, cache)
    return cache


def _sm_blocks(model, cache):
    """Structurally nonzero S_M blocks assembled from the factor storage."""
    arch = model.arch
    factor = model.factor
    m = arch.num_inducing
    out = SimpleNamespace(structure=factor.structure)
    if factor.structure == variational.FULLY_COUPLED:
        dense = cache.dense_factor
        blocks = {}
        for l in range(arch.layers):
            ro = arch.layer_offset(l) * m
            rw = arch.widths[l] * m
            for lp in range(l + 1):
                co = arch.layer_offset(lp) * m
                cw = arch.widths[lp] * m
                w = co + cw if lp < l else ro + rw
                s = dense[ro : ro + rw, :w] @ dense[co : co + cw, :w].T
                blocks[(l, lp)] = (
                    s.reshape(arch.widths[l], m, arch.widths[lp], m).permute(0, 2, 1, 3)
                )
        out.full = blocks
        return out
    diag_factors = cache.diag_factors
    rows = []
    for l, t in arch.gp_slots:
        s = arch.slot_index(l, t)
        parts = [diag_factors[s]]
        if factor.structure == variational.STRIPES_ARROW:
            if l == arch.layers - 1 and arch.layers > 1:
                parts += [factor.arrow[i] for i in range(factor.arrow.shape[0])]
            else:
                parts += [factor.stripe_block(l, lpp, t) for lpp in range(l)]
        rows.append(torch.cat(parts, dim=1))
    width = max(r.shape[1] for r in rows)
    rows = [
        r if r.shape[1] == width
        else torch.cat([r, torch.zeros(m, width - r.shape[1], dtype=DTYPE)], dim=1)
        for r in rows
    ]
    stacked = torch.stack(rows)
    out.diag = stacked @ stacked.transpose(1, 2)  # (T, M, M) in slot order
    if factor.structure == variational.STRIPES_ARROW:
        tau = arch.uniform_hidden_width()
        stripes_sm = {}
        for l in range(1, arch.layers - 1):
            for lp in range(l):
                rows, cols = [], []
                for t in range(tau):
                    a = [factor.stripe_block(l, lpp, t) for lpp in range(lp)]
                    a.append(factor.stripe_block(l, lp, t))
                    b = [factor.stripe_block(lp, lpp, t) for lpp in range(lp)]
                    b.append(diag_factors[arch.slot_index(lp, t)])
                    rows.append(torch.cat(a, dim=1))
                    cols.append(torch.cat(b, dim=1))
                stripes_sm[(l, lp)] = torch.stack(rows) @ torch.stack(cols).transpose(1, 2)
        arrow_sm = {}
        last = arch.layers - 1
        for lp in range(last):
            rows, cols = [], []
            for t in range(arch.widths[lp]):
                a = [factor.arrow_block(lpp, t) for lpp in range(lp)]
                a.append(factor.arrow_block(lp, t))
                b = [factor.stripe_block(lp, lpp, t) for lpp in range(lp)]
                b.append(diag_factors[arch.slot_index(lp, t)])
                rows.append(torch.cat(a, dim=1))
                cols.append(torch.cat(b, dim=1))
            arrow_sm[lp] = torch.stack(rows) @ torch.stack(cols).transpose(1, 2)
        out.stripes = stripes_sm
        out.arrow = arrow_sm
    return out


def mu_tilde(model, l, ktilde_rows):
    """Per-row conditional prior means K~ mu_M for every GP of layer l."""
    mu_l = model.factor.mu_layer(l)          # (T_l, M)
    return ktilde_rows @ mu_l.T              # (rows, T_l)


def _quad(kt_a, blocks, kt_b):
    """Row-wise kt_a S_b kt_b^T for a stack of blocks (diag trick).

    Shapes: kt_a (rows, M), blocks (B, M, K), kt_b (rows, K) -> (rows, B).
    Lowered to one flat GEMM plus an elementwise reduction; never forms the
    per-row quadratic matrices.
    """
    b, m, k = blocks.shape
    flat = blocks.permute(1, 0, 2).reshape(m, b * k)
    tmp = (kt_a @ flat).reshape(-1, b, k)
    return (tmp * kt_b.unsqueeze(1)).sum(-1)


def s_tilde_blocks(model, l, state, cache=None):
    """Stilde^{l,lp} blocks for lp <= l (structural zeros stay zero).

    Diagonal (l==lp, t==tp) entries are kdiag + K~ (S_M)_tt K~^T; cross
    entries are K~^l (S_M^{l,lp})_{t,tp} K~^{lp T}.  Mean-field computes only
    within-layer diagonals, stripes-and-arrow only same-position stripes plus
    output-layer arrow couplings.
    """
    if cache is None:
        cache = eval_cache(model)
    arch = model.arch
    sm = cache.sm
    kt = state.ktilde[l]
    kd = state.kdiag[l]
    rows = kt.shape[0]
    t_l = arch.widths[l]
    out = {}
    if sm.structure == variational.FULLY_COUPLED:
        for lp in range(l + 1):
            t_lp = arch.widths[lp]
            blocks = sm.full[(l, lp)].reshape(t_l * t_lp, arch.num_inducing, arch.num_inducing)
            vals = _quad(kt, blocks, state.ktilde[lp]).reshape(rows, t_l, t_lp)
            if lp == l:
                vals = vals + torch.diag_embed(kd[:, None].expand(rows, t_l))
            out[(l, lp)] = vals
        return out
    o = arch.layer_offset(l)
    own_diag = _quad(kt, sm.diag[o : o + t_l], kt) + kd[:, None]
    out[(l, l)] = torch.diag_embed(own_diag)
    if sm.structure == variational.MEAN_FIELD:
        for lp in range(l):
            out[(l, lp)] = torch.zeros(rows, t_l, arch.widths[lp], dtype=DTYPE)
        return out
    last = arch.layers - 1
    for lp in range(l):
        t_lp = arch.widths[lp]
        if l == last:
            vals = _quad(kt, sm.arrow[lp], state.ktilde[lp])      # (rows, T_lp)
            out[(l, lp)] = vals[:, None, :]
        elif l < last:
            vals = _quad(kt, sm.stripes[(l, lp)], state.ktilde[lp])  # (rows, tau)
            out[(l, lp)] = torch.diag_embed(vals)
    return out


def _posterior_parts(model, l, state):
    """(mu_hat, sig_hat, gain) where gain extends the running Cholesky."""
    mu_l = state.mu_t[l]
    own = state.stilde[(l, l)]
    if l == 0:
        return mu_l, own, None
    if model.structure == variational.MEAN_FIELD:
        prev = state.chol.shape[-1]
        gain = torch.zeros(own.shape[0], prev, own.shape[1], dtype=DTYPE)
        return mu_l, own, gain
    cross = torch.cat([state.stilde[(l, lp)] for lp in range(l)], dim=2)
    resid = torch.cat(state.samples, dim=1) - torch.cat(state.mu_t[:l], dim=1)
    rhs = torch.cat([cross.transpose(1, 2), resid.unsqueeze(-1)], dim=2)
    sol = torch.linalg.solve_triangular(state.chol, rhs, upper=False)
    gain, u = sol[:, :, :-1], sol[:, :, -1:]
    mu_hat = mu_l + (gain.transpose(1, 2) @ u).squeeze(-1)
    sig = own - gain.transpose(1, 2) @ gain
    sig = 0.5 * (sig + sig.transpose(1, 2))
    return mu_hat, sig, gain


def layer_posterior(model, l, state):
    """Conditional moments of layer l given the sampled earlier layers."""
    mu_hat, sig_hat, _ = _posterior_parts(model, l, state)
    return LayerPosterior(mu_hat, sig_hat)


def _extend_chol(state, gain, chol_new):
    if state.chol is None:
        return chol_new
    rows, prev = state.chol.shape[0], state.chol.shape[-1]
    q = chol_new.shape[-1]
    out = torch.zeros(rows, prev + q, prev + q, dtype=DTYPE)
    out[:, :prev, :prev] = state.chol
    out[:, prev:, :prev] = gain.transpose(1, 2)
    out[:, prev:, prev:] = chol_new
    return out


def sample_layer(model, l, state, eps, cache=None):
    """Advance the recursion one layer, sampling outputs when eps is given.

    Appends the layer's conditional quantities to the state, samples
    f = mu_hat + chol(Sig_hat + 1e-10 I) eps, extends the running Cholesky
    and computes the next layer's input (mean-map residual plus sample).
    With eps=None only the posterior is computed (used for the final layer).
    """
    if cache is None:
        cache = eval_cache(model)
    h = state.inputs[l]
    kt, kd = kernel.conditional_terms_with_chol(
        model.kernels[l], model.inducing[l], cache.l_mm[l], h
    )
    state.ktilde.append(kt)
    state.kdiag.append(kd)
    state.mu_t.append(mu_tilde(model, l, kt))
    state.stilde.update(s_tilde_blocks(model, l, state, cache))
    mu_hat, sig_hat, gain = _posterior_parts(model, l, state)
    post = LayerPosterior(mu_hat, sig_hat)
    if eps is None:
        return post, state
    t_l = model.arch.widths[l]
    if model.structure == variational.MEAN_FIELD:
        # Sig_hat is diagonal; chol(Sig + jitter I) is the elementwise sqrt
        std = torch.sqrt(torch.diagonal(sig_hat, dim1=1, dim2=2) + SAMPLE_JITTER)
        chol_new = torch.diag_embed(std)
        f = mu_hat + std * eps
    else:
        chol_new = _small_cholesky(sig_hat, SAMPLE_JITTER)
        f = mu_hat + (chol_new @ eps.unsqueeze(-1)).squeeze(-1)
    state.samples.append(f)
    state.chol = _extend_chol(state, gain, chol_new)
    if l < model.arch.layers - 1:
        state.inputs.append(h @ model.mean_maps[l] + f)
    return post, state


def propagate(model, x_rows, ids, reps, seed, stream, cache=None):
    """Run all layers for a batch of (datapoint, repetition) rows.

    Layers 1..L-1 are sampled with noise keyed by (id, rep, layer, unit);
    the final layer stays analytic.  Returns (final LayerPosterior, state).
    """
    if cache is None:
        cache = eval_cache(model)
    state = start_state(x_rows)
    last = model.arch.layers - 1
    for l in range(model.arch.layers):
        if l < last:
            eps = rng.layer_noise(seed, stream, ids, reps, l, model.arch.widths[l])
            post, state = sample_layer(model, l, state, eps, cache)
        else:
            post, state = sample_layer(model, l, state, None, cache)
    return post, state


def path_rows(x, num_reps, ids=None):
    """Flatten (datapoint, repetition) paths into rows, datapoint-major."""
    x = as_tensor(x)
    n = x.shape[0]
    if ids is None:
        ids = np.arange(n, dtype=np.int64)
    ids = np.asarray(ids, dtype=np.int64)
    x_rows = x.repeat_interleave(num_reps, dim=0)
    row_ids = np.repeat(ids, num_reps)
    row_reps = np.tile(np.arange(num_reps, dtype=np.int64), n)
    return x_rows, row_ids, row_reps


def predict(model, x_star, num_paths=100, seed=0):
    """Final-layer moments for num_paths sampled paths per test point.

    Returns (mu, var) of shape (n, num_paths) in normalized units; likelihood
    noise is *not* added here.  The hidden layers are resampled per path, the
    final layer is never sampled.
    """
    with torch.no_grad():
        x_rows, ids, reps = path_rows(x_star, num_paths)
        post, _ = propagate(model, x_rows, ids, reps, seed, rng.STREAM_PREDICT)
        n = as_tensor(x_star).shape[0]
        mu = post.mu_hat.reshape(n, num_paths)
        var = post.sig_hat.reshape(n, num_paths)
    return mu, var


def build_model(x_train, arch, structure, seed=0, jitter=1e-6,
                noise_variance=0.01, kmeans_iters=20):
    """Assemble a model from training inputs.

    Inducing inputs come from k-means on the layer inputs obtained by
    propagating the training data through the fixed mean maps; mean maps are
    PCA projections of those same propagated inputs (zero-padded when a
    layer is wider than its input).
    """
    from .data import kmeans  # local import: data is harness-level

    x = as_tensor(x_train)
    gen = np.random.default_rng(rng.derive_seed(seed, 0xB0))
    kernels, inducing, mean_maps = [], [], []
    h = x
    for l in range(arch.layers):
        kernels.append(kernel.KernelParams(h.shape[1]))
        z = kmeans(h.numpy(), arch.num_inducing, iters=kmeans_iters, rng=gen)
        inducing.append(as_tensor(z))
        if l < arch.layers - 1:
            w = pca_map(h, arch.widths[l])
            mean_maps.append(w)
            h = h @ w
    factor = variational.init_factor(arch, structure, kernels, inducing, jitter)
    return DGPModel(arch, kernels, inducing, mean_maps, factor,
                    noise_variance=noise_variance, jitter=jitter)
