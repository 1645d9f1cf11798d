"""ELBO assembly, KL term, flattened parameter vector, Adam and training loop.

The ELBO is stochastic only through the layer samples; all inducing outputs
are marginalised analytically.  Gradients for training come from reverse-mode
autodiff and are validated against central finite differences with common
random numbers (fd_gradient); the keyed noise guarantees that an evaluation
with a fixed seed is deterministic, so plus/minus perturbations see identical
draws.
"""

import math
import time
from dataclasses import dataclass

import numpy as np
import torch

from . import model as model_mod
from . import rng, variational
from .kernel import conditional_terms_with_chol
from .linalg import DTYPE, as_tensor, tri_solve


@dataclass
class TrainConfig:
    iterations: int = 20000
    minibatch: int = 512
    num_samples: int = 5          # Monte-Carlo repetitions R per datapoint
    learning_rate: float = 0.005
    decay_steps: int = 1000
    decay_rate: float = 0.98
    jitter: float = 1e-6
    val_fraction: float = 0.10
    early_stop_strips: int = 5
    strip_length: int = 500
    val_samples: int = 20
    seed: int = 0
    estimator: str = "analytic"   # or "sampled" (f_M drawn per path)
    freeze: tuple = ()            # name prefixes excluded from optimization

    def __post_init__(self):
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("validation fraction must lie in [0, 1)")
        if min(self.minibatch, self.num_samples, self.decay_steps,
               self.strip_length, self.early_stop_strips) < 1:
            raise ValueError("config counts must be positive")


# -- parameter vector ---------------------------------------------------------

def trainable_entries(model):
    """Ordered (name, tensor) pairs defining the flattened parameter layout.

    Order: per-layer log kernel params, per-layer inducing inputs, log noise,
    mu_M, factor blocks (diagonal blocks as log-diagonal + packed strict
    lower; stripe/arrow/dense blocks raw).
    """
    entries = []
    for l, kp in enumerate(model.kernels):
        entries.append((f"kernels.{l}.log_lengthscales", kp.log_lengthscales))
        entries.append((f"kernels.{l}.log_variance", kp.log_variance))
    for l, z in enumerate(model.inducing):
        entries.append((f"inducing.{l}", z))
    entries.append(("log_noise", model.log_noise))
    for name, tensor in model.factor.trainable_tensors():
        entries.append((f"factor.{name}", tensor))
    return entries


def flatten_params(model):
    with torch.no_grad():
        return torch.cat([t.detach().reshape(-1).clone() for _, t in trainable_entries(model)])


def unflatten_params(model, vec):
    vec = as_tensor(vec)
    with torch.no_grad():
        pos = 0
        for _, t in trainable_entries(model):
            n = t.numel()
            t.copy_(vec[pos : pos + n].reshape(t.shape))
            pos += n
    if pos != vec.numel():
        raise ValueError("parameter vector has wrong length")


def param_slices(model):
    """name -> (start, stop) into the flattened vector."""
    out = {}
    pos = 0
    for name, t in trainable_entries(model):
        out[name] = (pos, pos + t.numel())
        pos += t.numel()
    return out


def set_requires_grad(model, flag=True):
    for _, t in trainable_entries(model):
        t.requires_grad_(flag)


# -- ELBO pieces --------------------------------------------------------------

def expected_log_lik(y, mu, var, sigma2):
    """Closed-form E_{f~N(mu,var)}[log N(y | f, sigma2)], elementwise."""
    y, mu, var = as_tensor(y), as_tensor(mu), as_tensor(var)
    return -0.5 * torch.log(2.0 * math.pi * sigma2) - ((y - mu) ** 2 + var) / (2.0 * sigma2)


def kl_term(model, cache=None):
    """KL[q(f_M) || prod_{l,t} p(f_M^{l,t})], blockwise from the sparse factor.

    0.5 [ tr(P^{-1} S_M) + mu^T P^{-1} mu - T M + log|P| - log|S_M| ] with
    P the block-diagonal prior; traces and quadratic forms go through
    triangular solves against the per-layer K_MM factors.
    """
    if cache is None:
        cache = model_mod.eval_cache(model)
    arch = model.arch
    factor = model.factor
    m = arch.num_inducing
    total_dim = arch.total_gps * m
    trace = as_tensor(0.0)
    quad = as_tensor(0.0)
    logdet_p = as_tensor(0.0)
    dense = cache.dense_factor
    diag_factors = cache.diag_factors
    for l in range(arch.layers):
        l_mm = cache.l_mm[l]
        logdet_p = logdet_p + arch.widths[l] * 2.0 * torch.log(torch.diagonal(l_mm)).sum()
        for t in range(arch.widths[l]):
            s = arch.slot_index(l, t)
            quad = quad + (tri_solve(l_mm, factor.mu_block(l, t)) ** 2).sum()
            if factor.structure == variational.FULLY_COUPLED:
                rows = dense[s * m : (s + 1) * m, : (s + 1) * m]
            elif factor.structure == variational.STRIPES_ARROW:
                parts = [diag_factors[s]]
                if l == arch.layers - 1 and arch.layers > 1:
                    parts += [factor.arrow[i] for i in range(factor.arrow.shape[0])]
                else:
                    parts += [factor.stripe_block(l, lpp, t) for lpp in range(l)]
                rows = torch.cat(parts, dim=1)
            else:
                rows = diag_factors[s]
            trace = trace + (tri_solve(l_mm, rows) ** 2).sum()
    return 0.5 * (trace + quad - total_dim + logdet_p - factor.logdet())


def per_path_loglik(model, x, y, num_samples, seed, ids=None, estimator="analytic",
                    cache=None):
    """Expected log-likelihood of every (datapoint, repetition) path.

    Returns an (n, R) tensor.  estimator='analytic' marginalises the inducing
    outputs per Theorem-1 recursion; 'sampled' draws f_M ~ q once per path
    and pushes it through the prior conditionals (unbiased, higher variance).
    Both consume identical keyed layer noise, so they coincide pathwise when
    q(f_M) collapses to a point mass.
    """
    x = as_tensor(x)
    y = as_tensor(y)
    n = x.shape[0]
    if cache is None:
        cache = model_mod.eval_cache(model)
    x_rows, row_ids, row_reps = model_mod.path_rows(x, num_samples, ids)
    y_rows = y.repeat_interleave(num_samples)
    sigma2 = model.noise_variance
    if estimator == "analytic":
        post, _ = model_mod.propagate(model, x_rows, row_ids, row_reps, seed,
                                      rng.STREAM_LAYER, cache)
        ll = expected_log_lik(y_rows, post.mu_hat[:, 0], post.sig_hat[:, 0, 0], sigma2)
        return ll.reshape(n, num_samples)
    if estimator != "sampled":
        raise ValueError(f"unknown estimator {estimator!r}")
    arch = model.arch
    xi = rng.inducing_noise(seed, row_ids, row_reps, arch.total_gps * arch.num_inducing)
    ld = cache.dense_factor
    if ld is None:
        ld = model.factor.dense_factor()
    f_m = model.factor.mu + xi @ ld.T                            # (rows, T M)
    h = x_rows
    last = arch.layers - 1
    for l in range(arch.layers):
        kt, kd = conditional_terms_with_chol(
            model.kernels[l], model.inducing[l], cache.l_mm[l], h
        )
        m = arch.num_inducing
        o = arch.layer_offset(l) * m
        fm_l = f_m[:, o : o + arch.widths[l] * m].reshape(-1, arch.widths[l], m)
        mean = torch.einsum("nm,ntm->nt", kt, fm_l)
        if l == last:
            ll = expected_log_lik(y_rows, mean[:, 0], kd, sigma2)
            return ll.reshape(n, num_samples)
        eps = rng.layer_noise(seed, rng.STREAM_LAYER, row_ids, row_reps, l, arch.widths[l])
        f = mean + torch.sqrt(kd + model_mod.SAMPLE_JITTER)[:, None] * eps
        h = h @ model.mean_maps[l] + f


def elbo(model, x, y, num_samples, seed, n_total, ids=None):
    """Stochastic ELBO estimate per Eq.-7 structure (Alg.-1 loop, batched)."""
    cache = model_mod.eval_cache(model)
    ll = per_path_loglik(model, x, y, num_samples, seed, ids, "analytic", cache)
    scale = n_total / (ll.shape[0] * num_samples)
    return scale * ll.sum() - kl_term(model, cache)


def elbo_sampled_fm(model, x, y, num_samples, seed, n_total, ids=None):
    """Same expectation as elbo, but sampling f_M instead of marginalising."""
    cache = model_mod.eval_cache(model)
    ll = per_path_loglik(model, x, y, num_samples, seed, ids, "sampled", cache)
    scale = n_total / (ll.shape[0] * num_samples)
    return scale * ll.sum() - kl_term(model, cache)


# -- gradients ----------------------------------------------------------------

def fd_gradient(model, params, elbo_eval, step=1e-5):
    """Central finite differences (f(v+h e_i) - f(v-h e_i)) / 2h.

    elbo_eval(model) must be deterministic for a fixed seed (common random
    numbers); h = step * max(1, |v_i|).
    """
    params = as_tensor(params).clone()
    grad = torch.zeros_like(params)
    with torch.no_grad():
        for i in range(params.numel()):
            h = step * max(1.0, abs(float(params[i])))
            v = params.clone()
            v[i] = params[i] + h
            unflatten_params(model, v)
            f_plus = float(elbo_eval(model))
            v[i] = params[i] - h
            unflatten_params(model, v)
            f_minus = float(elbo_eval(model))
            grad[i] = (f_plus - f_minus) / (2.0 * h)
        unflatten_params(model, params)
    return grad


def autodiff_gradient(model, objective):
    """Flattened gradient of objective(model) via reverse mode."""
    value, grads = _grad_list(model, objective)
    return value, torch.cat([g.reshape(-1) for g in grads])


class Adam:
    """Adam on the named parameter tensors (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, entries, beta1=0.9, beta2=0.999, eps=1e-8):
        self.entries = entries
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [torch.zeros_like(t) for _, t in entries]
        self.v = [torch.zeros_like(t) for _, t in entries]

    def step(self, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        with torch.no_grad():
            for (name, p), g, m, v in zip(self.entries, grads, self.m, self.v):
                m.mul_(b1).add_(g, alpha=1 - b1)
                v.mul_(b2).addcmul_(g, g, value=1 - b2)
                m_hat = m / (1 - b1 ** self.t)
                v_hat = v / (1 - b2 ** self.t)
                p.add_(-lr * m_hat / (torch.sqrt(v_hat) + self.eps))


def _grad_list(model, objective, entries=None):
    entries = trainable_entries(model) if entries is None else entries
    try:
        for _, t in entries:
            t.requires_grad_(True)
            t.grad = None
        value = objective(model)
        if not torch.isfinite(value):
            raise RuntimeError("non-finite ELBO")
        value.backward()
        grads = []
        with torch.no_grad():
            for _, t in entries:
                grads.append(
                    t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t)
                )
    finally:
        for _, t in entries:
            t.grad = None
            t.requires_grad_(False)
    return float(value.detach()), grads


def validation_tll(model, x_val, y_val, num_paths, seed):
    """Mean log predictive density on the validation set (normalized units)."""
    mu, var = model_mod.predict(model, x_val, num_paths, seed)
    sigma2 = float(model.noise_variance)
    y = as_tensor(y_val)[:, None]
    logp = -0.5 * np.log(2.0 * np.pi) - 0.5 * torch.log(var + sigma2) \
        - 0.5 * (y - mu) ** 2 / (var + sigma2)
    return float((torch.logsumexp(logp, dim=1) - math.log(mu.shape[1])).mean())


def train(model, x, y, config):
    """Adam with exponential learning-rate decay and strip-based early stopping.

    Expects normalized data.  Holds out a validation fraction of the training
    set, evaluates the validation tll at the end of every strip, stops after
    `early_stop_strips` consecutive decreasing strips and restores the
    best-validation parameters.  Returns (model, history); history rows are
    {iteration, elbo, lr, val_tll, wall_ms}.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    history = []
    if config.iterations == 0:
        return model, history
    n = x.shape[0]
    gen = np.random.default_rng(rng.derive_seed(config.seed, 0xA11))
    use_val = config.val_fraction > 0.0 and n >= 10
    if use_val:
        n_val = max(1, int(round(config.val_fraction * n)))
        perm = gen.permutation(n)
        val_idx, train_idx = perm[:n_val], perm[n_val:]
        x_val, y_val = x[val_idx], y[val_idx]
        x_tr, y_tr = x[train_idx], y[train_idx]
    else:
        train_idx = np.arange(n)
        x_tr, y_tr = x, y
    n_tr = x_tr.shape[0]
    x_tr_t = as_tensor(x_tr)
    y_tr_t = as_tensor(y_tr)
    entries = trainable_entries(model)
    if config.freeze:
        entries = [(n, t) for n, t in entries
                   if not any(n.startswith(p) for p in config.freeze)]
    opt = Adam(entries)
    objective_fn = elbo if config.estimator == "analytic" else elbo_sampled_fm
    if config.estimator not in ("analytic", "sampled"):
        raise ValueError(f"unknown estimator {config.estimator!r}")
    val_seed = rng.derive_seed(config.seed, 0x7A1)
    best_val = -np.inf
    best_vec = None
    consecutive_drops = 0
    prev_val = None
    for t in range(config.iterations):
        t0 = time.perf_counter()
        if n_tr <= config.minibatch:
            ids = np.arange(n_tr)
        else:
            ids = np.sort(gen.choice(n_tr, size=config.minibatch, replace=False))
        xb, yb = x_tr_t[ids], y_tr_t[ids]
        lr = config.learning_rate * config.decay_rate ** (t / config.decay_steps)
        seed_t = rng.derive_seed(config.seed, 1, t)

        def objective(m, _xb=xb, _yb=yb, _ids=ids, _seed=seed_t):
            return -objective_fn(m, _xb, _yb, config.num_samples, _seed, n_tr, ids=_ids)

        try:
            neg, grads = _grad_list(model, objective, entries)
        except RuntimeError as exc:
            raise RuntimeError(
                f"training aborted at iteration {t}: {exc}"
            ) from exc
        opt.step(grads, lr)
        entry = {
            "iteration": t,
            "elbo": -neg,
            "lr": lr,
            "val_tll": None,
            "wall_ms": (time.perf_counter() - t0) * 1e3,
        }
        if use_val and (t + 1) % config.strip_length == 0:
            vt = validation_tll(model, x_val, y_val, config.val_samples, val_seed)
            entry["val_tll"] = vt
            if vt > best_val:
                best_val = vt
                best_vec = flatten_params(model)
            if prev_val is not None and vt < prev_val:
                consecutive_drops += 1
            else:
                consecutive_drops = 0
            prev_val = vt
            history.append(entry)
            if consecutive_drops >= config.early_stop_strips:
                break
            continue
        history.append(entry)
    if best_vec is not None:
        unflatten_params(model, best_vec)
    return model, history


def warm_start_fully_coupled(mf_model):
    """Fully-coupled copy of a mean-field model.

    The MF diagonal blocks are embedded into the dense factor; every other
    block starts at zero, so the initial FC posterior equals the MF one.
    """
    from .kernel import KernelParams

    fc_factor = variational.to_fully_coupled(mf_model.factor)
    cloned_kernels = []
    for kp in mf_model.kernels:
        k2 = KernelParams(kp.input_dim)
        with torch.no_grad():
            k2.log_lengthscales.copy_(kp.log_lengthscales.detach())
            k2.log_variance.copy_(kp.log_variance.detach())
        cloned_kernels.append(k2)
    out = model_mod.DGPModel(
        mf_model.arch,
        cloned_kernels,
        [z.detach().clone() for z in mf_model.inducing],
        [w.detach().clone() for w in mf_model.mean_maps],
        fc_factor,
        jitter=mf_model.jitter,
    )
    with torch.no_grad():
        out.log_noise.copy_(mf_model.log_noise.detach())
    return out
