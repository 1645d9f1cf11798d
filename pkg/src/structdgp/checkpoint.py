"""Flat-file model checkpoints.

Layout (all integers little-endian uint32, all reals little-endian float64):

  magic   b"SDGP"
  version uint32 (currently 1)
  structure uint32 (0 = mf, 1 = star, 2 = fc)
  L, M, D uint32
  widths  uint32[L]
  jitter  float64
  then per layer l = 0..L-1:
      d_l            uint32 (layer input dimension)
      log_lengthscales float64[d_l]
      log_variance     float64
      Z                float64[M * d_l] (row-major)
  log_noise float64
  mu        float64[T * M]
  factor arrays in the canonical trainable order (sizes implied by structure)
  mean maps W_l float64[d_l * T_l] (row-major), l = 0..L-2
"""

import struct

import numpy as np
import torch

from .kernel import KernelParams
from .linalg import DTYPE
from .model import DGPModel
from .variational import (
    FULLY_COUPLED,
    MEAN_FIELD,
    STRIPES_ARROW,
    Architecture,
    VariationalFactor,
)

MAGIC = b"SDGP"
VERSION = 1
_STRUCT_CODES = {MEAN_FIELD: 0, STRIPES_ARROW: 1, FULLY_COUPLED: 2}
_CODES_STRUCT = {v: k for k, v in _STRUCT_CODES.items()}


def _write_u32(fh, *vals):
    fh.write(struct.pack("<" + "I" * len(vals), *vals))


def _write_f64(fh, arr):
    fh.write(np.ascontiguousarray(np.asarray(arr, dtype="<f8")).tobytes())


def _read_u32(fh, n=1):
    vals = struct.unpack("<" + "I" * n, fh.read(4 * n))
    return vals[0] if n == 1 else vals


def _read_f64(fh, count):
    out = np.frombuffer(fh.read(8 * count), dtype="<f8").copy()
    if out.size != count:
        raise ValueError("truncated checkpoint")
    return out


def save_checkpoint(model, path):
    arch = model.arch
    dims = model.layer_input_dims()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        _write_u32(fh, VERSION, _STRUCT_CODES[model.structure])
        _write_u32(fh, arch.layers, arch.num_inducing, arch.input_dim)
        _write_u32(fh, *arch.widths)
        _write_f64(fh, [model.jitter])
        for l in range(arch.layers):
            _write_u32(fh, dims[l])
            _write_f64(fh, model.kernels[l].log_lengthscales.detach().numpy())
            _write_f64(fh, [float(model.kernels[l].log_variance)])
            _write_f64(fh, model.inducing[l].detach().numpy().ravel())
        _write_f64(fh, [float(model.log_noise)])
        _write_f64(fh, model.factor.mu.detach().numpy())
        for _, tensor in model.factor.trainable_tensors()[1:]:  # skip mu
            _write_f64(fh, tensor.detach().numpy().ravel())
        for l in range(arch.layers - 1):
            _write_f64(fh, model.mean_maps[l].detach().numpy().ravel())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError("not a structdgp checkpoint")
        version, code = _read_u32(fh, 2)
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        structure = _CODES_STRUCT[code]
        layers, m, d = _read_u32(fh, 3)
        widths = _read_u32(fh, layers)
        widths = (widths,) if isinstance(widths, int) else tuple(widths)
        jitter = float(_read_f64(fh, 1)[0])
        arch = Architecture(layers, widths, m, d)
        kernels, inducing = [], []
        for l in range(layers):
            d_l = _read_u32(fh)
            kp = KernelParams(d_l)
            with torch.no_grad():
                kp.log_lengthscales.copy_(torch.from_numpy(_read_f64(fh, d_l)).to(DTYPE))
                kp.log_variance.copy_(torch.tensor(_read_f64(fh, 1)[0], dtype=DTYPE))
            kernels.append(kp)
            inducing.append(torch.from_numpy(_read_f64(fh, m * d_l).reshape(m, d_l)).to(DTYPE))
        log_noise = _read_f64(fh, 1)[0]
        factor = VariationalFactor(arch, structure)
        with torch.no_grad():
            factor.mu.copy_(torch.from_numpy(_read_f64(fh, factor.mu.numel())).to(DTYPE))
            for _, tensor in factor.trainable_tensors()[1:]:
                vals = _read_f64(fh, tensor.numel())
                tensor.copy_(torch.from_numpy(vals.reshape(tensor.shape)).to(DTYPE))
        mean_maps = []
        dims = [d] + [widths[l] for l in range(layers - 1)]
        for l in range(layers - 1):
            w = _read_f64(fh, dims[l] * widths[l]).reshape(dims[l], widths[l])
            mean_maps.append(torch.from_numpy(w).to(DTYPE))
    model = DGPModel(arch, kernels, inducing, mean_maps, factor, jitter=jitter)
    with torch.no_grad():
        model.log_noise.copy_(torch.tensor(log_noise, dtype=DTYPE))
    return model
