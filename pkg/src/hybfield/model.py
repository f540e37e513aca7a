"""Full field model: encoder plus density/color heads, with a flat named-parameter
view used by the optimizer, the checkpoint format, and gradient checking.

Parameter order (fixed, documented in the checkpoint manifest):
  encoding.table_00 .. encoding.table_{L-1}, encoding.lpe_weight, encoding.lpe_bias,
  density.w0, density.b0, ..., color.w0, color.b0, ...
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .encoding import (
    EncoderParams,
    HashGridConfig,
    encode_backward,
    encode_forward,
    encoder_init,
    pe_dim,
)
from .network import (
    MlpParams,
    color_backward,
    color_forward,
    density_backward,
    density_forward,
    init_mlp,
)
from . import encoding as enc


@dataclass
class FieldParams:
    """All trainable state of the field."""

    config: RunConfig
    encoder: EncoderParams
    density_mlp: MlpParams
    color_mlp: MlpParams
    dtype: np.dtype

    def named_arrays(self):
        """(name, array) pairs in the documented fixed order."""
        out = []
        for level, tab in enumerate(self.encoder.grid.tables):
            out.append((f"encoding.table_{level:02d}", tab))
        if self.encoder.lpe is not None:
            out.append(("encoding.lpe_weight", self.encoder.lpe.weight))
            out.append(("encoding.lpe_bias", self.encoder.lpe.bias))
        for tag, mlp in (("density", self.density_mlp), ("color", self.color_mlp)):
            for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
                out.append((f"{tag}.w{i}", w))
                out.append((f"{tag}.b{i}", b))
        return out

    def set_array(self, name: str, value: np.ndarray):
        for key, arr in self.named_arrays():
            if key == name:
                arr[...] = value
                return
        raise KeyError(name)


def density_input_dim(mode: str, grid: HashGridConfig, n_freqs: int) -> int:
    fine = grid.out_dim
    return fine if mode == "hash_only" else pe_dim(n_freqs) + fine


def build_field(config: RunConfig, rng: np.random.Generator | None = None,
                dtype=None) -> FieldParams:
    """Construct and initialize all parameters; enforces n_min <= 2**n_freqs."""
    e = config.encoding
    if e.n_min > 2**e.n_freqs:
        raise ValueError(
            f"coarsest grid resolution n_min={e.n_min} exceeds 2^n_freqs={2**e.n_freqs}; "
            "raise encoding.n_freqs or lower encoding.n_min"
        )
    if rng is None:
        rng = np.random.default_rng(config.train.seed)
    if dtype is None:
        dtype = np.float32 if config.train.precision == "float32" else np.float64
    dtype = np.dtype(dtype)
    grid_cfg = HashGridConfig(
        n_min=e.n_min, n_max=e.n_max, n_levels=e.n_levels,
        table_size=e.table_size, feat_dim=e.feat_dim,
    )
    encoder = encoder_init(e.mode, grid_cfg, e.n_freqs, e.cov_feature_scale, rng, dtype)
    m = config.mlp
    d_in = density_input_dim(e.mode, grid_cfg, e.n_freqs)
    density_dims = [d_in] + [m.hidden_width] * m.density_hidden_layers + [1 + m.embedding_dim]
    color_dims = [m.embedding_dim + enc.SH_DIM] + [m.hidden_width] * m.color_hidden_layers + [3]
    density_mlp = init_mlp(density_dims, rng, dtype)
    color_mlp = init_mlp(color_dims, rng, dtype)
    return FieldParams(config=config, encoder=encoder, density_mlp=density_mlp,
                       color_mlp=color_mlp, dtype=dtype)


def param_counts(params: FieldParams) -> dict:
    """Per-component trainable parameter counts."""
    counts = {
        "hash_grid": params.encoder.grid.n_params,
        "lpe": params.encoder.lpe.n_params if params.encoder.lpe is not None else 0,
        "density_mlp": params.density_mlp.n_params,
        "color_mlp": params.color_mlp.n_params,
    }
    counts["total"] = sum(counts.values())
    return counts


def field_forward(params: FieldParams, x, cov_triu, xi_d):
    """Evaluate the field on a flat sample batch.

    x: (S, 3) positions; cov_triu: (S, 6) frustum covariance triangles;
    xi_d: (S, 16) direction features. Returns (sigma, color, cache).
    """
    gamma_hyb, enc_cache = encode_forward(x, cov_triu, params.encoder)
    sigma_raw, sigma, embedding, den_cache = density_forward(gamma_hyb, params.density_mlp)
    color, col_cache = color_forward(embedding, xi_d, params.color_mlp)
    cache = {"enc": enc_cache, "den": den_cache, "col": col_cache}
    return sigma, color, cache


def field_backward(params: FieldParams, cache, d_sigma, d_color) -> dict:
    """Exact reverse pass; returns gradients keyed like named_arrays()."""
    col_ws, col_bs, d_embed = color_backward(cache["col"], d_color, params.color_mlp)
    den_ws, den_bs, d_gamma = density_backward(cache["den"], d_sigma, d_embed, params.density_mlp)
    enc_grads = encode_backward(cache["enc"], d_gamma, params.encoder)
    grads = {}
    for level in range(params.encoder.grid.config.n_levels):
        grads[f"encoding.table_{level:02d}"] = enc_grads[f"table_{level:02d}"]
    if params.encoder.lpe is not None:
        grads["encoding.lpe_weight"] = enc_grads["lpe_weight"]
        grads["encoding.lpe_bias"] = enc_grads["lpe_bias"]
    for tag, ws, bs in (("density", den_ws, den_bs), ("color", col_ws, col_bs)):
        for i, (w, b) in enumerate(zip(ws, bs)):
            grads[f"{tag}.w{i}"] = w
            grads[f"{tag}.b{i}"] = b
    return grads


def zero_grads(params: FieldParams) -> dict:
    return {name: np.zeros_like(arr) for name, arr in params.named_arrays()}


def accumulate(into: dict, grads: dict):
    for k, v in grads.items():
        into[k] += v
    return into
