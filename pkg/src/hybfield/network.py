"""The two shallow field heads: density (position features -> sigma, embedding)
and color (embedding + direction features -> rgb), with explicit backward passes.

ReLU uses subgradient 0 at exactly 0; the density pre-activation is clamped to
[-15, 15] before the exponential, with zero gradient outside the clamp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SIGMA_CLAMP = 15.0


@dataclass
class MlpParams:
    """Stacked affine layers; weights are (out, in), applied as x @ W.T + b."""

    weights: list
    biases: list

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]


def init_mlp(layer_dims: list[int], rng: np.random.Generator, dtype=np.float64) -> MlpParams:
    """He-uniform weights (+-sqrt(6/fan_in)), zero biases; deterministic given the rng."""
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return MlpParams(weights=weights, biases=biases)


def _affine_stack_forward(x, params: MlpParams):
    """All layers with ReLU between them, linear output. Returns output and cache."""
    activations = [x]
    pre = None
    n = len(params.weights)
    h = x
    pres = []
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        pre = h @ w.T + b
        pres.append(pre)
        h = np.maximum(pre, 0.0) if i < n - 1 else pre
        activations.append(h)
    return h, {"activations": activations, "pres": pres}


def _affine_stack_backward(cache, d_out, params: MlpParams):
    """Reverse pass through the stack; returns (weight grads, bias grads, d_input)."""
    acts = cache["activations"]
    pres = cache["pres"]
    n = len(params.weights)
    d_ws = [None] * n
    d_bs = [None] * n
    d = d_out
    for i in range(n - 1, -1, -1):
        if i < n - 1:
            d = d * (pres[i] > 0)  # ReLU subgradient, 0 at 0
        d_ws[i] = d.T @ acts[i]
        d_bs[i] = d.sum(axis=0)
        d = d @ params.weights[i]
    return d_ws, d_bs, d


def density_forward(gamma_hyb, params: MlpParams):
    """Position features -> (sigma_raw, sigma, embedding e); output unit 0 is the density logit."""
    gamma_hyb = np.atleast_2d(np.asarray(gamma_hyb))
    if gamma_hyb.shape[-1] != params.weights[0].shape[1]:
        raise ValueError(
            f"density input width {gamma_hyb.shape[-1]} != expected {params.weights[0].shape[1]}"
        )
    out, cache = _affine_stack_forward(gamma_hyb, params)
    sigma_raw = out[:, 0]
    clamped = np.clip(sigma_raw, -SIGMA_CLAMP, SIGMA_CLAMP)
    sigma = np.exp(clamped)
    embedding = out[:, 1:]
    cache["sigma_raw"] = sigma_raw
    cache["sigma"] = sigma
    return sigma_raw, sigma, embedding, cache


def density_backward(cache, d_sigma, d_embedding, params: MlpParams):
    """Gradients of the density head; returns (d_weights, d_biases, d_gamma_hyb)."""
    sigma_raw = cache["sigma_raw"]
    inside = (sigma_raw >= -SIGMA_CLAMP) & (sigma_raw <= SIGMA_CLAMP)
    d_raw = d_sigma * cache["sigma"] * inside
    d_out = np.concatenate([d_raw[:, None], d_embedding], axis=-1)
    return _affine_stack_backward(cache, d_out, params)


def color_forward(embedding, xi_d, params: MlpParams):
    """(embedding, direction features) -> rgb in (0,1)^3 via a sigmoid output."""
    embedding = np.atleast_2d(np.asarray(embedding))
    xi_d = np.atleast_2d(np.asarray(xi_d)).astype(embedding.dtype, copy=False)
    x = np.concatenate([embedding, xi_d], axis=-1)
    if x.shape[-1] != params.weights[0].shape[1]:
        raise ValueError(
            f"color input width {x.shape[-1]} != expected {params.weights[0].shape[1]}"
        )
    out, cache = _affine_stack_forward(x, params)
    color = 1.0 / (1.0 + np.exp(-out))
    cache["color"] = color
    cache["embed_dim"] = embedding.shape[-1]
    return color, cache


def color_backward(cache, d_color, params: MlpParams):
    """Gradients of the color head; returns (d_weights, d_biases, d_embedding)."""
    c = cache["color"]
    d_out = d_color * c * (1.0 - c)
    d_ws, d_bs, d_in = _affine_stack_backward(cache, d_out, params)
    return d_ws, d_bs, d_in[:, : cache["embed_dim"]]
