"""Ray generation, stratified cone sampling, volume compositing, and the loss.

Rays follow the synthetic-dataset convention: the camera looks along -z in its
own frame, +x right, +y up. Compositing accumulates sample colors weighted by
alpha and transmittance, with a configurable background filling the residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoding import cone_covariance, sh_encode
from .model import FieldParams, field_backward, field_forward

FOOTPRINT_FACTOR = 2.0 / np.sqrt(12.0)  # pixel-width multiplier for the cone radius


@dataclass
class RayBundle:
    """A batch of rays: origins/directions (R, 3), per-unit-distance footprint
    radius (R,), and sampling bounds (R,)."""

    origins: np.ndarray
    directions: np.ndarray
    radii: np.ndarray
    near: np.ndarray
    far: np.ndarray

    def __post_init__(self):
        norms = np.linalg.norm(self.directions, axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("ray directions must be unit length")
        if np.any(self.far <= self.near) or np.any(self.near < 0):
            raise ValueError("rays require far > near >= 0")
        if np.any(self.radii <= 0):
            raise ValueError("footprint radius must be positive")

    def __len__(self):
        return self.origins.shape[0]


@dataclass
class SampleBatch:
    """Per-ray stratified segments and the field inputs derived from them.

    t_bounds: (R, N+1) segment boundaries; t_eval: (R, N) jittered evaluation
    distances inside each segment; deltas: (R, N); positions: (R, N, 3);
    cov_triu: (R, N, 6) frustum covariance triangles per segment.
    """

    t_bounds: np.ndarray
    t_eval: np.ndarray
    deltas: np.ndarray
    positions: np.ndarray
    cov_triu: np.ndarray


@dataclass
class RenderOutput:
    color: np.ndarray  # (R, 3)
    weights: np.ndarray  # (R, N)
    transmittance: np.ndarray  # (R, N)
    opacity: np.ndarray  # (R,)


def generate_ray(camera, pixel, jitter=(0.0, 0.0)):
    """Single pinhole ray through pixel (u, v) offset by jitter in [0, 1)^2."""
    u, v = pixel
    if not (0 <= u < camera.width and 0 <= v < camera.height):
        raise ValueError(f"pixel {pixel} outside {camera.width}x{camera.height} image")
    bundle = generate_rays(
        camera,
        np.array([[u, v]], dtype=np.float64),
        np.array([jitter], dtype=np.float64),
    )
    return bundle


def generate_rays(camera, pixels, jitter, near=None, far=None) -> RayBundle:
    """Rays for an array of pixel coordinates (K, 2) with jitter (K, 2)."""
    pixels = np.asarray(pixels, dtype=np.float64)
    jitter = np.broadcast_to(np.asarray(jitter, dtype=np.float64), pixels.shape)
    u = pixels[:, 0] + jitter[:, 0]
    v = pixels[:, 1] + jitter[:, 1]
    dirs_cam = np.stack(
        [
            (u - camera.cx) / camera.fx,
            -(v - camera.cy) / camera.fy,
            -np.ones_like(u),
        ],
        axis=-1,
    )
    rot = camera.c2w[:3, :3]
    dirs = dirs_cam @ rot.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.c2w[:3, 3], dirs.shape).copy()
    radii = np.full(len(dirs), FOOTPRINT_FACTOR / camera.fx)
    n = np.full(len(dirs), camera.near if near is None else near, dtype=np.float64)
    f = np.full(len(dirs), camera.far if far is None else far, dtype=np.float64)
    return RayBundle(origins=origins, directions=dirs, radii=radii, near=n, far=f)


def pixel_grid(width, height):
    """All (u, v) pixel coordinates of an image, row-major."""
    vs, us = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return np.stack([us.ravel(), vs.ravel()], axis=-1)


def stratified_samples(rays: RayBundle, n_samples: int, rng=None) -> SampleBatch:
    """One jittered evaluation point per equal segment of [near, far].

    rng=None selects deterministic midpoints (evaluation mode).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    n_rays = len(rays)
    edges = np.linspace(0.0, 1.0, n_samples + 1)
    span = (rays.far - rays.near)[:, None]
    t_bounds = rays.near[:, None] + span * edges[None, :]  # (R, N+1)
    if rng is None:
        u = np.full((n_rays, n_samples), 0.5)
    else:
        u = rng.random((n_rays, n_samples))
    t_eval = rays.near[:, None] + span * (np.arange(n_samples)[None, :] + u) / n_samples
    deltas = t_bounds[:, 1:] - t_bounds[:, :-1]
    positions = rays.origins[:, None, :] + t_eval[..., None] * rays.directions[:, None, :]
    frustum = cone_covariance(
        rays.origins[:, None, :],
        rays.directions[:, None, :],
        t_bounds[:, :-1],
        t_bounds[:, 1:],
        rays.radii[:, None],
    )
    return SampleBatch(t_bounds=t_bounds, t_eval=t_eval, deltas=deltas,
                       positions=positions, cov_triu=frustum.cov_triu)


def composite(sigma, color, deltas, background) -> RenderOutput:
    """Front-to-back alpha compositing over per-ray samples.

    sigma: (R, N) nonnegative densities; color: (R, N, 3); deltas: (R, N);
    background: 3-vector filling the residual transmittance.
    """
    sigma = np.asarray(sigma)
    deltas = np.asarray(deltas)
    color = np.asarray(color)
    if np.any(sigma < 0):
        raise ValueError("negative density")
    if np.any(deltas <= 0):
        raise ValueError("nonpositive segment length")
    background = np.asarray(background, dtype=color.dtype)
    tau = sigma * deltas
    accum = np.cumsum(tau, axis=-1)
    trans = np.exp(-np.concatenate([np.zeros_like(accum[:, :1]), accum[:, :-1]], axis=-1))
    alpha = 1.0 - np.exp(-tau)
    weights = trans * alpha
    opacity = weights.sum(axis=-1)
    out_color = np.einsum("rn,rnc->rc", weights, color) + (1.0 - opacity)[:, None] * background
    return RenderOutput(color=out_color, weights=weights, transmittance=trans, opacity=opacity)


def composite_backward(output: RenderOutput, sigma, color, deltas, background, d_color_out):
    """Per-sample gradients (dL/dsigma, dL/dcolor) of the compositing step.

    dC/dc_i = w_i; dC/dsigma_i = delta_i * (T_{i+1} c_i - sum_{j>i} w_j c_j - T_last bg).
    """
    sigma = np.asarray(sigma)
    deltas = np.asarray(deltas)
    color = np.asarray(color)
    background = np.asarray(background, dtype=color.dtype)
    d_color_out = np.asarray(d_color_out)
    weights = output.weights
    trans = output.transmittance
    alpha_c = weights[..., None] * color  # (R, N, 3)
    # suffix[i] = sum_{j > i} w_j c_j + T_last * bg
    suffix = np.cumsum(alpha_c[:, ::-1, :], axis=1)[:, ::-1, :]
    suffix = np.concatenate([suffix[:, 1:, :], np.zeros_like(suffix[:, :1, :])], axis=1)
    t_last = (1.0 - output.opacity)[:, None]
    suffix = suffix + t_last[..., None] * background
    trans_next = trans * np.exp(-sigma * deltas)  # T_{i+1}
    d_sigma = deltas * np.einsum(
        "rnc,rc->rn", trans_next[..., None] * color - suffix, d_color_out
    )
    d_color = weights[..., None] * d_color_out[:, None, :]
    return d_sigma, d_color


def l2_loss(pred, target):
    """Summed-over-channels squared error, averaged over the ray batch."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError("prediction/target shape mismatch")
    diff = pred - target
    n = pred.shape[0] if pred.ndim > 1 else 1
    loss = float(np.sum(diff * diff) / n)
    return loss, 2.0 * diff / n


def render_rays(params: FieldParams, rays: RayBundle, n_samples: int, background,
                rng=None, want_cache=False):
    """Full forward path: sample, encode, evaluate the field, composite."""
    batch = stratified_samples(rays, n_samples, rng)
    n_rays = len(rays)
    flat_x = batch.positions.reshape(-1, 3).astype(params.dtype)
    flat_cov = batch.cov_triu.reshape(-1, 6).astype(params.dtype)
    xi = sh_encode(rays.directions).astype(params.dtype)
    flat_xi = np.repeat(xi, n_samples, axis=0)
    sigma, color, field_cache = field_forward(params, flat_x, flat_cov, flat_xi)
    sigma = sigma.reshape(n_rays, n_samples)
    color = color.reshape(n_rays, n_samples, 3)
    out = composite(sigma, color, batch.deltas, background)
    if not want_cache:
        return out, None
    cache = {
        "batch": batch,
        "field": field_cache,
        "sigma": sigma,
        "color": color,
        "output": out,
        "background": np.asarray(background),
    }
    return out, cache


def render_backward(params: FieldParams, cache, d_color_out) -> dict:
    """Gradients of all field parameters given dL/d(rendered colors)."""
    batch = cache["batch"]
    d_sigma, d_color = composite_backward(
        cache["output"], cache["sigma"], cache["color"], batch.deltas,
        cache["background"], d_color_out,
    )
    return field_backward(
        params,
        cache["field"],
        d_sigma.reshape(-1).astype(params.dtype),
        d_color.reshape(-1, 3).astype(params.dtype),
    )


def render_image(params: FieldParams, camera, n_samples: int, background,
                 scene_transform=None, chunk=8192):
    """Deterministic full-image render (midpoint sampling), chunked over pixels."""
    pixels = pixel_grid(camera.width, camera.height)
    img = np.empty((camera.height * camera.width, 3), dtype=np.float64)
    for start in range(0, len(pixels), chunk):
        pix = pixels[start : start + chunk]
        rays = generate_rays(camera, pix, jitter=np.array([[0.5, 0.5]]))
        if scene_transform is not None:
            rays = scene_transform.apply_rays(rays)
        out, _ = render_rays(params, rays, n_samples, background, rng=None)
        img[start : start + len(pix)] = out.color
    return img.reshape(camera.height, camera.width, 3)
