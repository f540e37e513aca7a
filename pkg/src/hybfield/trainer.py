"""End-to-end optimization: ray batching, Adam, the LR schedule, and the
training loop. Deterministic given the seed when reductions are single-threaded.
"""

from __future__ import annotations

import numpy as np

from .config import RunConfig, TrainConfig
from .data import Dataset
from .model import FieldParams, param_counts
from .render import RayBundle, generate_rays, l2_loss, render_backward, render_image, render_rays


class TrainingError(RuntimeError):
    """Raised when training hits non-finite values; carries step diagnostics."""


class AdamState:
    """First/second moments per named parameter plus the shared step counter."""

    def __init__(self, params: FieldParams):
        self.m = {name: np.zeros_like(arr) for name, arr in params.named_arrays()}
        self.v = {name: np.zeros_like(arr) for name, arr in params.named_arrays()}
        self.t = 0


def adam_step(params: FieldParams, grads: dict, state: AdamState, lr_t: float,
              cfg: TrainConfig):
    """Bias-corrected Adam update over every parameter (no lazy skipping).

    Hash tables use cfg.eps_encoding; every network parameter uses cfg.eps_mlp.
    """
    state.t += 1
    t = state.t
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, arr in params.named_arrays():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name} at optimizer step {t}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        eps = cfg.eps_encoding if name.startswith("encoding.table") else cfg.eps_mlp
        arr -= (lr_t / c1) * m / (np.sqrt(v / c2) + eps)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Base LR times every milestone multiplier whose step has been reached."""
    lr = cfg.lr
    for milestone, mult in cfg.milestones():
        if step >= milestone:
            lr *= mult
    return lr


def sample_ray_batch(dataset: Dataset, batch_rays: int, rng: np.random.Generator):
    """Uniform i.i.d. pixel draws across all training images.

    Returns (rays in the normalized scene frame, target colors (B, 3)).
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    n_views = len(dataset)
    h, w = dataset.targets[0].shape[:2]
    img_idx = rng.integers(0, n_views, size=batch_rays)
    us = rng.integers(0, w, size=batch_rays)
    vs = rng.integers(0, h, size=batch_rays)
    jitter = rng.random((batch_rays, 2))

    origins = np.empty((batch_rays, 3))
    directions = np.empty((batch_rays, 3))
    radii = np.empty(batch_rays)
    near = np.empty(batch_rays)
    far = np.empty(batch_rays)
    targets = np.empty((batch_rays, 3))
    for view in np.unique(img_idx):
        sel = np.nonzero(img_idx == view)[0]
        cam = dataset.cameras[view]
        pix = np.stack([us[sel], vs[sel]], axis=-1)
        bundle = generate_rays(cam, pix, jitter[sel])
        origins[sel] = bundle.origins
        directions[sel] = bundle.directions
        radii[sel] = bundle.radii
        near[sel] = bundle.near
        far[sel] = bundle.far
        targets[sel] = dataset.targets[view][vs[sel], us[sel]]
    rays = RayBundle(origins=origins, directions=directions, radii=radii, near=near, far=far)
    return dataset.scene_transform.apply_rays(rays), targets


def validation_psnr(params: FieldParams, dataset: Dataset, config: RunConfig) -> float:
    """Mean PSNR over the validation views, rendered deterministically."""
    from .evaluation import psnr

    vals = []
    for cam, target in zip(dataset.cameras, dataset.targets):
        img = render_image(params, cam, config.render.n_samples,
                           config.render.background_color,
                           scene_transform=dataset.scene_transform)
        vals.append(psnr(img, target))
    return float(np.mean(vals))


def train(train_set: Dataset, val_set: Dataset | None, params: FieldParams,
          config: RunConfig, callbacks=None):
    """Run the full optimization; returns (params, metrics records).

    Each record carries step, lr, loss and (periodically) psnr_val.
    """
    tcfg = config.train
    state = AdamState(params)
    rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 1]))
    metrics = []
    background = np.asarray(config.render.background_color)

    def emit(record):
        metrics.append(record)
        for cb in callbacks or ():
            cb(record)

    for step in range(tcfg.total_steps):
        lr_t = lr_at(step, tcfg)
        rays, targets = sample_ray_batch(train_set, tcfg.batch_rays, rng)
        out, cache = render_rays(params, rays, config.render.n_samples, background,
                                 rng=rng, want_cache=True)
        loss, d_pred = l2_loss(out.color, targets)
        if not np.isfinite(loss):
            raise TrainingError(
                f"non-finite loss at step {step}: lr={lr_t:g}, "
                f"opacity range [{out.opacity.min():g}, {out.opacity.max():g}]"
            )
        grads = render_backward(params, cache, d_pred)
        adam_step(params, grads, state, lr_t, tcfg)

        record = None
        if step % tcfg.log_every == 0 or step == tcfg.total_steps - 1:
            record = {"step": step, "lr": lr_t, "loss": loss}
        want_val = val_set is not None and len(val_set) > 0 and (
            (step + 1) % tcfg.val_every == 0 or step == tcfg.total_steps - 1
        )
        if want_val:
            if record is None:
                record = {"step": step, "lr": lr_t, "loss": loss}
            record["psnr_val"] = validation_psnr(params, val_set, config)
        if record is not None:
            emit(record)
    return params, metrics, state


def describe_params(params: FieldParams) -> dict:
    counts = param_counts(params)
    counts["mode"] = params.config.encoding.mode
    return counts
