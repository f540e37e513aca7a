"""Dataset ingestion and procedural oracle scenes.

Supports the synthetic transforms.json camera format (one JSON per split plus
PNG frames) and fully procedural datasets rendered from closed-form density /
color fields by high-resolution quadrature. World coordinates are mapped into
the encoder's unit cube by a similarity transform.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .config import RunConfig


class DataError(ValueError):
    """Raised for malformed dataset inputs."""


@dataclass
class Camera:
    c2w: np.ndarray  # (4, 4) camera-to-world
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 2.0
    far: float = 6.0

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64)
        if self.c2w.shape != (4, 4):
            raise DataError("camera-to-world matrix must be 4x4")
        rot = self.c2w[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-4):
            raise DataError("camera rotation block is not orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise DataError("focal lengths must be positive")


@dataclass
class SceneTransform:
    """Uniform-scale similarity p' = scale * p + offset mapping the world AABB
    into the unit cube with a margin."""

    scale: float
    offset: np.ndarray

    def apply_points(self, pts):
        return self.scale * np.asarray(pts) + self.offset

    def apply_rays(self, rays):
        from .render import RayBundle

        dirs = rays.directions / np.linalg.norm(rays.directions, axis=-1, keepdims=True)
        return RayBundle(
            origins=self.apply_points(rays.origins),
            directions=dirs,
            radii=rays.radii.copy(),
            near=rays.near * self.scale,
            far=rays.far * self.scale,
        )

    def inverse(self) -> "SceneTransform":
        return SceneTransform(scale=1.0 / self.scale, offset=-self.offset / self.scale)


def normalize_scene(cameras, aabb_min, aabb_max, margin: float = 0.05) -> SceneTransform:
    """Similarity transform placing the world AABB into [margin, 1-margin]^3."""
    if len(cameras) < 1:
        raise DataError("need at least one camera")
    lo = np.asarray(aabb_min, dtype=np.float64)
    hi = np.asarray(aabb_max, dtype=np.float64)
    extent = hi - lo
    if np.any(extent <= 0):
        raise DataError("degenerate AABB")
    scale = (1.0 - 2.0 * margin) / float(extent.max())
    center = 0.5 * (lo + hi)
    offset = 0.5 - scale * center
    return SceneTransform(scale=scale, offset=offset)


@dataclass
class Dataset:
    cameras: list
    images: list  # (H, W, 4) float RGBA in [0, 1]
    targets: list  # (H, W, 3) float RGB composited over the background
    scene_transform: SceneTransform
    split: str
    background: np.ndarray

    def __post_init__(self):
        if len(self.cameras) != len(self.images) or len(self.images) != len(self.targets):
            raise DataError("cameras/images/targets length mismatch")
        if self.images:
            shape = self.images[0].shape
            if any(img.shape != shape for img in self.images):
                raise DataError("all images must share dimensions")

    def __len__(self):
        return len(self.cameras)


# ---------------------------------------------------------------------------
# transforms.json ingestion
# ---------------------------------------------------------------------------


def load_transforms(path, width: int | None = None, height: int | None = None):
    """Read a transforms.json; returns (cameras, image_paths).

    Image dimensions are taken from the first referenced PNG unless given.
    """
    path = Path(path)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise DataError(f"failed to parse {path}: {exc}") from exc
    if "camera_angle_x" not in doc:
        raise DataError(f"{path}: missing field camera_angle_x")
    if "frames" not in doc or not isinstance(doc["frames"], list):
        raise DataError(f"{path}: missing frames list")
    angle = float(doc["camera_angle_x"])
    image_paths = []
    matrices = []
    for i, frame in enumerate(doc["frames"]):
        if "transform_matrix" not in frame:
            raise DataError(f"{path}: frame {i} missing transform_matrix")
        if "file_path" not in frame:
            raise DataError(f"{path}: frame {i} missing file_path")
        mat = np.asarray(frame["transform_matrix"], dtype=np.float64)
        if mat.shape != (4, 4):
            raise DataError(f"{path}: frame {i} transform_matrix is not 4x4")
        if abs(np.linalg.det(mat)) < 1e-12:
            raise DataError(f"{path}: frame {i} transform_matrix is not invertible")
        matrices.append(mat)
        fp = frame["file_path"]
        img_path = path.parent / fp
        if img_path.suffix == "":
            img_path = img_path.with_suffix(".png")
        image_paths.append(img_path)

    if width is None or height is None:
        if not image_paths:
            raise DataError(f"{path}: no frames and no explicit image size")
        with Image.open(image_paths[0]) as im:
            width, height = im.size
    fx = 0.5 * width / math.tan(0.5 * angle)
    cameras = [
        Camera(c2w=m, fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0,
               width=width, height=height)
        for m in matrices
    ]
    return cameras, image_paths


def load_image(path):
    """Decode an 8- or 16-bit PNG to an (H, W, 4) float RGBA array in [0, 1]."""
    try:
        with Image.open(path) as im:
            mode = im.mode
            if mode in ("I;16", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
                rgba = np.stack([arr, arr, arr, np.ones_like(arr)], axis=-1)
                return rgba
            if mode not in ("RGBA", "RGB", "LA", "L"):
                im = im.convert("RGBA")
                mode = "RGBA"
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    if mode == "L":
        arr = np.stack([arr, arr, arr, np.ones_like(arr)], axis=-1)
    elif mode == "LA":
        gray, alpha = arr[..., 0], arr[..., 1]
        arr = np.stack([gray, gray, gray, alpha], axis=-1)
    elif mode == "RGB":
        arr = np.concatenate([arr, np.ones_like(arr[..., :1])], axis=-1)
    return arr


def save_png(path, img):
    """Write an (H, W, 3) float image in [0, 1] as an 8-bit PNG."""
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def composite_target(rgba, background):
    """rgb * a + background * (1 - a)."""
    rgb, a = rgba[..., :3], rgba[..., 3:4]
    return rgb * a + np.asarray(background) * (1.0 - a)


# ---------------------------------------------------------------------------
# analytic scenes
# ---------------------------------------------------------------------------


@dataclass
class AnalyticScene:
    """Closed-form density and color fields used as ground-truth oracles."""

    name: str
    density_fn: object  # (S, 3) -> (S,)
    color_fn: object  # (S, 3) -> (S, 3)


def _soft_sphere_density(x):
    r = np.linalg.norm(x, axis=-1)
    return 8.0 / (1.0 + np.exp((r - 0.8) / 0.08))


def _soft_sphere_color(x):
    c = 0.5 + 0.45 * np.sin(3.0 * x + np.array([0.0, 1.0, 2.0]))
    return np.clip(c, 0.0, 1.0)


def _two_blob_density(x):
    d1 = np.exp(-np.sum((x - np.array([-0.6, 0.0, 0.0])) ** 2, axis=-1) / (2 * 0.3**2))
    d2 = np.exp(-np.sum((x - np.array([0.6, 0.2, 0.0])) ** 2, axis=-1) / (2 * 0.25**2))
    return 12.0 * d1 + 10.0 * d2


def _two_blob_color(x):
    d1 = np.exp(-np.sum((x - np.array([-0.6, 0.0, 0.0])) ** 2, axis=-1) / (2 * 0.3**2))
    d2 = np.exp(-np.sum((x - np.array([0.6, 0.2, 0.0])) ** 2, axis=-1) / (2 * 0.25**2))
    w = d1 + d2 + 1e-12
    c1 = np.array([0.9, 0.35, 0.2])
    c2 = np.array([0.2, 0.45, 0.9])
    return (d1[..., None] * c1 + d2[..., None] * c2) / w[..., None]


def _hard_sphere_density(x):
    return np.where(np.linalg.norm(x, axis=-1) < 0.8, 1e6, 0.0)


def _hard_sphere_color(x):
    return np.broadcast_to(np.array([0.2, 0.5, 0.8]), x.shape).copy()


SCENES = {
    "soft_sphere": AnalyticScene("soft_sphere", _soft_sphere_density, _soft_sphere_color),
    "two_blob": AnalyticScene("two_blob", _two_blob_density, _two_blob_color),
    "hard_sphere": AnalyticScene("hard_sphere", _hard_sphere_density, _hard_sphere_color),
}


def get_scene(name: str) -> AnalyticScene:
    if name not in SCENES:
        raise DataError(f"unknown analytic scene {name!r}; choices: {sorted(SCENES)}")
    return SCENES[name]


def render_analytic(scene: AnalyticScene, camera: Camera, quadrature_n: int,
                    background=(1.0, 1.0, 1.0), chunk: int = 1024):
    """Ground-truth image by midpoint quadrature of the transport integral.

    Deliberately self-contained (does not share code with the renderer) so it
    can serve as an independent oracle for the compositing path.
    """
    if quadrature_n < 1024:
        raise ValueError("quadrature_n must be >= 1024")
    from .render import generate_rays, pixel_grid

    background = np.asarray(background, dtype=np.float64)
    pixels = pixel_grid(camera.width, camera.height)
    img = np.empty((camera.height * camera.width, 3), dtype=np.float64)
    mids = (np.arange(quadrature_n) + 0.5) / quadrature_n
    for start in range(0, len(pixels), chunk):
        pix = pixels[start : start + chunk]
        rays = generate_rays(camera, pix, jitter=np.array([[0.5, 0.5]]))
        t = rays.near[:, None] + (rays.far - rays.near)[:, None] * mids[None, :]
        delta = ((rays.far - rays.near) / quadrature_n)[:, None]
        pts = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
        flat = pts.reshape(-1, 3)
        sigma = scene.density_fn(flat).reshape(t.shape)
        col = scene.color_fn(flat).reshape(t.shape + (3,))
        tau = sigma * delta
        upto = np.cumsum(tau, axis=-1)
        trans = np.exp(-(upto - tau))
        alpha = -np.expm1(-tau)
        w = trans * alpha
        residual = np.exp(-upto[:, -1])
        img[start : start + len(pix)] = (
            np.einsum("rn,rnc->rc", w, col) + residual[:, None] * background
        )
    return img.reshape(camera.height, camera.width, 3)


# ---------------------------------------------------------------------------
# dataset builders
# ---------------------------------------------------------------------------


def look_at_camera(position, target, width, height, fov_x_rad, up=(0.0, 0.0, 1.0),
                   near=2.0, far=6.0) -> Camera:
    """Camera at ``position`` looking at ``target`` (camera -z), +z world up."""
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    z_axis = position - target
    z_axis = z_axis / np.linalg.norm(z_axis)
    up = np.asarray(up, dtype=np.float64)
    x_axis = np.cross(up, z_axis)
    if np.linalg.norm(x_axis) < 1e-8:
        x_axis = np.cross(np.array([0.0, 1.0, 0.0]), z_axis)
    x_axis = x_axis / np.linalg.norm(x_axis)
    y_axis = np.cross(z_axis, x_axis)
    c2w = np.eye(4)
    c2w[:3, 0] = x_axis
    c2w[:3, 1] = y_axis
    c2w[:3, 2] = z_axis
    c2w[:3, 3] = position
    fx = 0.5 * width / math.tan(0.5 * fov_x_rad)
    return Camera(c2w=c2w, fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0,
                  width=width, height=height, near=near, far=far)


def orbit_cameras(n: int, radius: float, width: int, height: int, fov_x_rad: float,
                  near: float, far: float, start_index: int = 0) -> list[Camera]:
    """Deterministic orbit rig: evenly spaced azimuths, cycling elevations."""
    elevations = [0.35, -0.15, 0.6, 0.1]
    cams = []
    golden = (1.0 + 5.0**0.5) / 2.0
    for k in range(start_index, start_index + n):
        az = 2.0 * math.pi * ((k / golden) % 1.0)
        el = elevations[k % len(elevations)]
        pos = radius * np.array(
            [math.cos(az) * math.cos(el), math.sin(az) * math.cos(el), math.sin(el)]
        )
        cams.append(look_at_camera(pos, (0.0, 0.0, 0.0), width, height, fov_x_rad,
                                   near=near, far=far))
    return cams


_SPLIT_OFFSETS = {"train": 0, "val": 1, "test": 2}


def make_procedural_dataset(config: RunConfig, split: str) -> Dataset:
    """Analytic-scene dataset: orbit cameras plus quadrature ground truth."""
    d = config.data
    if split not in _SPLIT_OFFSETS:
        raise DataError(f"unknown split {split!r}")
    scene = get_scene(d.scene)
    background = np.asarray(config.render.background_color, dtype=np.float64)
    fov = math.radians(d.camera_fov_deg)
    if split == "train":
        start, count = 0, d.n_train_views
    elif split == "val":
        start, count = d.n_train_views, d.n_val_views
    else:
        start, count = d.n_train_views + d.n_val_views, max(d.n_val_views, 1)
    cams = orbit_cameras(count, d.camera_radius, d.image_size, d.image_size, fov,
                         near=config.render.near, far=config.render.far, start_index=start)
    targets = [render_analytic(scene, cam, d.quadrature_n, background) for cam in cams]
    images = [np.concatenate([t, np.ones_like(t[..., :1])], axis=-1) for t in targets]
    transform = normalize_scene(cams, d.aabb_min, d.aabb_max)
    return Dataset(cameras=cams, images=images, targets=targets,
                   scene_transform=transform, split=split, background=background)


def load_nerf_synthetic(config: RunConfig, split: str) -> Dataset:
    """Standard synthetic layout: transforms_{split}.json + PNG frames."""
    d = config.data
    root = Path(d.root)
    tpath = root / f"transforms_{split}.json"
    cameras, image_paths = load_transforms(tpath)
    background = np.asarray(config.render.background_color, dtype=np.float64)
    images, targets = [], []
    for cam, ipath in zip(cameras, image_paths):
        rgba = load_image(ipath)
        if rgba.shape[0] != cam.height or rgba.shape[1] != cam.width:
            raise DataError(f"{ipath}: image size does not match camera intrinsics")
        cam.near = config.render.near
        cam.far = config.render.far
        images.append(rgba)
        targets.append(composite_target(rgba, background))
    transform = normalize_scene(cameras, d.aabb_min, d.aabb_max)
    return Dataset(cameras=cameras, images=images, targets=targets,
                   scene_transform=transform, split=split, background=background)


def make_dataset(config: RunConfig, split: str) -> Dataset:
    if config.data.kind == "procedural":
        return make_procedural_dataset(config, split)
    return load_nerf_synthetic(config, split)
