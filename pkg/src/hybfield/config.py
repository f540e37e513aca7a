"""Run configuration: nested blocks, YAML loading, validation, dotted overrides.

The config file is a single YAML document with an explicit ``format_version``.
Unknown keys are rejected so that typos fail loudly instead of silently
falling back to defaults.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

FORMAT_VERSION = 1

ENCODING_MODES = ("hybrid", "fixed_pe", "lpe_hash_only", "lpe_cone", "hash_only")


class ConfigError(ValueError):
    """Raised for malformed or inconsistent run configuration."""


@dataclass
class EncodingConfig:
    mode: str = "hybrid"
    n_min: int = 16
    n_max: int = 256
    n_levels: int = 6
    table_size: int = 2**14
    feat_dim: int = 2
    n_freqs: int = 4
    cov_feature_scale: float = 16.0

    def validate(self):
        if self.mode not in ENCODING_MODES:
            raise ConfigError(f"encoding.mode must be one of {ENCODING_MODES}, got {self.mode!r}")
        if self.n_min < 1:
            raise ConfigError("encoding.n_min must be >= 1")
        if self.n_max < self.n_min:
            raise ConfigError("encoding.n_max must be >= n_min")
        if self.n_levels < 1:
            raise ConfigError("encoding.n_levels must be >= 1")
        if self.table_size < 1 or (self.table_size & (self.table_size - 1)) != 0:
            raise ConfigError("encoding.table_size must be a power of two")
        if self.feat_dim < 1:
            raise ConfigError("encoding.feat_dim must be >= 1")
        if self.n_freqs < 1:
            raise ConfigError("encoding.n_freqs must be >= 1")
        if self.cov_feature_scale <= 0:
            raise ConfigError("encoding.cov_feature_scale must be > 0")


@dataclass
class MlpConfig:
    hidden_width: int = 64
    density_hidden_layers: int = 1
    color_hidden_layers: int = 2
    embedding_dim: int = 15

    def validate(self):
        if self.hidden_width < 1:
            raise ConfigError("mlp.hidden_width must be >= 1")
        if self.density_hidden_layers < 1 or self.color_hidden_layers < 1:
            raise ConfigError("mlp hidden layer counts must be >= 1")
        if self.embedding_dim < 1:
            raise ConfigError("mlp.embedding_dim must be >= 1")


@dataclass
class RenderConfig:
    n_samples: int = 64
    background_color: list = field(default_factory=lambda: [1.0, 1.0, 1.0])
    near: float = 2.0
    far: float = 6.0
    eval_deterministic: bool = True

    def validate(self):
        if self.n_samples < 1:
            raise ConfigError("render.n_samples must be >= 1")
        if len(self.background_color) != 3:
            raise ConfigError("render.background_color must have 3 components")
        if not all(0.0 <= c <= 1.0 for c in self.background_color):
            raise ConfigError("render.background_color components must be in [0, 1]")
        if not (self.far > self.near >= 0.0):
            raise ConfigError("render requires far > near >= 0")


@dataclass
class TrainConfig:
    batch_rays: int = 128
    total_steps: int = 2000
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps_mlp: float = 1e-8
    eps_encoding: float = 1e-15
    seed: int = 0
    lr_milestones: list | None = None  # list of [step, multiplier]; None = 1/3 at 50% and 75%
    precision: str = "float32"
    log_every: int = 10
    val_every: int = 500

    def validate(self):
        if self.batch_rays < 1:
            raise ConfigError("train.batch_rays must be >= 1")
        if self.total_steps < 0:
            raise ConfigError("train.total_steps must be >= 0")
        if self.lr <= 0:
            raise ConfigError("train.lr must be > 0")
        for name, b in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not (0.0 <= b < 1.0):
                raise ConfigError(f"train.{name} must be in [0, 1)")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("train.precision must be float32 or float64")
        if self.lr_milestones is not None:
            for entry in self.lr_milestones:
                if len(entry) != 2 or entry[0] < 0 or entry[1] <= 0:
                    raise ConfigError("train.lr_milestones entries must be [step >= 0, multiplier > 0]")
        if self.log_every < 1 or self.val_every < 1:
            raise ConfigError("train.log_every and train.val_every must be >= 1")

    def milestones(self) -> list[tuple[int, float]]:
        """Resolved (step, multiplier) schedule; defaults to 1/3 at 50% and 75% of the run."""
        if self.lr_milestones is not None:
            return [(int(s), float(m)) for s, m in self.lr_milestones]
        return [(self.total_steps // 2, 1.0 / 3.0), (self.total_steps * 3 // 4, 1.0 / 3.0)]


@dataclass
class DataConfig:
    kind: str = "procedural"  # procedural | nerf_synthetic
    scene: str = "soft_sphere"
    root: str | None = None
    image_size: int = 64
    n_train_views: int = 16
    n_val_views: int = 2
    camera_radius: float = 4.0
    camera_fov_deg: float = 35.0
    aabb_min: list = field(default_factory=lambda: [-1.5, -1.5, -1.5])
    aabb_max: list = field(default_factory=lambda: [1.5, 1.5, 1.5])
    quadrature_n: int = 1024

    def validate(self):
        if self.kind not in ("procedural", "nerf_synthetic"):
            raise ConfigError("data.kind must be procedural or nerf_synthetic")
        if self.kind == "nerf_synthetic" and not self.root:
            raise ConfigError("data.root is required for nerf_synthetic datasets")
        if self.image_size < 2:
            raise ConfigError("data.image_size must be >= 2")
        if self.n_train_views < 1 or self.n_val_views < 0:
            raise ConfigError("data view counts invalid")
        if len(self.aabb_min) != 3 or len(self.aabb_max) != 3:
            raise ConfigError("data.aabb_min/aabb_max must be 3-vectors")
        if any(hi <= lo for lo, hi in zip(self.aabb_min, self.aabb_max)):
            raise ConfigError("data AABB is degenerate")
        if self.quadrature_n < 1024:
            raise ConfigError("data.quadrature_n must be >= 1024")


@dataclass
class RunConfig:
    format_version: int = FORMAT_VERSION
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    mlp: MlpConfig = field(default_factory=MlpConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self):
        if self.format_version != FORMAT_VERSION:
            raise ConfigError(
                f"config format_version {self.format_version} unsupported (expected {FORMAT_VERSION})"
            )
        for block in (self.encoding, self.mlp, self.render, self.train, self.data):
            block.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


_BLOCKS = {
    "encoding": EncodingConfig,
    "mlp": MlpConfig,
    "render": RenderConfig,
    "train": TrainConfig,
    "data": DataConfig,
}


def _build_block(cls, data: dict, prefix: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in {prefix}: {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data: dict) -> RunConfig:
    data = copy.deepcopy(data)
    if not isinstance(data, dict):
        raise ConfigError("config document must be a mapping")
    unknown = set(data) - set(_BLOCKS) - {"format_version"}
    if unknown:
        raise ConfigError(f"unknown top-level config key(s): {sorted(unknown)}")
    blocks = {}
    for name, cls in _BLOCKS.items():
        raw = data.get(name, {})
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError(f"config block {name!r} must be a mapping")
        blocks[name] = _build_block(cls, raw, name)
    cfg = RunConfig(format_version=data.get("format_version", FORMAT_VERSION), **blocks)
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"failed to parse config {path}: {exc}") from exc
    if data is None:
        data = {}
    return config_from_dict(data)


def save_config(cfg: RunConfig, path):
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


def apply_overrides(cfg: RunConfig, overrides: dict[str, object]) -> RunConfig:
    """Apply dotted-path overrides, e.g. {"train.total_steps": 100}."""
    data = cfg.to_dict()
    for key, value in overrides.items():
        parts = key.split(".")
        node = data
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config path: {key}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config path: {key}")
        if isinstance(value, str):
            value = yaml.safe_load(value)
        node[parts[-1]] = value
    return config_from_dict(data)
