"""Input encodings for the hybrid field.

Coarse levels use sinusoidal features, optionally modulated by a learned,
cone-aware weight vector; fine levels use multi-resolution hashed feature
grids read with trilinear interpolation. View directions are encoded with
degree-3 real spherical harmonics.

Array conventions (fixed; the checkpoint format depends on them):
  * sinusoidal features are frequency-major, sin before cos, component-minor
  * covariance upper triangles are row-major: [S00, S01, S02, S11, S12, S22]
  * grid corner order is lexicographic over offsets (0,0,0) .. (1,1,1)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

HASH_PRIMES = (1, 2654435761, 805459861)

# lexicographic corner offsets of a unit cell
_CORNERS = np.array(
    [(i, j, k) for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64
)

_TRIU_ROWS = np.array([0, 0, 0, 1, 1, 2])
_TRIU_COLS = np.array([0, 1, 2, 1, 2, 2])


# ---------------------------------------------------------------------------
# hash grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HashGridConfig:
    """Resolution geometry of the fine-level feature grids."""

    n_min: int
    n_max: int
    n_levels: int
    table_size: int
    feat_dim: int

    def __post_init__(self):
        if self.n_min < 1:
            raise ValueError("n_min must be >= 1")
        if self.n_max < self.n_min:
            raise ValueError("n_max must be >= n_min")
        if self.n_levels < 1:
            raise ValueError("n_levels must be >= 1")
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise ValueError("table_size must be a power of two")
        if self.feat_dim < 1:
            raise ValueError("feat_dim must be >= 1")

    @property
    def growth_factor(self) -> float:
        if self.n_levels == 1:
            return 1.0
        return math.exp((math.log(self.n_max) - math.log(self.n_min)) / (self.n_levels - 1))

    @property
    def out_dim(self) -> int:
        return self.n_levels * self.feat_dim


def level_resolutions(config: HashGridConfig) -> list[int]:
    """Per-level grid resolutions: floor(n_min * b**l) for l = 0 .. n_levels-1."""
    b = config.growth_factor
    return [int(math.floor(config.n_min * b**l)) for l in range(config.n_levels)]


def level_table_lengths(config: HashGridConfig) -> list[int]:
    """Entries per level: dense (N+1)^3 grids when they fit the table, else table_size."""
    lengths = []
    for n in level_resolutions(config):
        dense = (n + 1) ** 3
        lengths.append(dense if dense <= config.table_size else config.table_size)
    return lengths


def spatial_hash(cells, table_size: int):
    """XOR-multiply hash of integer grid cells onto [0, table_size).

    table_size must be a power of two. Accepts any (..., 3) integer array
    (or a bare 3-tuple) and returns int64 indices of shape (...).
    """
    if table_size < 1 or table_size & (table_size - 1):
        raise ValueError("table_size must be a power of two")
    cells = np.asarray(cells, dtype=np.int64)
    h = (
        cells[..., 0] * HASH_PRIMES[0]
        ^ cells[..., 1] * HASH_PRIMES[1]
        ^ cells[..., 2] * HASH_PRIMES[2]
    )
    return h & (table_size - 1)


@dataclass
class HashGridParams:
    """Trainable per-level feature tables plus their resolution geometry."""

    config: HashGridConfig
    tables: list  # level l: (table_length_l, feat_dim) array

    def __post_init__(self):
        expected = level_table_lengths(self.config)
        if len(self.tables) != self.config.n_levels:
            raise ValueError("wrong number of feature tables")
        for tab, n in zip(self.tables, expected):
            if tab.shape != (n, self.config.feat_dim):
                raise ValueError(f"table shape {tab.shape} != expected {(n, self.config.feat_dim)}")

    @classmethod
    def init(cls, config: HashGridConfig, rng: np.random.Generator, dtype=np.float64):
        tables = [
            rng.uniform(-1e-4, 1e-4, size=(n, config.feat_dim)).astype(dtype)
            for n in level_table_lengths(config)
        ]
        return cls(config=config, tables=tables)

    @property
    def n_params(self) -> int:
        return sum(t.size for t in self.tables)


def _level_lookup(x, resolution: int, dense: bool, table_size: int):
    """Corner indices and trilinear weights for one level.

    x: (S, 3) positions in [0, 1]^3. Returns idx (S, 8) int64 and w (S, 8).
    """
    scaled = x * resolution
    c0 = np.floor(scaled).astype(np.int64)
    np.clip(c0, 0, resolution - 1, out=c0)
    frac = scaled - c0  # (S, 3)
    corners = c0[:, None, :] + _CORNERS[None, :, :]  # (S, 8, 3)
    w = np.where(_CORNERS[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :])
    w = w[..., 0] * w[..., 1] * w[..., 2]  # (S, 8)
    if dense:
        side = resolution + 1
        idx = (corners[..., 0] * side + corners[..., 1]) * side + corners[..., 2]
    else:
        idx = spatial_hash(corners, table_size)
    return idx, w


def _grid_cache(x, config: HashGridConfig):
    resolutions = level_resolutions(config)
    lengths = level_table_lengths(config)
    cache = []
    for n, length in zip(resolutions, lengths):
        dense = length != config.table_size or (n + 1) ** 3 <= config.table_size
        cache.append(_level_lookup(x, n, dense, config.table_size))
    return cache


def _grid_encode_cached(cache, params: HashGridParams):
    feat_dim = params.config.feat_dim
    n = cache[0][0].shape[0]
    out = np.empty((n, params.config.out_dim), dtype=params.tables[0].dtype)
    for level, (idx, w) in enumerate(cache):
        feats = params.tables[level][idx]  # (S, 8, F)
        out[:, level * feat_dim : (level + 1) * feat_dim] = np.einsum(
            "sc,scf->sf", w.astype(feats.dtype, copy=False), feats
        )
    return out


def _grid_backward_cached(cache, upstream, params: HashGridParams):
    feat_dim = params.config.feat_dim
    grads = []
    for level, (idx, w) in enumerate(cache):
        table = params.tables[level]
        up = upstream[:, level * feat_dim : (level + 1) * feat_dim]  # (S, F)
        contrib = w[:, :, None] * up[:, None, :]  # (S, 8, F)
        flat = idx.ravel()
        grad = np.empty_like(table)
        for f in range(feat_dim):
            grad[:, f] = np.bincount(flat, weights=contrib[..., f].ravel(), minlength=table.shape[0])
        grads.append(grad)
    return grads


def _check_positions(x):
    x = np.asarray(x, dtype=np.float64) if np.asarray(x).dtype.kind != "f" else np.asarray(x)
    if x.shape[-1] != 3:
        raise ValueError("positions must have a trailing dimension of 3")
    if not np.all(np.isfinite(x)):
        raise ValueError("positions must be finite")
    return np.atleast_2d(x)


def hash_grid_encode(x, params: HashGridParams):
    """Multi-resolution trilinear feature lookup; x in [0,1]^3, shape (..., 3)."""
    arr = _check_positions(x)
    cache = _grid_cache(arr, params.config)
    out = _grid_encode_cached(cache, params)
    if np.asarray(x).ndim == 1:
        return out[0]
    return out.reshape(np.asarray(x).shape[:-1] + (params.config.out_dim,))


def hash_grid_backward(x, upstream, params: HashGridParams):
    """Gradients of the table entries for a given upstream dL/dfeatures."""
    arr = _check_positions(x)
    up = np.atleast_2d(np.asarray(upstream))
    if up.shape[-1] != params.config.out_dim:
        raise ValueError(
            f"upstream width {up.shape[-1]} != encoding width {params.config.out_dim}"
        )
    up = up.reshape(-1, params.config.out_dim)
    if up.shape[0] != arr.shape[0]:
        raise ValueError("upstream batch does not match positions batch")
    cache = _grid_cache(arr, params.config)
    return _grid_backward_cached(cache, up, params)


# ---------------------------------------------------------------------------
# sinusoidal encodings
# ---------------------------------------------------------------------------


def fixed_pe(v, n_freqs: int):
    """Sinusoids at octave frequencies: [sin(v), cos(v), ..., sin(2^{L-1} v), cos(2^{L-1} v)].

    Output is frequency-major, sin before cos, component-minor; width 2 * L * dim(v).
    """
    if n_freqs < 1:
        raise ValueError("n_freqs must be >= 1")
    v = np.asarray(v)
    if v.dtype.kind != "f":
        v = v.astype(np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("input must be finite")
    freqs = (2.0 ** np.arange(n_freqs)).astype(v.dtype)
    phase = v[..., None, :] * freqs[:, None]  # (..., L, n)
    out = np.stack([np.sin(phase), np.cos(phase)], axis=-2)  # (..., L, 2, n)
    return out.reshape(v.shape[:-1] + (2 * n_freqs * v.shape[-1],))


def pe_dim(n_freqs: int, in_dim: int = 3) -> int:
    return 2 * n_freqs * in_dim


# ---------------------------------------------------------------------------
# cone tracing
# ---------------------------------------------------------------------------


@dataclass
class GaussianFrustum:
    """Gaussian approximation of a conical frustum.

    mean: (..., 3) world position; cov_triu: (..., 6) row-major upper triangle
    of the covariance; sigma_t2 / sigma_r2: variances along and perpendicular
    to the ray.
    """

    mean: np.ndarray
    cov_triu: np.ndarray
    sigma_t2: np.ndarray
    sigma_r2: np.ndarray


def conical_frustum_moments(t0, t1, radius):
    """Mean distance and (along-ray, radial) variances of a conical frustum.

    Uses the numerically stable reformulation of the frustum moments; radius
    is the cone radius at unit distance from the origin.
    """
    t0 = np.asarray(t0, dtype=np.float64)
    t1 = np.asarray(t1, dtype=np.float64)
    radius = np.asarray(radius, dtype=np.float64)
    mu = 0.5 * (t0 + t1)
    hw = 0.5 * (t1 - t0)
    denom = 3.0 * mu**2 + hw**2
    t_mean = mu + (2.0 * mu * hw**2) / denom
    t_var = hw**2 / 3.0 - (4.0 / 15.0) * (hw**4 * (12.0 * mu**2 - hw**2)) / denom**2
    r_var = radius**2 * (mu**2 / 4.0 + (5.0 / 12.0) * hw**2 - (4.0 / 15.0) * hw**4 / denom)
    return t_mean, np.maximum(t_var, 0.0), np.maximum(r_var, 0.0)


def frustum_from_moments(origin, direction, t_mean, sigma_t2, sigma_r2) -> GaussianFrustum:
    """Assemble the Gaussian from explicit moments: S = st2 * ddT + sr2 * (I - ddT/|d|^2)."""
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    t_mean = np.asarray(t_mean, dtype=np.float64)
    sigma_t2 = np.asarray(sigma_t2, dtype=np.float64)
    sigma_r2 = np.asarray(sigma_r2, dtype=np.float64)
    d_outer = direction[..., :, None] * direction[..., None, :]
    nsq = np.sum(direction * direction, axis=-1)[..., None, None]
    eye = np.eye(3, dtype=np.float64)
    cov = sigma_t2[..., None, None] * d_outer + sigma_r2[..., None, None] * (eye - d_outer / nsq)
    mean = origin + t_mean[..., None] * direction
    return GaussianFrustum(
        mean=mean,
        cov_triu=cov[..., _TRIU_ROWS, _TRIU_COLS],
        sigma_t2=sigma_t2,
        sigma_r2=sigma_r2,
    )


def cone_covariance(origin, direction, t0, t1, radius) -> GaussianFrustum:
    """Gaussian of the cone segment [t0, t1] cast along ``direction`` with unit-distance radius."""
    direction = np.asarray(direction, dtype=np.float64)
    t0 = np.asarray(t0, dtype=np.float64)
    t1 = np.asarray(t1, dtype=np.float64)
    if np.any(t1 <= t0) or np.any(t0 < 0):
        raise ValueError("segment must satisfy t1 > t0 >= 0")
    norms = np.linalg.norm(direction, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-9):
        raise ValueError("direction must be unit length")
    if np.any(np.asarray(radius) <= 0):
        raise ValueError("footprint radius must be positive")
    t_mean, t_var, r_var = conical_frustum_moments(t0, t1, radius)
    return frustum_from_moments(origin, direction, t_mean, t_var, r_var)


def triu_flatten(frustum: GaussianFrustum):
    """Row-major upper triangle of the frustum covariance: [S00, S01, S02, S11, S12, S22]."""
    return frustum.cov_triu


def triu_from_matrix(mat):
    mat = np.asarray(mat)
    return mat[..., _TRIU_ROWS, _TRIU_COLS]


def matrix_from_triu(triu):
    triu = np.asarray(triu)
    out = np.zeros(triu.shape[:-1] + (3, 3), dtype=triu.dtype)
    out[..., _TRIU_ROWS, _TRIU_COLS] = triu
    out[..., _TRIU_COLS, _TRIU_ROWS] = triu
    return out


# ---------------------------------------------------------------------------
# learnable positional encoding
# ---------------------------------------------------------------------------


@dataclass
class LpeParams:
    """Single affine layer producing the tanh weights of the coarse sinusoids."""

    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float64):
        # Small init: the coarse branch starts near zero and fades in.
        bound = 0.1 / math.sqrt(in_dim)
        weight = rng.uniform(-bound, bound, size=(out_dim, in_dim)).astype(dtype)
        bias = np.zeros(out_dim, dtype=dtype)
        return cls(weight=weight, bias=bias)

    @property
    def n_params(self) -> int:
        return self.weight.size + self.bias.size


def lpe_input_dim(mode: str, grid: HashGridConfig, n_freqs: int) -> int | None:
    """Width of the weight-network input for each encoding mode (None = no weight net)."""
    fine = grid.out_dim
    cone = pe_dim(n_freqs, 6)
    if mode == "hybrid":
        return fine + cone
    if mode == "lpe_hash_only":
        return fine
    if mode == "lpe_cone":
        return cone
    if mode in ("fixed_pe", "hash_only"):
        return None
    raise ValueError(f"unknown encoding mode {mode!r}")


def learnable_pe(x, gamma_fine, frustum: GaussianFrustum, params: LpeParams, n_freqs: int,
                 cov_feature_scale: float = 16.0, mode: str = "hybrid"):
    """Coarse encoding: fixed sinusoids of x modulated elementwise by learned tanh weights.

    The weight network sees the fine features and/or the sinusoids of the
    scaled covariance triangle, depending on ``mode``.
    """
    gamma_p = fixed_pe(x, n_freqs)
    z = _lpe_input(gamma_fine, frustum, n_freqs, cov_feature_scale, mode)
    if z.shape[-1] != params.weight.shape[1]:
        raise ValueError(
            f"weight-network input width {z.shape[-1]} != weight shape {params.weight.shape}"
        )
    alpha = np.tanh(z @ params.weight.T + params.bias)
    return gamma_p * alpha


def _lpe_input(gamma_fine, frustum, n_freqs, cov_feature_scale, mode):
    if mode == "lpe_hash_only":
        return np.asarray(gamma_fine)
    pe_cov = fixed_pe(cov_feature_scale * np.asarray(frustum.cov_triu), n_freqs)
    if mode == "lpe_cone":
        return pe_cov
    if mode == "hybrid":
        return np.concatenate([np.asarray(gamma_fine), pe_cov], axis=-1)
    raise ValueError(f"mode {mode!r} has no weight network")


# ---------------------------------------------------------------------------
# full encoder
# ---------------------------------------------------------------------------


@dataclass
class EncoderParams:
    """All trainable encoding state plus the mode switch."""

    mode: str
    grid: HashGridParams
    n_freqs: int
    cov_feature_scale: float
    lpe: LpeParams | None

    @property
    def out_dim(self) -> int:
        fine = self.grid.config.out_dim
        if self.mode == "hash_only":
            return fine
        return pe_dim(self.n_freqs) + fine


def encoder_init(mode: str, grid_config: HashGridConfig, n_freqs: int,
                 cov_feature_scale: float, rng: np.random.Generator, dtype=np.float64) -> EncoderParams:
    grid = HashGridParams.init(grid_config, rng, dtype)
    lpe = None
    in_dim = lpe_input_dim(mode, grid_config, n_freqs)
    if in_dim is not None:
        lpe = LpeParams.init(in_dim, pe_dim(n_freqs), rng, dtype)
    return EncoderParams(mode=mode, grid=grid, n_freqs=n_freqs,
                         cov_feature_scale=cov_feature_scale, lpe=lpe)


def encode_forward(x, cov_triu, params: EncoderParams):
    """Batched hybrid encoding with a cache for the backward pass.

    x: (S, 3) positions (clamped to the unit cube here); cov_triu: (S, 6)
    frustum covariance triangles (ignored by modes that do not use them).
    Returns (gamma_hyb (S, out_dim), cache).
    """
    x = np.clip(np.asarray(x), 0.0, 1.0)
    grid_cache = _grid_cache(x, params.grid.config)
    gamma_fine = _grid_encode_cached(grid_cache, params.grid)
    cache = {"grid": grid_cache, "n": x.shape[0]}
    if params.mode == "hash_only":
        return gamma_fine, cache

    gamma_p = fixed_pe(x, params.n_freqs).astype(gamma_fine.dtype)
    if params.mode == "fixed_pe":
        return np.concatenate([gamma_p, gamma_fine], axis=-1), cache

    if params.mode == "lpe_hash_only":
        z = gamma_fine
    else:
        pe_cov = fixed_pe(params.cov_feature_scale * np.asarray(cov_triu), params.n_freqs)
        pe_cov = pe_cov.astype(gamma_fine.dtype)
        z = pe_cov if params.mode == "lpe_cone" else np.concatenate([gamma_fine, pe_cov], axis=-1)
    alpha = np.tanh(z @ params.lpe.weight.T + params.lpe.bias)
    cache.update({"gamma_p": gamma_p, "z": z, "alpha": alpha})
    return np.concatenate([gamma_p * alpha, gamma_fine], axis=-1), cache


def encode_backward(cache, upstream, params: EncoderParams):
    """Gradients of all encoder parameters given dL/dgamma_hyb.

    The fine features receive gradient both from their slot in the output and
    (in learnable modes that consume them) through the weight network.
    """
    upstream = np.asarray(upstream)
    fine_dim = params.grid.config.out_dim
    grads = {}
    if params.mode == "hash_only":
        d_fine = upstream
    elif params.mode == "fixed_pe":
        d_fine = upstream[:, -fine_dim:]
    else:
        coarse_dim = pe_dim(params.n_freqs)
        d_coarse = upstream[:, :coarse_dim]
        d_fine = upstream[:, coarse_dim:].copy()
        alpha = cache["alpha"]
        d_alpha = d_coarse * cache["gamma_p"]
        d_pre = d_alpha * (1.0 - alpha * alpha)
        grads["lpe_weight"] = d_pre.T @ cache["z"]
        grads["lpe_bias"] = d_pre.sum(axis=0)
        if params.mode in ("hybrid", "lpe_hash_only"):
            dz = d_pre @ params.lpe.weight
            d_fine += dz[:, :fine_dim]
    table_grads = _grid_backward_cached(cache["grid"], np.ascontiguousarray(d_fine), params.grid)
    for level, g in enumerate(table_grads):
        grads[f"table_{level:02d}"] = g
    return grads


def hybrid_encode(x, frustum: GaussianFrustum | None, params: EncoderParams):
    """Single-call encoding of positions (with optional frustums) to gamma_hyb."""
    arr = _check_positions(x)
    if frustum is None:
        cov = np.zeros((arr.shape[0], 6))
    else:
        cov = np.atleast_2d(np.asarray(frustum.cov_triu))
    out, _ = encode_forward(arr, cov, params)
    if np.asarray(x).ndim == 1:
        return out[0]
    return out


# ---------------------------------------------------------------------------
# spherical harmonics
# ---------------------------------------------------------------------------

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, 1.0925484305920792, 0.31539156525252005,
         1.0925484305920792, 0.5462742152960396)
SH_C3 = (0.5900435899266435, 2.890611442640554, 0.4570457994644658,
         0.3731763325901154, 0.4570457994644658, 1.445305721320277,
         0.5900435899266435)

SH_DIM = 16


def sh_encode(d):
    """Real spherical harmonics of a unit direction up to degree 3 (16 coefficients)."""
    d = np.asarray(d, dtype=np.float64)
    if d.shape[-1] != 3:
        raise ValueError("direction must have 3 components")
    norms = np.linalg.norm(d, axis=-1)
    if not np.all(np.abs(norms - 1.0) <= 1e-6):
        raise ValueError("direction must be unit length (tolerance 1e-6)")
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    out = np.empty(d.shape[:-1] + (SH_DIM,), dtype=np.float64)
    out[..., 0] = SH_C0
    out[..., 1] = SH_C1 * y
    out[..., 2] = SH_C1 * z
    out[..., 3] = SH_C1 * x
    out[..., 4] = SH_C2[0] * x * y
    out[..., 5] = SH_C2[1] * y * z
    out[..., 6] = SH_C2[2] * (3.0 * zz - 1.0)
    out[..., 7] = SH_C2[3] * x * z
    out[..., 8] = SH_C2[4] * (xx - yy)
    out[..., 9] = SH_C3[0] * y * (3.0 * xx - yy)
    out[..., 10] = SH_C3[1] * x * y * z
    out[..., 11] = SH_C3[2] * y * (5.0 * zz - 1.0)
    out[..., 12] = SH_C3[3] * z * (5.0 * zz - 3.0)
    out[..., 13] = SH_C3[4] * x * (5.0 * zz - 1.0)
    out[..., 14] = SH_C3[5] * z * (xx - yy)
    out[..., 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out
