"""Versioned checkpoint container.

Layout: 8-byte magic, uint64 little-endian manifest length, a JSON manifest
(format version, full config, dtype, array names/shapes in blob order, layout
tags), then the raw little-endian IEEE-754 parameter blob. Save/load is a
bitwise round trip.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .config import config_from_dict
from .model import FieldParams, build_field

MAGIC = b"HYBFCKPT"
FORMAT_VERSION = 1

LAYOUT_TAGS = {
    "triu_order": "row-major [S00, S01, S02, S11, S12, S22]",
    "pe_layout": "frequency-major, sin before cos, component-minor",
    "grid_corner_order": "lexicographic offsets (0,0,0)..(1,1,1)",
}


class CheckpointError(RuntimeError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class DimensionMismatchError(CheckpointError):
    pass


class TruncatedBlobError(CheckpointError):
    pass


def _blob_arrays(params: FieldParams, optimizer_state):
    arrays = list(params.named_arrays())
    if optimizer_state is not None:
        arrays += [(f"adam.m.{n}", a) for n, a in optimizer_state.m.items()]
        arrays += [(f"adam.v.{n}", a) for n, a in optimizer_state.v.items()]
    return arrays


def save_checkpoint(path, params: FieldParams, optimizer_state=None, config=None):
    """Write params (and optionally Adam state) with the resolved config."""
    config = config if config is not None else params.config
    arrays = _blob_arrays(params, optimizer_state)
    dtype = np.dtype(params.dtype)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "dtype": dtype.name,
        "layout": LAYOUT_TAGS,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "optimizer_step": optimizer_state.t if optimizer_state is not None else None,
    }
    payload = json.dumps(manifest).encode("utf-8")
    le = dtype.newbyteorder("<")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(payload).to_bytes(8, "little"))
        fh.write(payload)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype=le).tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (params, adam_state_or_None, config).

    Validates magic, format version, and that the stored arrays exactly match
    the shapes implied by the stored config before touching the blob.
    """
    from .trainer import AdamState

    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    mlen = int.from_bytes(raw[len(MAGIC) : len(MAGIC) + 8], "little")
    header_end = len(MAGIC) + 8 + mlen
    if len(raw) < header_end:
        raise TruncatedBlobError(f"{path}: manifest truncated")
    try:
        manifest = json.loads(raw[len(MAGIC) + 8 : header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad manifest: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{path}: checkpoint format {manifest.get('format_version')} != {FORMAT_VERSION}"
        )
    config = config_from_dict(manifest["config"])
    dtype = np.dtype(manifest["dtype"])
    params = build_field(config, rng=np.random.default_rng(0), dtype=dtype)
    has_optimizer = manifest.get("optimizer_step") is not None
    state = AdamState(params) if has_optimizer else None
    expected = _blob_arrays(params, state)
    stored = manifest["arrays"]
    if len(stored) != len(expected):
        raise DimensionMismatchError(
            f"{path}: checkpoint stores {len(stored)} arrays, config implies {len(expected)}"
        )
    for meta, (name, arr) in zip(stored, expected):
        if meta["name"] != name or tuple(meta["shape"]) != arr.shape:
            raise DimensionMismatchError(
                f"{path}: array {meta['name']} shape {tuple(meta['shape'])} does not match "
                f"config-implied {name} {arr.shape}"
            )
    total = sum(a.size for _, a in expected) * dtype.itemsize
    if len(raw) - header_end < total:
        raise TruncatedBlobError(
            f"{path}: blob has {len(raw) - header_end} bytes, expected {total}"
        )
    le = dtype.newbyteorder("<")
    offset = header_end
    for name, arr in expected:
        nbytes = arr.size * dtype.itemsize
        chunk = np.frombuffer(raw, dtype=le, count=arr.size, offset=offset)
        arr[...] = chunk.reshape(arr.shape)
        offset += nbytes
    if state is not None:
        state.t = int(manifest["optimizer_step"])
    return params, state, config
