"""Checkpoint, density map and heatmap files."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .domain import DensityMap, FormatError, TrainState

CKPT_MAGIC = b"RCCKPT"
CKPT_VERSION = 1
DMAP_MAGIC = b"DMAP1"


def save_checkpoint(path, state, phase="init", extra=None):
    """Serialize a :class:`TrainState` to a single binary file.

    Layout: magic, u32 version, u32 header length, JSON header, then one
    record per tensor (u32 name length, UTF-8 ``group/name``, raw
    little-endian payload). Tensor shapes and dtypes live in the header.
    Optimizer moments are stored as tensors of the pseudo-group ``optim``.
    """
    tensors = []
    for group in sorted(state.params):
        for name in sorted(state.params[group]):
            tensors.append((f"{group}/{name}", state.params[group][name]))
    for key in sorted(state.optimizer_state):
        tensors.append((f"optim/{key}", state.optimizer_state[key]))
    header = {
        "format_version": CKPT_VERSION,
        "phase": phase,
        "epoch": state.epoch,
        "seed": state.rng_seed,
        "config": state.config.to_dict(),
        "frozen": sorted(state.frozen),
        "history": state.history,
        "extra": extra or {},
        "tensors": [{"name": n, "shape": list(a.shape), "dtype": np.dtype(a.dtype).newbyteorder("<").str}
                    for n, a in tensors],
    }
    raw_header = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(raw_header)))
        f.write(raw_header)
        for (name, arr), meta in zip(tensors, header["tensors"]):
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(np.ascontiguousarray(arr, dtype=meta["dtype"]).tobytes())


def read_checkpoint_header(path):
    with open(path, "rb") as f:
        data = f.read(len(CKPT_MAGIC) + 8)
        if not data.startswith(CKPT_MAGIC) or len(data) < len(CKPT_MAGIC) + 8:
            raise FormatError(f"{path}: not a checkpoint file")
        version, n = struct.unpack_from("<II", data, len(CKPT_MAGIC))
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        return json.loads(f.read(n).decode("utf-8"))


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(state, header)``."""
    from .model import ModelConfig

    data = Path(path).read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise FormatError(f"{path}: not a checkpoint file")
    version, n = struct.unpack_from("<II", data, len(CKPT_MAGIC))
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = len(CKPT_MAGIC) + 8
    header = json.loads(data[pos:pos + n].decode("utf-8"))
    pos += n
    params, optim = {}, {}
    for meta in header["tensors"]:
        (ln,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + ln].decode("utf-8")
        pos += ln
        if name != meta["name"]:
            raise FormatError(f"{path}: tensor {name!r} out of order (expected {meta['name']!r})")
        dt = np.dtype(meta["dtype"])
        count = int(np.prod(meta["shape"], dtype=np.int64))
        if pos + count * dt.itemsize > len(data):
            raise FormatError(f"{path}: truncated tensor {name!r}")
        arr = np.frombuffer(data, dtype=dt, count=count, offset=pos).reshape(meta["shape"]).copy()
        arr = arr.astype(dt.newbyteorder("="))
        pos += count * dt.itemsize
        group, _, key = name.partition("/")
        if group == "optim":
            optim[key] = arr
        else:
            params.setdefault(group, {})[key] = arr
    state = TrainState(params=params, config=ModelConfig.from_dict(header["config"]),
                       frozen=set(header["frozen"]), optimizer_state=optim,
                       rng_seed=header["seed"], epoch=header["epoch"], history=header["history"])
    return state, header


def write_density_map(path, dmap):
    """``DMAP1 H W`` header line, then ``H*W`` little-endian float32 values row-major."""
    grid = dmap.grid if isinstance(dmap, DensityMap) else np.asarray(dmap)
    H, W = grid.shape
    with open(path, "wb") as f:
        f.write(b"%s %d %d\n" % (DMAP_MAGIC, H, W))
        f.write(np.ascontiguousarray(grid, dtype="<f4").tobytes())


def read_density_map(path):
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    parts = data[:nl].split() if nl > 0 else []
    if len(parts) != 3 or parts[0] != DMAP_MAGIC:
        raise FormatError(f"{path}: missing DMAP1 header")
    H, W = int(parts[1]), int(parts[2])
    payload = data[nl + 1:]
    if len(payload) != 4 * H * W:
        raise FormatError(f"{path}: expected {H * W} floats, found {len(payload) // 4}")
    return DensityMap(np.frombuffer(payload, dtype="<f4").reshape(H, W).astype(np.float64))


def write_heatmap(path, dmap):
    """Max-normalized viridis rendering of a density map as PNG."""
    from matplotlib import colormaps
    from PIL import Image

    grid = dmap.grid if isinstance(dmap, DensityMap) else np.asarray(dmap)
    peak = grid.max()
    norm = grid / peak if peak > 0 else np.zeros_like(grid)
    rgba = colormaps["viridis"](norm)
    Image.fromarray((rgba[..., :3] * 255).round().astype(np.uint8)).save(path, format="PNG")
