"""Rank-4 latent grids (maps, channels, height, width), channel statistics,
AdaIN and the FVG4 binary format.

Grids are plain numpy arrays.  Computation happens in float64 and results are
returned in the input's floating dtype, so float32 grids stay float32.
"""
import struct
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import FormatError, InvalidTensor, ShapeError

EPS = 1e-6
GRID_MAGIC = b"FVG4"
_HEADER = struct.Struct("<4s4I")


class ChannelStats(NamedTuple):
    mean: np.ndarray  # (s, c)
    std: np.ndarray  # (s, c), sqrt(population variance + EPS)


def check_grid(x, name="grid"):
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected rank-4 (s, c, h, w), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name}: all dims must be >= 1, got {x.shape}")
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float32)
    if not np.isfinite(x).all():
        raise InvalidTensor(f"{name}: contains NaN or Inf")
    return x


def check_same_shape(*grids):
    shapes = {np.shape(g) for g in grids}
    if len(shapes) != 1:
        raise ShapeError(f"shape mismatch: {sorted(shapes)}")


def channel_stats(x) -> ChannelStats:
    x = check_grid(x).astype(np.float64)
    mean = x.mean(axis=(2, 3))
    var = x.var(axis=(2, 3))
    return ChannelStats(mean, np.sqrt(var + EPS))


def adain(x, target):
    """Renormalize each (map, channel) slice of ``x`` to the statistics of ``target``."""
    x = check_grid(x, "x")
    target = check_grid(target, "target")
    check_same_shape(x, target)
    mx, sx = channel_stats(x)
    mt, st = channel_stats(target)
    x64 = x.astype(np.float64)
    out = st[..., None, None] * (x64 - mx[..., None, None]) / sx[..., None, None] + mt[..., None, None]
    return out.astype(x.dtype)


def save_grid(x, path):
    x = check_grid(x)
    s, c, h, w = x.shape
    payload = np.ascontiguousarray(x, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(_HEADER.pack(GRID_MAGIC, s, c, h, w))
        f.write(payload)


def load_grid(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, s, c, h, w = _HEADER.unpack_from(raw)
    if magic != GRID_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    n = s * c * h * w
    if n == 0:
        raise FormatError(f"{path}: zero-sized dims {(s, c, h, w)}")
    body = raw[_HEADER.size:]
    if len(body) != 4 * n:
        raise FormatError(f"{path}: header says {n} values, payload holds {len(body) / 4:g}")
    x = np.frombuffer(body, dtype="<f4").astype(np.float32).reshape(s, c, h, w)
    return check_grid(x, str(path))
