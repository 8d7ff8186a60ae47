"""Pixel tracing through optical flow.

Builds the novel-region reference masks and the sparse rank-6 correspondence
mask M[s, y, x, t, y', x'], plus dilation, AND-combination with reference
masks and OR-pooling down to latent-token resolution.

Flow vectors are stored as (dy, dx) in pixels.  Positions are continuous
(y, x) pairs traced in float64; nearest-pixel lookup rounds half away from
zero and clamps into the frame.
"""
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .decomposition import sample_indices
from .errors import ConfigError, FormatError, InvalidTensor, ShapeError

MASK_MAGIC = b"FVM6"
FLOW_MASK_HEADER = struct.Struct("<4s3IQ")
FLOW_MAGIC = b"FVFL"
FLOW_HEADER = struct.Struct("<4s3I")
_U16_MAX = np.iinfo(np.uint16).max


@dataclass
class FlowFieldSequence:
    """Forward fields (frame k -> k+1) and backward fields (k+1 -> k)."""

    forward: np.ndarray  # (T-1, h, w, 2)
    backward: np.ndarray  # (T-1, h, w, 2)
    T: int
    h: int
    w: int

    def __post_init__(self):
        self.forward = np.asarray(self.forward, dtype=np.float32)
        self.backward = np.asarray(self.backward, dtype=np.float32)
        want = (self.T - 1, self.h, self.w, 2)
        if self.T < 1 or self.h < 1 or self.w < 1:
            raise ShapeError(f"bad flow dims T={self.T}, h={self.h}, w={self.w}")
        for name, f in (("forward", self.forward), ("backward", self.backward)):
            if f.shape != want:
                raise ShapeError(f"{name} flow has shape {f.shape}, expected {want}")
            if not np.isfinite(f).all():
                raise InvalidTensor(f"{name} flow contains NaN or Inf")

    @classmethod
    def zeros(cls, T, h, w):
        z = np.zeros((T - 1, h, w, 2), np.float32)
        return cls(z, z.copy(), T, h, w)

    @classmethod
    def uniform(cls, T, h, w, dy, dx):
        f = np.zeros((T - 1, h, w, 2), np.float32)
        f[..., 0], f[..., 1] = dy, dx
        return cls(f, -f, T, h, w)


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def nearest_pixel(p, h, w):
    """Nearest in-bounds pixel index for continuous positions p[..., (y, x)]."""
    r = round_half_away(p).astype(np.int64)
    return np.clip(r[..., 0], 0, h - 1), np.clip(r[..., 1], 0, w - 1)


def in_bounds(p, h, w):
    return (p[..., 0] >= 0) & (p[..., 0] < h) & (p[..., 1] >= 0) & (p[..., 1] < w)


def _check_frame(flows, k, name):
    if not 0 <= k < flows.T:
        raise IndexError(f"{name}={k} out of range for T={flows.T}")


def _step(flows, p, k, forward):
    field = flows.forward[k] if forward else flows.backward[k]
    iy, ix = nearest_pixel(p, flows.h, flows.w)
    return p + field[iy, ix].astype(np.float64)


def _transport(flows, p, s, t):
    p = np.array(p, dtype=np.float64)
    if t >= s:
        for k in range(s, t):
            p = _step(flows, p, k, forward=True)
    else:
        for k in range(s - 1, t - 1, -1):
            p = _step(flows, p, k, forward=False)
    return p


def trace(flows: FlowFieldSequence, s, u, t):
    """Carry continuous point ``u`` of frame ``s`` to frame ``t``.

    Returns the continuous landing point and whether it lies inside frame t.
    Intermediate positions may leave the frame.
    """
    _check_frame(flows, s, "s")
    _check_frame(flows, t, "t")
    q = _transport(flows, u, s, t)
    return (float(q[0]), float(q[1])), bool(in_bounds(q, flows.h, flows.w))


def _pixel_grid(h, w):
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([yy, xx], axis=-1).reshape(-1, 2).astype(np.float64)


def _sweep(flows, s):
    """Landings of every pixel of frame s in every frame: {t: (h*w, 2)}."""
    start = _pixel_grid(flows.h, flows.w)
    out = {s: start}
    p = start
    for k in range(s, flows.T - 1):
        p = _step(flows, p, k, forward=True)
        out[k + 1] = p
    p = start
    for k in range(s - 1, -1, -1):
        p = _step(flows, p, k, forward=False)
        out[k] = p
    return out


def coverage(flows: FlowFieldSequence, sources, t):
    """Pixels of frame ``t`` hit by a valid landing from any source frame."""
    sources = list(sources)
    if not sources:
        raise ConfigError("coverage needs at least one source frame")
    _check_frame(flows, t, "t")
    covered = np.zeros((flows.h, flows.w), bool)
    start = _pixel_grid(flows.h, flows.w)
    for a in sources:
        _check_frame(flows, a, "source")
        q = _transport(flows, start, a, t)
        ok = in_bounds(q, flows.h, flows.w)
        iy, ix = nearest_pixel(q[ok], flows.h, flows.w)
        covered[iy, ix] = True
    return covered


@dataclass
class ReferenceMask:
    """Per-reference novel-region masks; True marks pixels not reachable from
    earlier references.  The first reference is all-False by convention."""

    frames: tuple
    masks: np.ndarray  # (n_refs, h, w) bool

    @property
    def additional(self):
        return dict(zip(self.frames[1:], self.masks[1:]))


def _check_ref_frames(ref_frames, T=None):
    ref_frames = tuple(int(f) for f in ref_frames)
    if not ref_frames:
        raise ConfigError("need at least one reference frame")
    if ref_frames[0] != 0:
        raise ConfigError(f"first reference must be frame 0, got {ref_frames}")
    if any(b <= a for a, b in zip(ref_frames, ref_frames[1:])):
        raise ConfigError(f"reference frames must be strictly increasing, got {ref_frames}")
    if T is not None and ref_frames[-1] >= T:
        raise ConfigError(f"reference frame {ref_frames[-1]} out of range for T={T}")
    return ref_frames


def reference_masks(flows: FlowFieldSequence, ref_frames) -> ReferenceMask:
    ref_frames = _check_ref_frames(ref_frames, flows.T)
    masks = np.zeros((len(ref_frames), flows.h, flows.w), bool)
    for k in range(1, len(ref_frames)):
        masks[k] = ~coverage(flows, ref_frames[:k], ref_frames[k])
    return ReferenceMask(ref_frames, masks)


def _sorted_unique(entries):
    if len(entries) == 0:
        return np.zeros((0, 6), np.uint16)
    return np.unique(entries.astype(np.uint16), axis=0)


@dataclass
class CorrespondenceMask:
    """Sparse boolean tensor of shape (T, h, w, T, h, w) stored as sorted,
    de-duplicated rows of (s, y, x, t, y', x')."""

    T: int
    h: int
    w: int
    entries: np.ndarray

    def __post_init__(self):
        if max(self.T, self.h, self.w) > _U16_MAX:
            raise ShapeError("dims exceed 16-bit coordinate range")
        e = np.asarray(self.entries).reshape(-1, 6)
        self.entries = _sorted_unique(e)

    def __len__(self):
        return len(self.entries)

    @property
    def shape(self):
        return (self.T, self.h, self.w, self.T, self.h, self.w)

    def to_dense(self):
        dense = np.zeros(self.shape, bool)
        if len(self):
            dense[tuple(self.entries.astype(np.int64).T)] = True
        return dense

    @classmethod
    def from_dense(cls, dense):
        T, h, w = dense.shape[:3]
        return cls(T, h, w, np.argwhere(dense))

    def pair(self, s, t):
        """Entries of the s -> t block as an (n, 4) array of (y, x, y', x')."""
        e = self.entries
        sel = (e[:, 0] == s) & (e[:, 3] == t)
        return e[sel][:, [1, 2, 4, 5]]


def flow_mask(flows: FlowFieldSequence) -> CorrespondenceMask:
    h, w = flows.h, flows.w
    src = _pixel_grid(h, w).astype(np.int64)
    chunks = []
    for s in range(flows.T):
        for t, q in sorted(_sweep(flows, s).items()):
            ok = in_bounds(q, h, w)
            iy, ix = nearest_pixel(q[ok], h, w)
            n = int(ok.sum())
            rows = np.empty((n, 6), np.int64)
            rows[:, 0] = s
            rows[:, 1:3] = src[ok]
            rows[:, 3] = t
            rows[:, 4] = iy
            rows[:, 5] = ix
            chunks.append(rows)
    return CorrespondenceMask(flows.T, h, w, np.concatenate(chunks))


def dilate(m: CorrespondenceMask, radius=1) -> CorrespondenceMask:
    """Grow every landing to its in-bounds Chebyshev ball of ``radius``."""
    if radius < 0:
        raise ConfigError(f"radius must be >= 0, got {radius}")
    if radius == 0 or not len(m):
        return CorrespondenceMask(m.T, m.h, m.w, m.entries.copy())
    d = np.arange(-radius, radius + 1)
    dy, dx = (g.ravel() for g in np.meshgrid(d, d, indexing="ij"))
    e = m.entries.astype(np.int64)
    grown = np.repeat(e, len(dy), axis=0)
    grown[:, 4] += np.tile(dy, len(e))
    grown[:, 5] += np.tile(dx, len(e))
    ok = (grown[:, 4] >= 0) & (grown[:, 4] < m.h) & (grown[:, 5] >= 0) & (grown[:, 5] < m.w)
    return CorrespondenceMask(m.T, m.h, m.w, grown[ok])


def combine_and(flow: CorrespondenceMask, ref: ReferenceMask) -> CorrespondenceMask:
    """Drop entries that land on non-novel pixels of an additional reference frame.

    Entries targeting frames without an additional reference are kept: those
    targets are ordinary video tokens, which the reference mask never blocks.
    """
    if ref.masks.shape[1:] != (flow.h, flow.w):
        raise ShapeError(f"reference masks {ref.masks.shape[1:]} vs flow mask {(flow.h, flow.w)}")
    if ref.frames and max(ref.frames) >= flow.T:
        raise ShapeError(f"reference frame {max(ref.frames)} out of range for T={flow.T}")
    allowed = np.ones((flow.T, flow.h, flow.w), bool)
    for frame, novel in ref.additional.items():
        allowed[frame] = novel
    e = flow.entries.astype(np.int64)
    keep = allowed[e[:, 3], e[:, 4], e[:, 5]]
    return CorrespondenceMask(flow.T, flow.h, flow.w, flow.entries[keep])


@dataclass
class TokenGrid:
    """How pixel frames map onto latent tokens."""

    frames: tuple  # pixel frame index of each latent map
    th: int
    tw: int

    @property
    def n_tokens(self):
        return len(self.frames) * self.th * self.tw

    def index(self, latent_map, ty, tx):
        return (np.asarray(latent_map) * self.th + ty) * self.tw + tx

    def positions(self):
        """(n_tokens, 3) array of (latent map, ty, tx) in token order."""
        j, y, x = np.meshgrid(np.arange(len(self.frames)), np.arange(self.th), np.arange(self.tw), indexing="ij")
        return np.stack([j.ravel(), y.ravel(), x.ravel()], axis=1)


@dataclass
class PooledReferenceMask:
    frames: tuple
    maps: tuple  # latent map index per reference
    masks: np.ndarray  # (n_refs, th, tw) bool, True = novel


def _frame_lookup(frames, T):
    lut = np.full(T, -1, np.int64)
    lut[list(frames)] = np.arange(len(frames))
    return lut


def pool_to_tokens(m, patch=(1, 1), r=1, dp=1):
    """OR-pool a pixel-level mask to token resolution.

    Frames are mapped to latent maps through the sampled sequence
    ``sample_indices(T, r, dp)``; entries touching other frames are dropped.
    Returns a dense (n_tokens, n_tokens) bool matrix for a correspondence
    mask, or a :class:`PooledReferenceMask` for a reference mask.
    """
    py, px = patch
    if isinstance(m, CorrespondenceMask):
        T, h, w = m.T, m.h, m.w
    elif isinstance(m, ReferenceMask):
        h, w = m.masks.shape[1:]
        T = None
    else:
        raise TypeError(f"cannot pool {type(m).__name__}")
    if py < 1 or px < 1 or h % py or w % px:
        raise ShapeError(f"patch {patch} does not tile {(h, w)}")
    th, tw = h // py, w // px

    if isinstance(m, ReferenceMask):
        n_frames = max(m.frames) + 1
        frames = sample_indices(n_frames + r, r, dp)  # long enough to contain every ref
        maps = []
        for f in m.frames:
            if f not in frames:
                raise ConfigError(f"reference frame {f} is not in the sampled sequence {frames}")
            maps.append(frames.index(f))
        pooled = m.masks.reshape(len(m.frames), th, py, tw, px).any(axis=(2, 4))
        return PooledReferenceMask(m.frames, tuple(maps), pooled)

    grid = TokenGrid(sample_indices(T, r, dp), th, tw)
    lut = _frame_lookup(grid.frames, T)
    e = m.entries.astype(np.int64)
    js, jt = lut[e[:, 0]], lut[e[:, 3]]
    ok = (js >= 0) & (jt >= 0)
    e, js, jt = e[ok], js[ok], jt[ok]
    q = grid.index(js, e[:, 1] // py, e[:, 2] // px)
    k = grid.index(jt, e[:, 4] // py, e[:, 5] // px)
    out = np.zeros((grid.n_tokens, grid.n_tokens), bool)
    out[q, k] = True
    return out


def save_mask(m: CorrespondenceMask, path):
    with open(path, "wb") as f:
        f.write(FLOW_MASK_HEADER.pack(MASK_MAGIC, m.T, m.h, m.w, len(m)))
        f.write(np.ascontiguousarray(m.entries, dtype="<u2").tobytes())


def load_mask(path) -> CorrespondenceMask:
    raw = Path(path).read_bytes()
    if len(raw) < FLOW_MASK_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, T, h, w, n = FLOW_MASK_HEADER.unpack_from(raw)
    if magic != MASK_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    body = raw[FLOW_MASK_HEADER.size:]
    if len(body) != 12 * n:
        raise FormatError(f"{path}: header says {n} entries, payload holds {len(body) / 12:g}")
    e = np.frombuffer(body, dtype="<u2").reshape(n, 6).astype(np.uint16)
    bounds = np.array([T, h, w, T, h, w])
    if n and (e >= bounds).any():
        raise FormatError(f"{path}: entry coordinates exceed dims {(T, h, w)}")
    if n > 1:
        a = e.astype(np.int64)
        keys = np.lexsort(a.T[::-1])
        if not (keys == np.arange(n)).all() or (np.diff(a, axis=0) == 0).all(axis=1).any():
            raise FormatError(f"{path}: entries are not sorted and unique")
    return CorrespondenceMask(T, h, w, e)


def save_flows(flows: FlowFieldSequence, path):
    with open(path, "wb") as f:
        f.write(FLOW_HEADER.pack(FLOW_MAGIC, flows.T, flows.h, flows.w))
        f.write(np.ascontiguousarray(flows.forward, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(flows.backward, dtype="<f4").tobytes())


def load_flows(path) -> FlowFieldSequence:
    raw = Path(path).read_bytes()
    if len(raw) < FLOW_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, T, h, w = FLOW_HEADER.unpack_from(raw)
    if magic != FLOW_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if T < 1:
        raise FormatError(f"{path}: T must be >= 1")
    n = (T - 1) * h * w * 2
    body = raw[FLOW_HEADER.size:]
    if len(body) != 2 * 4 * n:
        raise FormatError(f"{path}: expected {2 * n} flow values, payload holds {len(body) / 4:g}")
    vals = np.frombuffer(body, dtype="<f4").astype(np.float32)
    shape = (T - 1, h, w, 2)
    return FlowFieldSequence(vals[:n].reshape(shape), vals[n:].reshape(shape), T, h, w)
