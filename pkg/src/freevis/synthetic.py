"""Synthetic content videos with exactly known flow, plus a seeded "style"."""
import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .errors import ConfigError
from .flow import FlowFieldSequence, save_flows
from .latents import save_grid

MOTIONS = ("static", "uniform-shift", "swirl")


@dataclass
class SyntheticSpec:
    motion: str = "static"
    frames: int = 9
    height: int = 16
    width: int = 16
    channels: int = 3
    shift: tuple = (0, 1)  # per-step (dy, dx) for uniform-shift, whole pixels
    amplitude: float = 1.0  # peak displacement of the swirl field, pixels per step
    seed: int = 0
    style_seed: int = 1
    output_dir: str = "."

    def __post_init__(self):
        if self.motion not in MOTIONS:
            raise ConfigError(f"unsupported motion {self.motion!r}; expected one of {MOTIONS}")
        self.shift = tuple(self.shift)
        if len(self.shift) != 2 or any(float(s) != int(s) for s in self.shift):
            raise ConfigError(f"shift must be two whole-pixel values, got {self.shift}")
        self.shift = tuple(int(s) for s in self.shift)
        if min(self.frames, self.height, self.width, self.channels) < 1:
            raise ConfigError("frames, height, width and channels must be >= 1")

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**data)


def _smooth_field(rng, c, h, w):
    z = gaussian_filter(rng.standard_normal((c, h, w)), sigma=(0, 1.5, 1.5), mode="wrap")
    z -= z.mean(axis=(1, 2), keepdims=True)
    return z / (z.std(axis=(1, 2), keepdims=True) + 1e-12)


def _swirl_field(h, w, amplitude):
    """Curl-free displacement: the scaled gradient of sin(2 pi y / h) sin(2 pi x / w)."""

    def f(y, x):
        ay, ax = 2 * np.pi * y / h, 2 * np.pi * x / w
        return amplitude * np.cos(ay) * np.sin(ax), amplitude * np.sin(ay) * np.cos(ax)

    return f


def gen_synthetic(spec: SyntheticSpec):
    """Return (content, stylized, flows) with content of shape (T, c, h, w)."""
    T, h, w, c = spec.frames, spec.height, spec.width, spec.channels
    rng = np.random.default_rng(spec.seed)
    if spec.motion == "static":
        frame = _smooth_field(rng, c, h, w)
        content = np.repeat(frame[None], T, axis=0)
        flows = FlowFieldSequence.zeros(T, h, w)
    elif spec.motion == "uniform-shift":
        dy, dx = spec.shift
        span_y, span_x = (T - 1) * abs(dy), (T - 1) * abs(dx)
        canvas = _smooth_field(rng, c, h + span_y, w + span_x)
        oy, ox = (T - 1) * max(dy, 0), (T - 1) * max(dx, 0)
        content = np.stack([canvas[:, oy - k * dy:oy - k * dy + h, ox - k * dx:ox - k * dx + w] for k in range(T)])
        flows = FlowFieldSequence.uniform(T, h, w, dy, dx)
    else:
        f = _swirl_field(h, w, spec.amplitude)
        yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
        fy, fx = f(yy, xx)
        # backward field b solves b(p) = -f(p + b(p))
        by, bx = -fy, -fx
        for _ in range(50):
            gy, gx = f(yy + by, xx + bx)
            by, bx = -gy, -gx
        fwd = np.repeat(np.stack([fy, fx], -1)[None], T - 1, axis=0)
        bwd = np.repeat(np.stack([by, bx], -1)[None], T - 1, axis=0)
        flows = FlowFieldSequence(fwd, bwd, T, h, w)
        frames = [_smooth_field(rng, c, h, w)]
        coords = np.stack([yy + by, xx + bx])
        for _ in range(T - 1):
            prev = frames[-1]
            frames.append(np.stack([map_coordinates(prev[ch], coords, order=1, mode="nearest") for ch in range(c)]))
        content = np.stack(frames)
    srng = np.random.default_rng(spec.style_seed)
    mix = 0.5 * np.eye(c) + srng.standard_normal((c, c)) / np.sqrt(c)
    bias = srng.standard_normal(c)
    stylized = np.einsum("dc,tchw->tdhw", mix, content) + bias[None, :, None, None]
    return content.astype(np.float32), stylized.astype(np.float32), flows


def write_synthetic(spec: SyntheticSpec, out_dir=None):
    out = Path(out_dir if out_dir is not None else spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    content, stylized, flows = gen_synthetic(spec)
    paths = {"content": out / "content.fvg4", "stylized": out / "stylized.fvg4", "flows": out / "flows.fvfl"}
    save_grid(content, paths["content"])
    save_grid(stylized, paths["stylized"])
    save_flows(flows, paths["flows"])
    return paths
