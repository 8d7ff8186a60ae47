"""Spatial-frequency split of latent grids and the two PnP-style compensation
paths: full compensation for the reconstruction branch and high-frequency-only
compensation (IHC) for the stylization branch.
"""
import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError, ShapeError
from .latents import adain, check_grid, check_same_shape

IMAG_TOL = 1e-5


@dataclass(frozen=True)
class LowPassFilter:
    """Ideal circular low-pass mask.

    The radius is measured in units of the corner (diagonal Nyquist) radius,
    so ``cutoff=1`` passes every frequency.
    """

    cutoff: float = 0.25

    def __post_init__(self):
        if not 0.0 < self.cutoff <= 1.0:
            raise ConfigError(f"cutoff must lie in (0, 1], got {self.cutoff}")

    def mask(self, h, w):
        """Binary (h, w) mask in unshifted FFT layout (DC at [0, 0])."""
        fy = np.fft.fftfreq(h)[:, None] / 0.5
        fx = np.fft.fftfreq(w)[None, :] / 0.5
        radius = np.sqrt(fy**2 + fx**2) / np.sqrt(2.0)
        return (radius <= self.cutoff + 1e-12).astype(np.float64)


def lambda_schedule(steps, active_fraction=0.4, start=1.0):
    """Linear decay from ``start`` to 0 across the first ``active_fraction`` of steps."""
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    if not 0.0 <= active_fraction <= 1.0:
        raise ConfigError(f"active_fraction must lie in [0, 1], got {active_fraction}")
    n_active = int(round(active_fraction * steps))
    lam = np.zeros(steps)
    if n_active:
        lam[:n_active] = start * (1.0 - np.arange(n_active) / n_active)
    return lam


@dataclass(frozen=True)
class IhcConfig:
    lambdas: tuple  # per denoising step
    window: tuple = (0, 0)  # [start, stop) step indices where IHC is active
    filter: LowPassFilter = field(default_factory=LowPassFilter)

    def __post_init__(self):
        lam = np.asarray(self.lambdas, dtype=np.float64)
        start, stop = self.window
        if (lam < 0).any():
            raise ConfigError("lambda must be non-negative")
        inside = lam[start:stop]
        if (np.diff(inside) > 0).any():
            raise ConfigError("lambda must be non-increasing inside the active window")
        outside = np.ones(len(lam), bool)
        outside[start:stop] = False
        if (lam[outside] != 0).any():
            raise ConfigError("lambda must be 0 outside the active window")

    @classmethod
    def linear(cls, steps, active_fraction=0.4, cutoff=0.25):
        lam = lambda_schedule(steps, active_fraction)
        n_active = int(np.count_nonzero(lam))
        return cls(tuple(lam.tolist()), (0, n_active), LowPassFilter(cutoff))

    def lam(self, t):
        start, stop = self.window
        if not start <= t < stop:
            return 0.0
        return float(self.lambdas[t])


def _real_ifft2(spec):
    out = np.fft.ifft2(spec, axes=(-2, -1))
    scale = max(1.0, float(np.abs(out.real).max(initial=0.0)))
    residue = float(np.abs(out.imag).max(initial=0.0))
    if residue > IMAG_TOL * scale:
        raise NumericalError(f"imaginary residue {residue:.3g} after inverse FFT")
    return out.real


def fft2_split(x, filt: LowPassFilter = LowPassFilter()):
    """Split ``x`` into low- and high-frequency parts per (map, channel) slice."""
    x = check_grid(x)
    h, w = x.shape[-2:]
    if h < 2 or w < 2:
        raise ShapeError(f"fft2_split needs h, w >= 2, got {(h, w)}")
    spec = np.fft.fft2(x.astype(np.float64), axes=(-2, -1))
    lp = filt.mask(h, w)
    low = _real_ifft2(spec * lp)
    high = _real_ifft2(spec * (1.0 - lp))
    return low.astype(x.dtype), high.astype(x.dtype)


def high_pass(x, filt: LowPassFilter = LowPassFilter()):
    return fft2_split(x, filt)[1]


def low_pass(x, filt: LowPassFilter = LowPassFilter()):
    return fft2_split(x, filt)[0]


def reconstruction_compensate(x_r, target, lam):
    """Full PnP compensation: x_r + lam * (target - x_r).

    Written as the affine blend so that lam == 1 returns ``target`` exactly and
    lam == 0 returns ``x_r`` exactly.
    """
    x_r = check_grid(x_r, "x_r")
    target = check_grid(target, "target")
    check_same_shape(x_r, target)
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    return ((1.0 - lam) * x_r + lam * target).astype(x_r.dtype)


def ihc_compensate(x_s, x_r, target, cfg: IhcConfig, t):
    """Inject only the high-frequency part of the AdaIN-aligned reconstruction
    error into the stylized latent."""
    x_s = check_grid(x_s, "x_s")
    x_r = check_grid(x_r, "x_r")
    target = check_grid(target, "target")
    check_same_shape(x_s, x_r, target)
    lam = cfg.lam(t)
    if lam == 0.0:
        return x_s.copy()
    diff = adain(target.astype(np.float64), x_s) - adain(x_r.astype(np.float64), x_s)
    hf = high_pass(diff, cfg.filter)
    return (x_s + lam * hf).astype(x_s.dtype)


def spectrum_profile(x):
    """Mean |FFT| per radial frequency ring, averaged over all slices.

    Returns an array of ``min(h, w) // 2`` bins (at least one).  Rings are
    indexed by the rounded radius in integer frequency units of the shorter
    side; frequencies beyond the last ring are dropped.
    """
    x = check_grid(x).astype(np.float64)
    h, w = x.shape[-2:]
    m = min(h, w)
    n_bins = max(1, m // 2)
    mag = np.abs(np.fft.fft2(x, axes=(-2, -1))).reshape(-1, h, w).mean(axis=0)
    ky = np.fft.fftfreq(h)[:, None] * m
    kx = np.fft.fftfreq(w)[None, :] * m
    ring = np.floor(np.sqrt(ky**2 + kx**2) + 0.5).astype(int)
    energy = np.zeros(n_bins)
    for b in range(n_bins):
        sel = ring == b
        if sel.any():
            energy[b] = mag[sel].mean()
    return energy


def spectrum_csv(energy) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["bin", "energy"])
    for b, e in enumerate(energy):
        writer.writerow([b, repr(float(e))])
    return buf.getvalue()
