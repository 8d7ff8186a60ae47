"""Slow, independent reference implementations used to check the package.

Nothing here imports freevis; every routine is written with plain loops.
"""
import cmath
import math

import numpy as np


# -- Fourier -----------------------------------------------------------------


def direct_dft2(x):
    """O(h^2 w^2) 2-D DFT of a single (h, w) slice."""
    h, w = x.shape
    out = np.zeros((h, w), complex)
    for u in range(h):
        for v in range(w):
            acc = 0j
            for m in range(h):
                for n in range(w):
                    acc += x[m, n] * cmath.exp(-2j * math.pi * (u * m / h + v * n / w))
            out[u, v] = acc
    return out


def direct_idft2(X):
    h, w = X.shape
    out = np.zeros((h, w), complex)
    for m in range(h):
        for n in range(w):
            acc = 0j
            for u in range(h):
                for v in range(w):
                    acc += X[u, v] * cmath.exp(2j * math.pi * (u * m / h + v * n / w))
            out[m, n] = acc / (h * w)
    return out


def ideal_lowpass(h, w, cutoff):
    """Circular mask whose radius 1 reaches the corner frequency (1/2, 1/2)."""
    mask = np.zeros((h, w))
    for u in range(h):
        for v in range(w):
            fy = min(u, h - u) / h
            fx = min(v, w - v) / w
            if math.hypot(fy, fx) / math.hypot(0.5, 0.5) <= cutoff + 1e-12:
                mask[u, v] = 1.0
    return mask


def dft_split(x, cutoff):
    """(low, high) of a rank-4 grid via the direct DFT, slice by slice."""
    x = np.asarray(x, np.float64)
    low = np.zeros_like(x)
    high = np.zeros_like(x)
    h, w = x.shape[-2:]
    lp = ideal_lowpass(h, w, cutoff)
    for i in range(x.shape[0]):
        for c in range(x.shape[1]):
            X = direct_dft2(x[i, c])
            low[i, c] = direct_idft2(X * lp).real
            high[i, c] = direct_idft2(X * (1 - lp)).real
    return low, high


def adain_loop(x, target, eps=1e-6):
    x = np.asarray(x, np.float64)
    target = np.asarray(target, np.float64)
    out = np.zeros_like(x)
    for i in range(x.shape[0]):
        for c in range(x.shape[1]):
            a, b = x[i, c].ravel().tolist(), target[i, c].ravel().tolist()
            ma, mb = sum(a) / len(a), sum(b) / len(b)
            sa = math.sqrt(sum((v - ma) ** 2 for v in a) / len(a) + eps)
            sb = math.sqrt(sum((v - mb) ** 2 for v in b) / len(b) + eps)
            out[i, c] = sb * (x[i, c] - ma) / sa + mb
    return out


# -- flow tracing ------------------------------------------------------------


def _round_away(v):
    return int(math.copysign(math.floor(abs(v) + 0.5), v))


def _pixel(y, x, h, w):
    """Nearest pixel, clamped into the frame."""
    return min(max(_round_away(y), 0), h - 1), min(max(_round_away(x), 0), w - 1)


def _lookup(field, y, x, h, w):
    iy, ix = _pixel(y, x, h, w)
    dy, dx = field[iy][ix]
    return y + float(dy), x + float(dx)


def trace_point(forward, backward, s, y, x, t):
    """Carry (y, x) of frame s to frame t one flow step at a time."""
    h, w = len(forward[0]) if forward else 0, len(forward[0][0]) if forward else 0
    y, x = float(y), float(x)
    if t > s:
        for k in range(s, t):
            y, x = _lookup(forward[k], y, x, h, w)
    elif t < s:
        for k in range(s - 1, t - 1, -1):
            y, x = _lookup(backward[k], y, x, h, w)
    return y, x


def brute_force_mask(forward, backward, T, h, w):
    """Set of (s, y, x, t, y', x') tuples, one per valid landing."""
    fwd = np.asarray(forward, np.float32).tolist()
    bwd = np.asarray(backward, np.float32).tolist()
    entries = set()
    for s in range(T):
        for y in range(h):
            for x in range(w):
                for t in range(T):
                    if s == t:
                        entries.add((s, y, x, t, y, x))
                        continue
                    ly, lx = trace_point(fwd, bwd, s, y, x, t)
                    if 0 <= ly < h and 0 <= lx < w:
                        entries.add((s, y, x, t) + _pixel(ly, lx, h, w))
    return entries


def brute_force_coverage(forward, backward, T, h, w, sources, t):
    fwd = np.asarray(forward, np.float32).tolist()
    bwd = np.asarray(backward, np.float32).tolist()
    cov = [[False] * w for _ in range(h)]
    for a in sources:
        for y in range(h):
            for x in range(w):
                ly, lx = trace_point(fwd, bwd, a, y, x, t)
                if 0 <= ly < h and 0 <= lx < w:
                    py, px = _pixel(ly, lx, h, w)
                    cov[py][px] = True
    return np.array(cov, bool)


# -- attention ---------------------------------------------------------------


def softmax_attention_loop(q, k, v, mask=None):
    """Row-by-row attention that renormalizes over permitted keys only.

    A row with no permitted key attends over all keys.
    """
    q, k, v = (np.asarray(a, np.float64) for a in (q, k, v))
    d = q.shape[1]
    out = np.zeros((len(q), v.shape[1]))
    for i in range(len(q)):
        allowed = [j for j in range(len(k)) if mask is None or mask[i][j]]
        if not allowed:
            allowed = list(range(len(k)))
        logits = [sum(q[i, a] * k[j, a] for a in range(d)) / math.sqrt(d) for j in allowed]
        top = max(logits)
        e = [math.exp(z - top) for z in logits]
        z = sum(e)
        for wgt, j in zip(e, allowed):
            out[i] += (wgt / z) * v[j]
    return out


# -- smooth random flows -----------------------------------------------------


def smooth_flows(rng, T, h, w, amplitude=1.5):
    """Random low-frequency flow fields built from a few sinusoids per frame."""
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    fields = []
    for _ in range(2 * (T - 1)):
        f = np.zeros((h, w, 2))
        for ch in range(2):
            for _ in range(2):
                ky, kx = rng.uniform(0, 2 * np.pi / max(h, w), size=2)
                ph = rng.uniform(0, 2 * np.pi)
                f[..., ch] += rng.uniform(-amplitude, amplitude) * np.cos(ky * yy + kx * xx + ph)
        fields.append(f)
    fields = np.asarray(fields, np.float32).reshape(2, T - 1, h, w, 2)
    return fields[0], fields[1]
