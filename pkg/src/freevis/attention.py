"""Single-head attention variants used by the two-branch denoiser.

All functions take plain (n, d) arrays.  Query/key/value groups for the two
branches travel together in :class:`BranchTokens`; "main" tokens are the
video latent tokens and "refs" the additional reference tokens.
"""
import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

NEG = -1e9


def _logits(q, k):
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.ndim != 2 or k.ndim != 2 or q.shape[1] != k.shape[1]:
        raise ShapeError(f"query {q.shape} and key {k.shape} feature dims differ")
    return (q @ k.T) / np.sqrt(q.shape[1])


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_mask(mask, nq, nk):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (nq, nk):
        raise ShapeError(f"mask {mask.shape} does not match ({nq}, {nk})")
    return mask


def attention_weights(q, k, mask=None):
    """Row-stochastic (n_q, n_k) weight matrix; fully masked rows fall back to unmasked."""
    logits = _logits(q, k)
    if mask is None:
        return _softmax(logits)
    mask = _check_mask(mask, *logits.shape)
    w = _softmax(np.where(mask, logits, NEG))
    empty = ~mask.any(axis=1)
    if empty.any():
        w[empty] = _softmax(logits[empty])
    return w


def attention(q, k, v):
    v = np.asarray(v, dtype=np.float64)
    if len(k) != len(v):
        raise ShapeError(f"{len(k)} keys but {len(v)} values")
    return _softmax(_logits(q, k)) @ v


def masked_attention(q, k, v, mask):
    """Attention with disallowed logits pushed to -1e9 before the softmax.

    Keys blocked for every query are dropped before the matmul, so a mask that
    only blocks whole columns yields exactly the attention over the remaining
    keys.  Rows with no permitted key use their unmasked result.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if len(k) != len(v):
        raise ShapeError(f"{len(k)} keys but {len(v)} values")
    mask = _check_mask(mask, len(q), len(k))
    empty = ~mask.any(axis=1)
    keep = mask.any(axis=0)
    out = np.empty((len(q), v.shape[1]))
    if keep.any():
        rows = ~empty
        sub = mask[np.ix_(rows, keep)]
        logits = _logits(q[rows], k[keep])
        if not sub.all():
            logits = np.where(sub, logits, NEG)
        out[rows] = _softmax(logits) @ v[keep]
    if empty.any():
        out[empty] = attention(q[empty], k, v)
    return out


@dataclass
class QKV:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    @classmethod
    def empty(cls, d):
        z = np.zeros((0, d))
        return cls(z, z.copy(), z.copy())


@dataclass
class BranchTokens:
    recon: QKV
    recon_refs: QKV
    style: QKV
    style_refs: QKV
    ref_indices: np.ndarray  # row of V^s / V^r each reference token copies its position from

    def __post_init__(self):
        for a, b, name in ((self.recon, self.style, "main"), (self.recon_refs, self.style_refs, "refs")):
            for m in ("q", "k", "v"):
                if np.shape(getattr(a, m)) != np.shape(getattr(b, m)):
                    raise ShapeError(f"{name} {m}: recon {np.shape(getattr(a, m))} vs style {np.shape(getattr(b, m))}")
        self.ref_indices = np.asarray(self.ref_indices, dtype=np.int64).reshape(-1)
        if len(self.ref_indices) != len(self.style_refs.v):
            raise ShapeError(f"{len(self.ref_indices)} ref indices for {len(self.style_refs.v)} reference tokens")

    @property
    def n_refs(self):
        return len(self.style_refs.q)


def _cat(a, b):
    return np.concatenate([np.asarray(a, np.float64), np.asarray(b, np.float64)], axis=0)


def isolated_attention(bt: BranchTokens):
    """Reconstruction tokens see only themselves; reference tokens see everything."""
    r, rr = bt.recon, bt.recon_refs
    recon_out = attention(r.q, r.k, r.v)
    if bt.n_refs == 0:
        return recon_out, np.zeros((0, recon_out.shape[1]))
    ref_out = attention(rr.q, _cat(r.k, rr.k), _cat(r.v, rr.v))
    return recon_out, ref_out


def inject_dynamics(bt: BranchTokens, xi):
    """Blend dynamics into the stylized reference values.

    Evaluates V_R^s + xi (V^s[i] - V_R^s) + (1 - xi)(V^r[i] - V_R^r) in the
    rearranged form (1 - xi) V_R^s + xi V^s[i] + (1 - xi)(V^r[i] - V_R^r),
    which hits both endpoints exactly.
    """
    if not 0.0 <= xi <= 1.0:
        raise ConfigError(f"xi must lie in [0, 1], got {xi}")
    idx = bt.ref_indices
    n_main = len(bt.style.v)
    if len(idx) and (idx.min() < 0 or idx.max() >= n_main):
        raise IndexError(f"reference indices out of range for {n_main} tokens")
    vs = np.asarray(bt.style.v, np.float64)
    vr = np.asarray(bt.recon.v, np.float64)
    vs_r = np.asarray(bt.style_refs.v, np.float64)
    vr_r = np.asarray(bt.recon_refs.v, np.float64)
    return (1.0 - xi) * vs_r + xi * vs[idx] + (1.0 - xi) * (vr[idx] - vr_r)


def _two_group(q_main, q_refs, k_all, v_all, m_ref):
    if m_ref is None:
        main = attention(q_main, k_all, v_all)
    else:
        main = masked_attention(q_main, k_all, v_all, m_ref)
    if len(q_refs) == 0:
        return main
    return _cat(main, attention(q_refs, k_all, v_all))


def out1(bt: BranchTokens, m_ref=None):
    """Stylization self-attention over style + reference tokens; the reference
    mask applies to the main-token queries only."""
    s, sr = bt.style, bt.style_refs
    return _two_group(s.q, sr.q, _cat(s.k, sr.k), _cat(s.v, sr.v), m_ref)


def out2(bt: BranchTokens, m_ref=None):
    """As :func:`out1` with queries and keys taken from the reconstruction branch."""
    r, rr = bt.recon, bt.recon_refs
    s, sr = bt.style, bt.style_refs
    return _two_group(r.q, rr.q, _cat(r.k, rr.k), _cat(s.v, sr.v), m_ref)


def out3(bt: BranchTokens, m_combined=None):
    s, sr = bt.style, bt.style_refs
    q, k, v = _cat(s.q, sr.q), _cat(s.k, sr.k), _cat(s.v, sr.v)
    if m_combined is None:
        return attention(q, k, v)
    return masked_attention(q, k, v, m_combined)


def aggregate(o1, o2, o3, beta, gamma):
    if beta < 0 or gamma < 0 or beta + gamma > 1:
        raise ConfigError(f"need beta, gamma >= 0 and beta + gamma <= 1, got {beta}, {gamma}")
    shapes = {np.shape(o1), np.shape(o2), np.shape(o3)}
    if len(shapes) != 1:
        raise ShapeError(f"output shapes differ: {sorted(shapes)}")
    return (1.0 - beta - gamma) * o1 + beta * o2 + gamma * o3


def cross_attention_concat(query, ref_embeddings, ref_values=None):
    """Attention of ``query`` over the concatenation of per-reference embeddings.

    ``ref_values`` (same lengths as ``ref_embeddings``) supplies the values when
    keys come from another branch; by default values are the embeddings.
    """
    if not ref_embeddings:
        raise ConfigError("need at least one reference embedding")
    dims = {np.shape(e)[1] for e in ref_embeddings}
    if len(dims) != 1:
        raise ShapeError(f"reference embeddings have different feature dims {sorted(dims)}")
    k = np.concatenate([np.asarray(e, np.float64) for e in ref_embeddings])
    if ref_values is None:
        v = k
    else:
        if len(ref_values) != len(ref_embeddings):
            raise ShapeError("ref_values and ref_embeddings differ in length")
        v = np.concatenate([np.asarray(e, np.float64) for e in ref_values])
    return attention(query, k, v)


def attention_diagnostics(weights, q_positions, k_positions, query_index=0):
    """Temporal and spatial summaries of an attention map.

    temporal[f, g] is the mean weight from query tokens of frame f to key tokens
    of frame g.  spatial maps each key frame to an (h, w) grid of the chosen
    query's weights, indexed by the key tokens' (y, x) positions.
    """
    weights = np.asarray(weights, np.float64)
    q_positions = np.asarray(q_positions, np.int64)
    k_positions = np.asarray(k_positions, np.int64)
    if weights.ndim != 2 or len(q_positions) != weights.shape[0] or len(k_positions) != weights.shape[1]:
        raise ShapeError(
            f"weights {weights.shape} vs {len(q_positions)} query / {len(k_positions)} key positions"
        )
    q_frames = np.unique(q_positions[:, 0])
    k_frames = np.unique(k_positions[:, 0])
    temporal = np.zeros((len(q_frames), len(k_frames)))
    for i, f in enumerate(q_frames):
        rows = weights[q_positions[:, 0] == f]
        for j, g in enumerate(k_frames):
            temporal[i, j] = rows[:, k_positions[:, 0] == g].mean()
    h = int(k_positions[:, 1].max()) + 1
    w = int(k_positions[:, 2].max()) + 1
    spatial = {}
    row = weights[query_index]
    for g in k_frames:
        grid = np.zeros((h, w))
        sel = k_positions[:, 0] == g
        grid[k_positions[sel, 1], k_positions[sel, 2]] = row[sel]
        spatial[int(g)] = grid
    return temporal, q_frames, k_frames, spatial


def temporal_csv(temporal, q_frames, k_frames) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["q_frame", "k_frame", "weight"])
    for i, f in enumerate(q_frames):
        for j, g in enumerate(k_frames):
            wr.writerow([int(f), int(g), repr(float(temporal[i, j]))])
    return buf.getvalue()


def spatial_csv(spatial) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["k_frame", "y", "x", "weight"])
    for g, grid in sorted(spatial.items()):
        for y in range(grid.shape[0]):
            for x in range(grid.shape[1]):
                wr.writerow([g, y, x, repr(float(grid[y, x]))])
    return buf.getvalue()
