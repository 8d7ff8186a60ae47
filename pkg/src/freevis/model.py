"""Seeded, untrained DiT-style velocity model used as the denoising backbone.

Latent maps are patchified into tokens, embedded with sinusoidal position
and timestep features, and passed through pre-norm blocks of multi-head
self-attention, single-head cross-attention over reference embeddings and an
MLP.  Weights come from a seeded generator and are never trained.

``forward`` runs one branch with plain attention (or a caller-supplied
attention op).  ``velocity_pair`` runs the reconstruction and stylization
branches block by block so the stylization branch can use the
reconstruction queries/keys/values.
"""
from dataclasses import dataclass, field

import numpy as np

from . import attention as attn
from .errors import ShapeError


def patchify(x, patch):
    s, c, h, w = x.shape
    py, px = patch
    if h % py or w % px:
        raise ShapeError(f"patch {patch} does not tile {(h, w)}")
    t = x.reshape(s, c, h // py, py, w // px, px).transpose(0, 2, 4, 1, 3, 5)
    return t.reshape(s * (h // py) * (w // px), c * py * px)


def unpatchify(tokens, shape, patch):
    s, c, h, w = shape
    py, px = patch
    t = tokens.reshape(s, h // py, w // px, c, py, px).transpose(0, 3, 1, 4, 2, 5)
    return t.reshape(shape)


def grid_positions(n_maps, th, tw, first_map=0):
    j, y, x = np.meshgrid(np.arange(first_map, first_map + n_maps), np.arange(th), np.arange(tw), indexing="ij")
    return np.stack([j.ravel(), y.ravel(), x.ravel()], axis=1)


def layer_norm(h):
    mu = h.mean(axis=1, keepdims=True)
    var = h.var(axis=1, keepdims=True)
    return (h - mu) / np.sqrt(var + 1e-5)


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x**3)))


def _sinusoid(values, n_freq):
    freqs = 1.0 / (10.0 ** (np.arange(n_freq) / max(1, n_freq - 1)))
    a = np.asarray(values, np.float64)[:, None] * freqs[None]
    return np.concatenate([np.sin(a), np.cos(a)], axis=1)


@dataclass
class BranchConditioning:
    """References one branch is conditioned on.

    first: latent map (c, h, w) of the first reference, prepended to the video
        tokens with the positions of latent map 0.
    extra: (n, c, h, w) latents of the additional references.
    extra_maps: latent map index whose positions each additional reference carries.
    """

    first: np.ndarray = None
    extra: np.ndarray = None
    extra_maps: tuple = ()


@dataclass
class TokenMasks:
    """Token-level masks for the stylization branch.

    ref: (n_main, n_main + n_refs) mask for the main-token queries of Out1/Out2.
    combined: (n_main + n_refs, n_main + n_refs) flow-and-reference mask for Out3.
    ``None`` means no masking.
    """

    ref: np.ndarray = None
    combined: np.ndarray = None


@dataclass
class ToyDenoiser:
    channels: int = 4
    patch: tuple = (2, 2)
    width: int = 32
    blocks: int = 2
    heads: int = 2
    embed_dim: int = 16
    temporal_scale: float = 0.0
    seed: int = 0
    weights: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.patch = tuple(self.patch)
        if self.width % self.heads:
            raise ShapeError(f"width {self.width} is not divisible by {self.heads} heads")
        rng = np.random.default_rng(self.seed)
        d = self.width
        p = self.channels * self.patch[0] * self.patch[1]

        def lin(n_in, n_out, gain=1.0):
            return rng.standard_normal((n_in, n_out)) * (gain / np.sqrt(n_in))

        self.weights = {
            "in": lin(p, d),
            "pos_space": lin(16, d),
            "pos_time": lin(8, d),
            "time": lin(16, d),
            "out": lin(d, p),
            "emb": lin(p, self.embed_dim),
            "blocks": [
                {
                    "q": lin(d, d), "k": lin(d, d), "v": lin(d, d), "o": lin(d, d, 0.5),
                    "cq": lin(d, d), "ck": lin(self.embed_dim, d), "cv": lin(self.embed_dim, d), "co": lin(d, d, 0.5),
                    "w1": lin(d, 2 * d), "w2": lin(2 * d, d, 0.5),
                }
                for _ in range(self.blocks)
            ],
        }

    # -- embeddings ---------------------------------------------------------

    def token_hw(self, h, w):
        return h // self.patch[0], w // self.patch[1]

    def position_embedding(self, positions):
        positions = np.asarray(positions)
        space = np.concatenate([_sinusoid(positions[:, 1], 4), _sinusoid(positions[:, 2], 4)], axis=1)
        time = _sinusoid(positions[:, 0], 4)
        return space @ self.weights["pos_space"] + self.temporal_scale * (time @ self.weights["pos_time"])

    def time_embedding(self, sigma):
        return (_sinusoid([1000.0 * sigma], 8) @ self.weights["time"])[0]

    def embed(self, latents, positions, sigma):
        tokens = patchify(np.asarray(latents, np.float64), self.patch)
        return tokens @ self.weights["in"] + self.position_embedding(positions) + self.time_embedding(sigma)

    def reference_embedding(self, latent):
        """Stand-in for an image encoder: a few pooled, projected tokens per reference."""
        c, h, w = latent.shape
        th, tw = self.token_hw(h, w)
        tok = patchify(np.asarray(latent, np.float64)[None], self.patch).reshape(th, tw, -1)
        parts = [
            blk.mean(axis=(0, 1))
            for rows in np.array_split(tok, min(2, th), axis=0)
            for blk in np.array_split(rows, min(2, tw), axis=1)
        ]
        return np.tanh(np.stack(parts) @ self.weights["emb"])

    # -- single branch ------------------------------------------------------

    def _layout(self, shape, cond):
        s, c, h, w = shape
        th, tw = self.token_hw(h, w)
        video_pos = grid_positions(s, th, tw)
        n_first = 0 if cond is None or cond.first is None else th * tw
        main_pos = np.concatenate([grid_positions(1, th, tw)[:n_first], video_pos])
        extra_pos = np.zeros((0, 3), np.int64)
        if cond is not None and cond.extra is not None and len(cond.extra):
            extra_pos = np.concatenate([grid_positions(1, th, tw, m) for m in cond.extra_maps])
        return main_pos, extra_pos, n_first

    def _main_tokens(self, x, cond, main_pos, n_first, sigma):
        parts = []
        if n_first:
            parts.append(self.embed(cond.first[None], main_pos[:n_first], sigma))
        parts.append(self.embed(x, main_pos[n_first:], sigma))
        return np.concatenate(parts)

    def _extra_tokens(self, cond, extra_pos, sigma):
        if not len(extra_pos):
            return np.zeros((0, self.width))
        return self.embed(cond.extra, extra_pos, sigma)

    def _embeddings(self, cond):
        if cond is None:
            return []
        refs = []
        if cond.first is not None:
            refs.append(cond.first)
        if cond.extra is not None:
            refs.extend(cond.extra)
        return [self.reference_embedding(r) for r in refs]

    def _heads(self, m):
        n = m.shape[0]
        return m.reshape(n, self.heads, self.width // self.heads).transpose(1, 0, 2)

    def _merge(self, hs):
        return np.concatenate(list(hs), axis=1)

    def _self_attention(self, blk, h, op):
        a = layer_norm(h)
        q, k, v = (self._heads(a @ blk[n]) for n in ("q", "k", "v"))
        return self._merge([op(q[i], k[i], v[i]) for i in range(self.heads)]) @ blk["o"]

    def _cross_attention(self, blk, q_src, key_embs, value_embs):
        if not key_embs:
            return 0.0
        q = layer_norm(q_src) @ blk["cq"]
        keys = [e @ blk["ck"] for e in key_embs]
        vals = [e @ blk["cv"] for e in value_embs]
        return attn.cross_attention_concat(q, keys, vals) @ blk["co"]

    def _mlp(self, blk, h):
        return gelu(layer_norm(h) @ blk["w1"]) @ blk["w2"]

    def _head(self, h_video, shape):
        return unpatchify(layer_norm(h_video) @ self.weights["out"], shape, self.patch)

    def forward(self, x, sigma, cond: BranchConditioning = None, attn_op=None, record=None):
        """Velocity for latent ``x`` at noise level ``sigma``.

        ``attn_op(q, k, v)`` replaces plain self-attention when given.  If
        ``record`` is a list, each block appends its head-averaged
        self-attention weights over the main tokens.
        """
        x = np.asarray(x, np.float64)
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"latent must be (s, {self.channels}, h, w), got {x.shape}")
        op = attn_op or attn.attention
        main_pos, extra_pos, n_first = self._layout(x.shape, cond)
        h = np.concatenate([self._main_tokens(x, cond, main_pos, n_first, sigma), self._extra_tokens(cond, extra_pos, sigma)])
        embs = self._embeddings(cond)
        for blk in self.weights["blocks"]:
            if record is not None:
                a = layer_norm(h)
                q, k = self._heads(a @ blk["q"]), self._heads(a @ blk["k"])
                record.append(np.mean([attn.attention_weights(q[i], k[i]) for i in range(self.heads)], axis=0))
            h = h + self._self_attention(blk, h, op)
            h = h + self._cross_attention(blk, h, embs, embs)
            h = h + self._mlp(blk, h)
        return self._head(h[n_first:len(main_pos)], x.shape)

    __call__ = forward

    # -- two branches -------------------------------------------------------

    def velocity_pair(self, x_r, x_s, sigma, cond_r: BranchConditioning, cond_s: BranchConditioning,
                      masks: TokenMasks = None, xi=1.0, beta=0.0, gamma=0.0):
        """Velocities of the reconstruction and stylization branches.

        The reconstruction branch runs Isolated-Attn.  The stylization branch
        injects dynamics into its reference values, forms Out1/Out2/Out3 and
        blends them with ``beta`` and ``gamma``; its cross-attention shares the
        reconstruction queries and keys.
        """
        x_r = np.asarray(x_r, np.float64)
        x_s = np.asarray(x_s, np.float64)
        if x_r.shape != x_s.shape:
            raise ShapeError(f"branch latents differ: {x_r.shape} vs {x_s.shape}")
        masks = masks or TokenMasks()
        main_pos, extra_pos, n_first = self._layout(x_r.shape, cond_r)
        th, tw = self.token_hw(*x_r.shape[-2:])
        ref_idx = np.zeros(0, np.int64)
        if len(extra_pos):
            ref_idx = n_first + (extra_pos[:, 0] * th + extra_pos[:, 1]) * tw + extra_pos[:, 2]

        # main and reference rows are kept in separate arrays so that every
        # linear map sees the same operands in both branches
        hr = self._main_tokens(x_r, cond_r, main_pos, n_first, sigma)
        hs = self._main_tokens(x_s, cond_s, main_pos, n_first, sigma)
        gr = self._extra_tokens(cond_r, extra_pos, sigma)
        gs = self._extra_tokens(cond_s, extra_pos, sigma)
        emb_r, emb_s = self._embeddings(cond_r), self._embeddings(cond_s)
        n_main = len(hr)

        for blk in self.weights["blocks"]:
            qkv = {}
            for name, src in (("r", hr), ("s", hs), ("rR", gr), ("sR", gs)):
                a = layer_norm(src) if len(src) else src
                qkv[name] = [self._heads(a @ blk[m]) for m in ("q", "k", "v")]
            out_r, out_rR, out_s, out_sR = [], [], [], []
            for i in range(self.heads):
                bt = attn.BranchTokens(
                    attn.QKV(*(t[i] for t in qkv["r"])),
                    attn.QKV(*(t[i] for t in qkv["rR"])),
                    attn.QKV(*(t[i] for t in qkv["s"])),
                    attn.QKV(*(t[i] for t in qkv["sR"])),
                    ref_idx,
                )
                rec_main, rec_ref = attn.isolated_attention(bt)
                bt.style_refs.v = attn.inject_dynamics(bt, xi)
                o1 = attn.out1(bt, masks.ref)
                o2 = attn.out2(bt, masks.ref) if beta else o1
                o3 = attn.out3(bt, masks.combined) if gamma else o1
                o = attn.aggregate(o1, o2, o3, beta, gamma)
                out_r.append(rec_main)
                out_rR.append(rec_ref)
                out_s.append(o[:n_main])
                out_sR.append(o[n_main:])
            hr = hr + self._merge(out_r) @ blk["o"]
            hs = hs + self._merge(out_s) @ blk["o"]
            if len(gr):
                gr = gr + self._merge(out_rR) @ blk["o"]
                gs = gs + self._merge(out_sR) @ blk["o"]
            # QK-Sharing in cross-attention: reconstruction queries and keys, stylization values
            cr = self._cross_attention(blk, hr, emb_r, emb_r)
            cs = self._cross_attention(blk, hr, emb_r, emb_s)
            if len(gr):
                cgr = self._cross_attention(blk, gr, emb_r, emb_r)
                cgs = self._cross_attention(blk, gr, emb_r, emb_s)
            hr, hs = hr + cr, hs + cs
            hr, hs = hr + self._mlp(blk, hr), hs + self._mlp(blk, hs)
            if len(gr):
                gr, gs = gr + cgr, gs + cgs
                gr, gs = gr + self._mlp(blk, gr), gs + self._mlp(blk, gs)
        return self._head(hr[n_first:], x_r.shape), self._head(hs[n_first:], x_s.shape)
