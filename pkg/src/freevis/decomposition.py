"""Dynamic / appearance decomposition of a temporally compressed video latent.

A seeded linear blockwise codec stands in for a causal video VAE: the first
frame is encoded on its own and every following block of ``r`` frames is
folded into one latent map.  Encoding independently sampled frames gives an
appearance latent; what remains of the video latent is the dynamic residual.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError


def sample_indices(n_frames, r, dp):
    """Frame 0 followed by frames r*j + dp for j = 0 .. (n_frames-1)//r - 1."""
    if r < 1:
        raise ConfigError(f"temporal factor r must be >= 1, got {r}")
    if n_frames < 1:
        raise ConfigError(f"need at least one frame, got {n_frames}")
    if not 0 <= dp <= r:
        raise ConfigError(f"offset must lie in [0, {r}], got {dp}")
    idx = (0,) + tuple(r * j + dp for j in range((n_frames - 1) // r))
    if idx[-1] >= n_frames:
        raise ConfigError(f"offset {dp} puts index {idx[-1]} past the last frame {n_frames - 1}")
    if any(b <= a for a, b in zip(idx, idx[1:])):
        raise ConfigError(f"offset {dp} yields repeated frames {idx}")
    return idx


def latent_count(n_frames, r):
    return 1 + (n_frames - 1) // r


@dataclass(frozen=True)
class ToyCausalCodec:
    """Linear causal codec acting per pixel across channels.

    image_map: (c_lat, c_pix) encoder for a single frame (also frame 0 of a video).
    block_maps: (r, c_lat, c_pix); latent of block j is sum_k block_maps[k] @ frame[1 + r*j + k].
    Decoding uses pseudo-inverses, so when c_lat >= r * c_pix the codec is
    lossless.  With ``static_decoder`` the block decoder is corrected so that the
    latent of a static block decodes to r copies of the frame even when the
    codec is lossy; the correction vanishes in the lossless case.
    """

    image_map: np.ndarray
    block_maps: np.ndarray
    static_decoder: bool = False

    @property
    def r(self):
        return self.block_maps.shape[0]

    @property
    def c_lat(self):
        return self.image_map.shape[0]

    @property
    def c_pix(self):
        return self.image_map.shape[1]

    @classmethod
    def seeded(cls, c_pix=3, c_lat=16, r=4, seed=0):
        """Random codec whose block encoder sees a static block as a single frame
        (block maps sum to the image map)."""
        if r < 1:
            raise ConfigError(f"temporal factor r must be >= 1, got {r}")
        if c_lat < c_pix:
            raise ConfigError("c_lat must be >= c_pix so the image decoder is exact")
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((c_lat, c_pix)) / np.sqrt(c_pix)
        G = rng.standard_normal((r, c_lat, c_pix)) / np.sqrt(c_pix)
        B = A[None] / r + (G - G.mean(axis=0, keepdims=True))
        return cls(A, B, static_decoder=True)

    @classmethod
    def planted(cls, offset, c_pix=3, c_lat=16, r=4, seed=0):
        """Codec whose block latent is the image latent of the frame at ``offset``
        within the block (offset in 1..r), plus independent directions for the
        other frames."""
        if not 1 <= offset <= r:
            raise ConfigError(f"planted offset must lie in [1, {r}], got {offset}")
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((c_lat, c_pix)) / np.sqrt(c_pix)
        B = rng.standard_normal((r, c_lat, c_pix)) / np.sqrt(c_pix)
        B[offset - 1] = A
        return cls(A, B)

    def _stacked_block(self):
        # (c_lat, r * c_pix) with frame-major column blocks
        return np.concatenate(list(self.block_maps), axis=1)

    def block_decoder(self):
        """(r * c_pix, c_lat) matrix mapping a block latent to its r frames."""
        dec = np.linalg.pinv(self._stacked_block())
        if self.static_decoder:
            A = self.image_map
            A_inv = np.linalg.pinv(A)
            repeat = np.tile(A_inv, (self.r, 1))
            dec = dec + (repeat - dec) @ A @ A_inv
        return dec

    def encode_image(self, frame):
        frame = np.asarray(frame, dtype=np.float64)
        return np.einsum("lc,chw->lhw", self.image_map, frame).astype(np.float32)

    def encode_frames(self, frames):
        """Independently encode a stack of frames (n, c_pix, h, w)."""
        frames = np.asarray(frames, dtype=np.float64)
        return np.einsum("lc,nchw->nlhw", self.image_map, frames).astype(np.float32)

    def encode_video(self, video):
        video = np.asarray(video, dtype=np.float64)
        n = video.shape[0]
        if video.ndim != 4 or video.shape[1] != self.c_pix:
            raise ShapeError(f"video must be (N, {self.c_pix}, h, w), got {video.shape}")
        if (n - 1) % self.r:
            raise ShapeError(f"video length {n} is not 1 + k*{self.r}")
        blocks = video[1:].reshape(-1, self.r, *video.shape[1:])
        first = np.einsum("lc,chw->lhw", self.image_map, video[0])[None]
        rest = np.einsum("klc,jkchw->jlhw", self.block_maps, blocks)
        return np.concatenate([first, rest]).astype(np.float32)

    def decode_image(self, z):
        z = np.asarray(z, dtype=np.float64)
        return np.einsum("cl,lhw->chw", np.linalg.pinv(self.image_map), z).astype(np.float32)

    def decode(self, z):
        """Decode (S, c_lat, h, w) latent maps into 1 + (S-1)*r frames."""
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 4 or z.shape[1] != self.c_lat:
            raise ShapeError(f"latent must be (S, {self.c_lat}, h, w), got {z.shape}")
        h, w = z.shape[-2:]
        first = np.einsum("cl,lhw->chw", np.linalg.pinv(self.image_map), z[0])[None]
        inv = self.block_decoder().reshape(self.r, self.c_pix, self.c_lat)
        rest = np.einsum("kcl,jlhw->jkchw", inv, z[1:]).reshape(-1, self.c_pix, h, w)
        return np.concatenate([first, rest]).astype(np.float32)


def appearance(codec: ToyCausalCodec, video, dp):
    """Independently encoded sampled frames, stacked along time."""
    idx = sample_indices(len(video), codec.r, dp)
    return codec.encode_frames(np.asarray(video)[list(idx)])


def dynamic_residual(codec: ToyCausalCodec, video, dp):
    """z(V) - a(V, dp), kept in float64.

    The difference of two float32 values is exact in float64 unless their
    magnitudes differ by more than 2**29, so ``recombine`` restores z(V)
    bit-for-bit in practice.
    """
    z = codec.encode_video(video)
    a = appearance(codec, video, dp)
    return z.astype(np.float64) - a.astype(np.float64)


def recombine(residual, appearance_latent):
    return (np.asarray(residual, np.float64) + np.asarray(appearance_latent, np.float64)).astype(np.float32)


def swap_appearance(codec: ToyCausalCodec, donor, carrier, dp):
    """Decode the carrier's dynamics with the donor's appearance."""
    donor = np.asarray(donor)
    carrier = np.asarray(carrier)
    if donor.shape != carrier.shape:
        raise ShapeError(f"donor {donor.shape} and carrier {carrier.shape} differ")
    return codec.decode(recombine(dynamic_residual(codec, carrier, dp), appearance(codec, donor, dp)))


def mean_abs_error(a, b):
    return float(np.mean(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64))))


def select_offset(codec: ToyCausalCodec, video_a, video_b, r=None, loss=mean_abs_error):
    """Offset minimizing the two-way cross-reconstruction error.

    Offsets rejected by ``sample_indices`` are skipped; ties go to the larger offset.
    """
    r = codec.r if r is None else r
    if r < 1:
        raise ConfigError(f"temporal factor r must be >= 1, got {r}")
    if r != codec.r:
        raise ConfigError(f"r={r} does not match the codec's temporal factor {codec.r}")
    best, best_err = None, np.inf
    for dp in range(r + 1):
        try:
            err = loss(swap_appearance(codec, video_a, video_b, dp), video_a)
            err += loss(swap_appearance(codec, video_b, video_a, dp), video_b)
        except ConfigError:
            continue
        if err <= best_err:
            best, best_err = dp, err
    if best is None:
        raise ConfigError("every offset candidate was rejected")
    return best
