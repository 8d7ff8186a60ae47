"""Two-branch stylization loop: schedules, Euler inversion, reference
arrangement, mask construction, the denoising step and the end-to-end run."""
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import flow as fm
from .attention import attention_diagnostics, spatial_csv, temporal_csv
from .decomposition import ToyCausalCodec, sample_indices
from .errors import ConfigError, NumericalError, ShapeError
from .frequency import IhcConfig, LowPassFilter, ihc_compensate, lambda_schedule, reconstruction_compensate, spectrum_csv, spectrum_profile
from .latents import load_grid, save_grid
from .model import BranchConditioning, TokenMasks, ToyDenoiser, grid_positions
from .synthetic import SyntheticSpec, gen_synthetic

log = logging.getLogger(__name__)

POLICIES = ("first-only", "first-mid-last", "all-sampled")


@dataclass
class GuidanceSchedule:
    sigmas: np.ndarray  # steps + 1 noise levels, 1 -> 0
    lambdas: np.ndarray  # per step
    xis: np.ndarray
    beta: float
    gammas: np.ndarray
    ihc: IhcConfig

    @property
    def steps(self):
        return len(self.sigmas) - 1

    @classmethod
    def build(cls, steps=8, ihc_fraction=0.4, cutoff=0.25, beta=0.3, gamma=0.2, gamma_fraction=0.25):
        if steps < 1:
            raise ConfigError(f"steps must be >= 1, got {steps}")
        if not 0.0 <= gamma_fraction <= 1.0:
            raise ConfigError(f"gamma_fraction must lie in [0, 1], got {gamma_fraction}")
        sigmas = np.linspace(1.0, 0.0, steps + 1)
        lam = lambda_schedule(steps, ihc_fraction)
        xis = np.linspace(0.0, 1.0, steps) if steps > 1 else np.ones(1)
        gammas = np.zeros(steps)
        n_final = int(round(gamma_fraction * steps))
        if n_final:
            gammas[steps - n_final:] = gamma
        return cls.from_arrays(sigmas, lam, xis, beta, gammas, cutoff)

    @classmethod
    def from_arrays(cls, sigmas, lambdas, xis, beta, gammas, cutoff=0.25):
        lambdas = np.asarray(lambdas, np.float64)
        active = np.flatnonzero(lambdas)
        window = (0, int(active[-1]) + 1) if len(active) else (0, 0)
        sched = cls(
            np.asarray(sigmas, np.float64), lambdas, np.asarray(xis, np.float64), float(beta),
            np.asarray(gammas, np.float64), IhcConfig(tuple(lambdas.tolist()), window, LowPassFilter(cutoff)),
        )
        sched.validate()
        return sched

    def validate(self):
        n = self.steps
        if n < 1 or any(len(a) != n for a in (self.lambdas, self.xis, self.gammas)):
            raise ConfigError("schedule arrays must all have one entry per step")
        if (np.diff(self.sigmas) >= 0).any():
            raise ConfigError("sigmas must decrease strictly")
        if self.beta < 0 or (self.gammas < 0).any() or self.beta + self.gammas.max() > 1:
            raise ConfigError(f"need beta, gamma >= 0 and beta + max gamma <= 1 (beta={self.beta})")
        if ((self.xis < 0) | (self.xis > 1)).any():
            raise ConfigError("xi must lie in [0, 1]")


def euler_step(x, v, sigma, sigma_next):
    return x + (sigma_next - sigma) * v


def euler_invert(velocity, x0, schedule: GuidanceSchedule, iters=4):
    """Invert a rectified-flow Euler sampler with fixed-point iteration.

    For each step from sigma_{i+1} back up to sigma_i, solve
    x_i = x_{i+1} + (sigma_i - sigma_{i+1}) * v(x_i, sigma_i)
    starting from x_{i+1}.  Returns the noise and the trajectory
    [x at sigma_0 (= 1), ..., x_0].
    """
    if iters < 1:
        raise ConfigError(f"fixed-point iterations must be >= 1, got {iters}")
    sig = schedule.sigmas
    x_next = np.asarray(x0, np.float64)
    traj = [x_next]
    for i in range(schedule.steps - 1, -1, -1):
        ds = sig[i] - sig[i + 1]
        x = x_next
        for _ in range(iters):
            x = x_next + ds * velocity(x, sig[i])
            if not np.isfinite(x).all():
                raise NumericalError(f"inversion diverged at step {i}")
        traj.append(x)
        x_next = x
    traj.reverse()
    return traj[0], traj


def euler_sample(velocity, noise, schedule: GuidanceSchedule):
    sig = schedule.sigmas
    x = np.asarray(noise, np.float64)
    for i in range(schedule.steps):
        x = euler_step(x, velocity(x, sig[i]), sig[i], sig[i + 1])
    return x


@dataclass
class ReferenceSet:
    frames: tuple  # pixel frame indices, first is 0
    maps: tuple  # latent map index of each reference
    positions: list = None  # per reference, (th*tw, 3) (map, y, x) triples


def arrange_references(T, r, dp, policy="first-mid-last", token_hw=None):
    """Choose reference frames from the sampled sequence.

    ``first-mid-last`` snaps frames 0, (T-1)/2 and T-1 to the nearest sampled
    frames (ties go to the earlier one).
    """
    if policy not in POLICIES:
        raise ConfigError(f"unknown reference policy {policy!r}; expected one of {POLICIES}")
    seq = sample_indices(T, r, dp)
    if policy == "first-only":
        frames = (0,)
    elif policy == "all-sampled":
        frames = seq
    else:
        if len(seq) < 3:
            raise ConfigError(f"first-mid-last needs >= 3 sampled frames, sequence is {seq}")
        arr = np.asarray(seq)
        frames = tuple(int(arr[np.argmin(np.abs(arr - target))]) for target in (0, (T - 1) / 2, T - 1))
        if len(set(frames)) != 3:
            raise ConfigError(f"first-mid-last collapsed to {frames}")
    maps = tuple(seq.index(f) for f in frames)
    positions = None
    if token_hw is not None:
        th, tw = token_hw
        positions = [grid_positions(1, th, tw, m) for m in maps]
    return ReferenceSet(frames, maps, positions)


@dataclass
class GuidanceMasks:
    reference: fm.ReferenceMask
    flow: fm.CorrespondenceMask  # dilated
    combined: fm.CorrespondenceMask
    tokens: TokenMasks


def token_masks(refs: ReferenceSet, ref_mask, flow_mask, combined, patch, r, dp, n_maps, token_hw):
    """Lift pixel-level masks to the denoiser's token layout.

    Main tokens are [first-reference tokens (map 0 positions); video tokens];
    reference tokens follow, one block per additional reference.
    """
    th, tw = token_hw
    pooled_ref = fm.pool_to_tokens(ref_mask, patch, r, dp)
    tok_flow = fm.pool_to_tokens(flow_mask, patch, r, dp)
    tok_comb = fm.pool_to_tokens(combined, patch, r, dp)
    if tok_flow.shape[0] != n_maps * th * tw:
        raise ShapeError(f"pooled mask covers {tok_flow.shape[0]} tokens, latent has {n_maps * th * tw}")

    main_pos = np.concatenate([grid_positions(1, th, tw), grid_positions(n_maps, th, tw)])
    extra = list(zip(refs.maps[1:], pooled_ref.masks[1:]))
    if not extra:
        return TokenMasks(None, tok_flow[np.ix_(_gidx(main_pos, th, tw), _gidx(main_pos, th, tw))])
    extra_pos = np.concatenate([grid_positions(1, th, tw, m) for m, _ in extra])
    novel = np.concatenate([nov.ravel() for _, nov in extra])

    n_main = len(main_pos)
    m_ref = np.ones((n_main, n_main + len(extra_pos)), bool)
    m_ref[:, n_main:] = novel[None, :]

    g_all = _gidx(np.concatenate([main_pos, extra_pos]), th, tw)
    g_main, g_extra = g_all[:n_main], g_all[n_main:]
    combined_tok = np.concatenate([tok_flow[np.ix_(g_all, g_main)], tok_comb[np.ix_(g_all, g_extra)]], axis=1)
    return TokenMasks(m_ref, combined_tok)


def _gidx(pos, th, tw):
    return (pos[:, 0] * th + pos[:, 1]) * tw + pos[:, 2]


def build_masks(flows, refs: ReferenceSet, patch, r, dp, n_maps, token_hw, radius=1) -> GuidanceMasks:
    ref_mask = fm.reference_masks(flows, refs.frames)
    flow = fm.dilate(fm.flow_mask(flows), radius)
    combined = fm.combine_and(flow, ref_mask)
    tokens = token_masks(refs, ref_mask, flow, combined, patch, r, dp, n_maps, token_hw)
    return GuidanceMasks(ref_mask, flow, combined, tokens)


@dataclass
class BranchState:
    x_r: np.ndarray
    x_s: np.ndarray
    cond_r: BranchConditioning
    cond_s: BranchConditioning
    trajectory: list
    masks: TokenMasks = field(default_factory=TokenMasks)


def denoise_step(denoiser: ToyDenoiser, state: BranchState, schedule: GuidanceSchedule, t):
    """One step of the two-branch loop, followed by PnP compensation of the
    reconstruction latent and high-frequency compensation of the stylized one."""
    s0, s1 = schedule.sigmas[t], schedule.sigmas[t + 1]
    v_r, v_s = denoiser.velocity_pair(
        state.x_r, state.x_s, s0, state.cond_r, state.cond_s, state.masks,
        xi=float(schedule.xis[t]), beta=schedule.beta, gamma=float(schedule.gammas[t]),
    )
    x_r = euler_step(state.x_r, v_r, s0, s1)
    x_s = euler_step(state.x_s, v_s, s0, s1)
    target = state.trajectory[t + 1]
    lam = float(schedule.lambdas[t])
    new_s = ihc_compensate(x_s, x_r, target, schedule.ihc, t)
    new_r = reconstruction_compensate(x_r, target, lam)
    if not (np.isfinite(new_r).all() and np.isfinite(new_s).all()):
        raise NumericalError(f"non-finite latent after step {t}")
    return dataclasses.replace(state, x_r=new_r, x_s=new_s)


# -- configuration ------------------------------------------------------------


@dataclass
class RunConfig:
    frames: int = 9
    height: int = 16
    width: int = 16
    channels: int = 3
    latent_channels: int = 4
    patch: tuple = (2, 2)
    r: int = 4
    dp: int = 3
    reference_policy: str = "first-mid-last"
    steps: int = 8
    fixed_point_iters: int = 4
    ihc_fraction: float = 0.4
    lowpass_cutoff: float = 0.25
    beta: float = 0.3
    gamma: float = 0.2
    gamma_fraction: float = 0.25
    dilation_radius: int = 1
    model_width: int = 32
    blocks: int = 2
    heads: int = 2
    temporal_scale: float = 0.0
    seed: int = 0
    codec_seed: int = 0
    content: str = "content.fvg4"
    stylized: str = "stylized.fvg4"
    flows: str = "flows.fvfl"
    output_dir: str = "out"
    synthetic: dict = None
    base_dir: str = field(default=".", repr=False)

    def __post_init__(self):
        self.patch = tuple(self.patch)
        if self.reference_policy not in POLICIES:
            raise ConfigError(f"unknown reference policy {self.reference_policy!r}")
        if (self.frames - 1) % self.r:
            raise ConfigError(f"frames={self.frames} is not 1 + k*r for r={self.r}")
        if self.fixed_point_iters < 1:
            raise ConfigError("fixed_point_iters must be >= 1")
        if self.height % self.patch[0] or self.width % self.patch[1]:
            raise ConfigError(f"patch {self.patch} does not tile {(self.height, self.width)}")
        if self.latent_channels < self.channels:
            raise ConfigError("latent_channels must be >= channels")
        sample_indices(self.frames, self.r, self.dp)

    @classmethod
    def from_dict(cls, data, base_dir="."):
        names = {f.name for f in dataclasses.fields(cls)} - {"base_dir"}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data, base_dir=str(base_dir))
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        return cls.from_dict(data, base_dir=path.parent)

    def path(self, name):
        p = Path(getattr(self, name))
        return p if p.is_absolute() else Path(self.base_dir) / p

    def schedule(self):
        return GuidanceSchedule.build(self.steps, self.ihc_fraction, self.lowpass_cutoff, self.beta, self.gamma, self.gamma_fraction)

    def denoiser(self):
        return ToyDenoiser(self.latent_channels, self.patch, self.model_width, self.blocks, self.heads,
                           temporal_scale=self.temporal_scale, seed=self.seed)

    def codec(self):
        return ToyCausalCodec.seeded(self.channels, self.latent_channels, self.r, self.codec_seed)


def load_inputs(cfg: RunConfig):
    """Content video, fully stylized video and flows, from files or generated."""
    if cfg.synthetic is not None:
        spec = SyntheticSpec.from_dict({"frames": cfg.frames, "height": cfg.height, "width": cfg.width,
                                        "channels": cfg.channels, **cfg.synthetic})
        content, stylized, flows = gen_synthetic(spec)
    else:
        for name in ("content", "stylized", "flows"):
            if not cfg.path(name).exists():
                raise FileNotFoundError(f"missing input {name}: {cfg.path(name)}")
        content = load_grid(cfg.path("content"))
        stylized = load_grid(cfg.path("stylized"))
        flows = fm.load_flows(cfg.path("flows"))
    want = (cfg.frames, cfg.channels, cfg.height, cfg.width)
    for name, v in (("content", content), ("stylized", stylized)):
        if v.shape != want:
            raise ShapeError(f"{name} video has shape {v.shape}, config expects {want}")
    if (flows.T, flows.h, flows.w) != (cfg.frames, cfg.height, cfg.width):
        raise ShapeError(f"flows cover {(flows.T, flows.h, flows.w)}, config expects {want[:1] + want[2:]}")
    return content, stylized, flows


@dataclass
class StylizeResult:
    stylized: np.ndarray  # final stylization latent
    reconstruction: np.ndarray
    frames: np.ndarray  # decoded stylized video
    noise: np.ndarray
    trajectory: list
    masks: GuidanceMasks
    references: ReferenceSet
    files: dict = field(default_factory=dict)

    def digest(self):
        h = hashlib.sha256()
        for a in (self.stylized, self.reconstruction):
            h.update(np.ascontiguousarray(a, np.float32).tobytes())
        return h.hexdigest()


def conditioning(codec, video, refs: ReferenceSet):
    lat = codec.encode_frames(np.asarray(video)[list(refs.frames)]).astype(np.float64)
    return BranchConditioning(lat[0], lat[1:], refs.maps[1:])


def stylize(cfg: RunConfig, schedule: GuidanceSchedule = None, write=True) -> StylizeResult:
    content, stylized, flows = load_inputs(cfg)
    codec = cfg.codec()
    den = cfg.denoiser()
    schedule = schedule or cfg.schedule()
    x0 = codec.encode_video(content).astype(np.float64)
    n_maps = x0.shape[0]
    token_hw = den.token_hw(cfg.height, cfg.width)
    refs = arrange_references(cfg.frames, cfg.r, cfg.dp, cfg.reference_policy, token_hw)
    log.info("references at frames %s (latent maps %s)", refs.frames, refs.maps)

    noise, traj = euler_invert(den, x0, schedule, cfg.fixed_point_iters)
    masks = build_masks(flows, refs, cfg.patch, cfg.r, cfg.dp, n_maps, token_hw, cfg.dilation_radius)

    state = BranchState(noise, noise.copy(), conditioning(codec, content, refs), conditioning(codec, stylized, refs),
                        traj, masks.tokens)
    for t in range(schedule.steps):
        state = denoise_step(den, state, schedule, t)
        log.debug("step %d: |x_s - x_r| = %.4g", t, float(np.abs(state.x_s - state.x_r).max()))

    result = StylizeResult(state.x_s, state.x_r, codec.decode(state.x_s), noise, traj, masks, refs)
    if write:
        result.files = write_outputs(cfg, den, result)
    return result


def attention_maps(den: ToyDenoiser, x, sigma):
    """Block-0 self-attention weights of the plain denoiser and the token positions."""
    rec = []
    den.forward(x, sigma, record=rec)
    th, tw = den.token_hw(*x.shape[-2:])
    return rec[0], grid_positions(x.shape[0], th, tw)


def write_attention_csvs(out_dir, weights, positions, query_index=0):
    temporal, qf, kf, spatial = attention_diagnostics(weights, positions, positions, query_index)
    out_dir = Path(out_dir)
    (out_dir / "attn_temporal.csv").write_text(temporal_csv(temporal, qf, kf))
    (out_dir / "attn_spatial.csv").write_text(spatial_csv(spatial))
    return {"attn_temporal": out_dir / "attn_temporal.csv", "attn_spatial": out_dir / "attn_spatial.csv"}


def write_masks(out_dir, masks: GuidanceMasks):
    out_dir = Path(out_dir)
    files = {
        "flow_mask": out_dir / "flow_mask.fvm6",
        "combined_mask": out_dir / "combined_mask.fvm6",
        "reference_mask": out_dir / "reference_mask.fvg4",
    }
    fm.save_mask(masks.flow, files["flow_mask"])
    fm.save_mask(masks.combined, files["combined_mask"])
    save_grid(masks.reference.masks[:, None].astype(np.float32), files["reference_mask"])
    return files


def write_outputs(cfg: RunConfig, den: ToyDenoiser, result: StylizeResult):
    out = cfg.path("output_dir")
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "stylized_latent": out / "stylized_latent.fvg4",
        "reconstruction_latent": out / "reconstruction_latent.fvg4",
        "stylized_frames": out / "stylized_frames.fvg4",
        "spectrum": out / "spectrum.csv",
    }
    save_grid(result.stylized.astype(np.float32), files["stylized_latent"])
    save_grid(result.reconstruction.astype(np.float32), files["reconstruction_latent"])
    save_grid(result.frames, files["stylized_frames"])
    files["spectrum"].write_text(spectrum_csv(spectrum_profile(result.stylized)))
    files.update(write_masks(out, result.masks))
    weights, pos = attention_maps(den, result.stylized, float(cfg.schedule().sigmas[-2]))
    files.update(write_attention_csvs(out, weights, pos))
    return files
