"""Boundary-conditioned clip denoiser: v-prediction training and DDIM sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .layers import Block, LayerNorm, init_params, timestep_embedding, zero_init
from .numerics import NonFiniteError, Rng, Tensor, ensure_finite
from .tokenizer import patchify, unpatchify, zero_out


class UntrainedModelError(RuntimeError):
    pass


class NoiseSchedule:
    """Linear-beta schedule; ``alpha_bar(t)`` for integer steps t in [1, T]."""

    def __init__(self, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        if T < 1:
            raise ValueError("T must be positive")
        self.T = T
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        self._alpha_bar = np.cumprod(1.0 - betas)

    @property
    def alpha_bar_table(self) -> np.ndarray:
        return self._alpha_bar.copy()

    def alpha_bar(self, t) -> Tensor:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"diffusion step out of range [1, {self.T}]")
        return torch.as_tensor(self._alpha_bar[t - 1], dtype=torch.get_default_dtype())

    def q_sample(self, x0: Tensor, t, eps: Tensor) -> Tensor:
        return q_sample(x0, _expand(self.alpha_bar(t), x0), eps)

    def ddim_timesteps(self, steps: int) -> list[int]:
        if not 1 <= steps <= self.T:
            raise ValueError(f"steps must be in [1, {self.T}], got {steps}")
        ts = np.round(np.linspace(self.T, 1, steps)).astype(int)
        return sorted(set(ts.tolist()), reverse=True)


def _expand(ab, like: Tensor) -> Tensor:
    ab = torch.as_tensor(ab, dtype=like.dtype)
    return ab.reshape(ab.shape + (1,) * (like.dim() - ab.dim()))


def q_sample(x0: Tensor, alpha_bar, eps: Tensor) -> Tensor:
    """sqrt(ab) * x0 + sqrt(1 - ab) * eps"""
    if eps.shape != x0.shape:
        raise ValueError("noise must match the clip shape")
    ab = _expand(alpha_bar, x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1 - ab) * eps


def v_target(x0: Tensor, eps: Tensor, alpha_bar) -> Tensor:
    ab = _expand(alpha_bar, x0)
    return torch.sqrt(ab) * eps - torch.sqrt(1 - ab) * x0


def x0_from_v(x_t: Tensor, v: Tensor, alpha_bar) -> Tensor:
    ab = _expand(alpha_bar, x_t)
    return torch.sqrt(ab) * x_t - torch.sqrt(1 - ab) * v


def eps_from_v(x_t: Tensor, v: Tensor, alpha_bar) -> Tensor:
    ab = _expand(alpha_bar, x_t)
    return torch.sqrt(1 - ab) * x_t + torch.sqrt(ab) * v


# -- denoiser ----------------------------------------------------------------


@dataclass
class DenoiserConfig:
    image_size: int = 32
    channels: int = 1
    clip_frames: int = 8
    patch: int = 8
    width: int = 96
    layers: int = 3
    heads: int = 4
    cond_dim: int = 64
    n_queries: int = 16
    T: int = 1000
    prediction: str = "v"  # or "eps"

    def __post_init__(self):
        if self.prediction not in ("v", "eps"):
            raise ValueError("prediction must be 'v' or 'eps'")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2


class Denoiser(nn.Module):
    """Transformer over (frame, patch) tokens cross-attending to 2*N_q deep tokens."""

    def __init__(self, cfg: DenoiserConfig, rng: Rng | None = None):
        super().__init__()
        self.cfg = cfg
        pdim = cfg.patch * cfg.patch * cfg.channels
        self.embed = nn.Linear(pdim, cfg.width)
        self.frame_pos = nn.Parameter(torch.zeros(cfg.clip_frames, 1, cfg.width))
        self.patch_pos = nn.Parameter(torch.zeros(1, cfg.n_patches, cfg.width))
        self.time_mlp = nn.Sequential(nn.Linear(cfg.width, cfg.width), nn.GELU(), nn.Linear(cfg.width, cfg.width))
        self.cond_proj = nn.Linear(cfg.cond_dim, cfg.width)
        self.cond_pos = nn.Parameter(torch.zeros(2 * cfg.n_queries, cfg.width))
        self.null_cond = nn.Parameter(torch.zeros(2 * cfg.n_queries, cfg.cond_dim))
        self.blocks = nn.ModuleList(
            Block(cfg.width, cfg.heads, context_dim=cfg.width) for _ in range(cfg.layers)
        )
        self.norm = LayerNorm(cfg.width)
        self.out = nn.Linear(cfg.width, pdim)
        zero_init(self.out.weight)
        self.register_buffer("steps_trained", torch.zeros((), dtype=torch.int64))
        init_params(self, rng or Rng(0))

    def condition(self, head: Tensor, rear: Tensor, drop: Tensor | None = None) -> Tensor:
        cond = torch.cat([head, rear], dim=1)
        if drop is not None and bool(drop.any()):
            cond = torch.where(drop[:, None, None], self.null_cond.expand_as(cond), cond)
        return cond

    def null_condition(self, batch: int) -> Tensor:
        return self.null_cond.expand(batch, -1, -1)

    def forward(self, x_t: Tensor, t: Tensor, cond: Tensor) -> Tensor:
        c = self.cfg
        b, f = x_t.shape[:2]
        tokens = patchify(x_t.reshape(b * f, c.image_size, c.image_size, c.channels), c.patch)
        h = self.embed(tokens).reshape(b, f, c.n_patches, c.width) + self.frame_pos[:f] + self.patch_pos
        temb = self.time_mlp(timestep_embedding(torch.as_tensor(t), c.width))
        h = h.reshape(b, f * c.n_patches, c.width) + temb[:, None]
        ctx = self.cond_proj(cond) + self.cond_pos
        for blk in self.blocks:
            h = blk(h, context=ctx)
        out = self.out(self.norm(h)).reshape(b * f, c.n_patches, -1)
        return unpatchify(out, c.patch, c.image_size, c.channels).reshape(x_t.shape)


# -- training ----------------------------------------------------------------


@dataclass
class ClipBatch:
    clips: Tensor  # (B, F, H, W, ch)
    cond_head: Tensor  # (B, N_q, C)
    cond_rear: Tensor
    cond_drop_mask: Tensor  # (B,) bool


def draw_drop_mask(rng: Rng, batch: int, rate: float = 0.05) -> Tensor:
    return rng.bernoulli(rate, (batch,))


def diffusion_loss(batch: ClipBatch, denoiser: Denoiser, schedule: NoiseSchedule, rng: Rng,
                   t: np.ndarray | None = None, eps: Tensor | None = None) -> Tensor:
    x0 = batch.clips
    b = x0.shape[0]
    if t is None:
        t = rng.integers(1, schedule.T + 1, size=b)
    if eps is None:
        eps = rng.normal(tuple(x0.shape))
    ab = schedule.alpha_bar(t)
    x_t = q_sample(x0, ab, eps)
    cond = denoiser.condition(batch.cond_head, batch.cond_rear, batch.cond_drop_mask)
    pred = denoiser(x_t, torch.as_tensor(t), cond)
    target = v_target(x0, eps, ab) if denoiser.cfg.prediction == "v" else eps
    loss = ((pred - target) ** 2).mean()
    if not torch.isfinite(loss):
        raise NonFiniteError("diffusion loss is not finite")
    return loss


# -- sampling ----------------------------------------------------------------


def guide(pred_cond: Tensor, pred_uncond: Tensor, scale: float, rescale: float) -> Tensor:
    """Classifier-free guidance followed by per-sample std rescaling."""
    if scale == 1.0:
        guided = pred_cond
    else:
        guided = pred_uncond + scale * (pred_cond - pred_uncond)
    if rescale == 0.0:
        return guided
    dims = tuple(range(1, guided.dim()))
    std_cond = pred_cond.std(dim=dims, keepdim=True)
    std_guided = guided.std(dim=dims, keepdim=True)
    rescaled = guided * (std_cond / std_guided)
    return rescale * rescaled + (1 - rescale) * guided


@torch.no_grad()
def ddim_sample(denoiser, schedule: NoiseSchedule, cond: Tensor, shape: tuple, steps: int = 50,
                cfg_scale: float = 7.5, rescale: float = 0.7, seed: int = 0,
                uncond: Tensor | None = None, clip_x0: bool = True, prediction: str = "v") -> Tensor:
    """Deterministic (eta = 0) DDIM.

    ``denoiser(x_t, t, cond)`` returns the model prediction; ``uncond`` is the
    null condition used for guidance and may be omitted when ``cfg_scale == 1``.
    """
    if steps > schedule.T:
        raise ValueError(f"steps ({steps}) exceeds schedule length ({schedule.T})")
    if cfg_scale < 0 or not 0 <= rescale <= 1:
        raise ValueError("cfg_scale must be >= 0 and rescale in [0, 1]")
    if cfg_scale != 1.0 and uncond is None:
        raise ValueError("guidance needs an unconditional input")
    x = Rng(seed).normal(shape)
    ts = schedule.ddim_timesteps(steps)
    b = shape[0]
    for i, t in enumerate(ts):
        tt = torch.full((b,), t, dtype=torch.int64)
        ab = schedule.alpha_bar(t)
        ab_prev = schedule.alpha_bar(ts[i + 1]) if i + 1 < len(ts) else torch.tensor(1.0)
        p_cond = denoiser(x, tt, cond)
        p_unc = denoiser(x, tt, uncond) if cfg_scale != 1.0 else p_cond
        p = guide(p_cond, p_unc, cfg_scale, rescale)
        if prediction == "v":
            x0 = x0_from_v(x, p, ab)
            eps = eps_from_v(x, p, ab)
        else:
            eps = p
            x0 = (x - torch.sqrt(1 - ab) * eps) / torch.sqrt(ab)
        if clip_x0:
            x0 = x0.clamp(-1.0, 1.0)
            eps = (x - torch.sqrt(ab) * x0) / torch.sqrt(1 - ab)
        x = torch.sqrt(ab_prev) * x0 + torch.sqrt(1 - ab_prev) * eps
    return ensure_finite(x, "ddim sample")


def sample_clips(denoiser: Denoiser, schedule: NoiseSchedule, head: Tensor, rear: Tensor, steps: int = 50,
                 cfg_scale: float = 7.5, rescale: float = 0.7, seed: int = 0) -> Tensor:
    c = denoiser.cfg
    b = head.shape[0]
    cond = denoiser.condition(head, rear)
    shape = (b, c.clip_frames, c.image_size, c.image_size, c.channels)
    return ddim_sample(denoiser, schedule, cond, shape, steps, cfg_scale, rescale, seed,
                       uncond=denoiser.null_condition(b), prediction=c.prediction)


def psnr(x: Tensor, ref: Tensor, data_range: float = 2.0) -> float:
    mse = float(((x - ref) ** 2).mean())
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def noise_baseline_psnr(ref: Tensor, seed: int = 0) -> float:
    """PSNR of uniform noise in [-1, 1] against ``ref``."""
    return psnr(Rng(seed).uniform(tuple(ref.shape), -1.0, 1.0), ref)


@torch.no_grad()
def reconstruct(tokenizer, denoiser: Denoiser, schedule: NoiseSchedule, clip: Tensor, steps: int = 50,
                cfg_scale: float = 1.0, rescale: float = 0.0, seed: int = 0, zero_tokens: int = 0):
    """Encode the head and rear frames of (B, F, H, W, ch) clips and resample the clips.

    Returns (reconstruction, psnr). ``zero_tokens`` zeroes that many leading
    deep tokens of both boundary sets before decoding.
    """
    if int(denoiser.steps_trained) == 0:
        raise UntrainedModelError("denoiser has not been trained")
    if clip.dim() == 4:
        clip = clip[None]
    head, rear = tokenizer(clip[:, 0]), tokenizer(clip[:, -1])
    if zero_tokens:
        head, rear = zero_out(head, zero_tokens), zero_out(rear, zero_tokens)
    rec = sample_clips(denoiser, schedule, head, rear, steps, cfg_scale, rescale, seed)
    return rec, psnr(rec, clip)
