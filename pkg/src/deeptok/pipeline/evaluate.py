"""Evaluation metrics: reconstruction PSNR, held-out NLL, mode coverage, motion and feature Fréchet distance."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .. import ar, data
from .. import diffusion as dd
from .. import numerics as nx
from ..gmm import HeadConfig
from ..numerics import Rng
from .config import TrainConfig
from .train import (TrainingError, boundary_clips, encode_corpus, held_out_nll, load_ar_run, load_tokenizer_run,
                    require_corpus, TokenData, captions)

log = logging.getLogger("deeptok")


# -- Fréchet distance in encoder-feature space -----------------------------------


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(a: np.ndarray, b: np.ndarray) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2) for row-sample features."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    mu_a, mu_b = a.mean(0), b.mean(0)
    s_a, s_b = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    # tr (S_a^1/2 S_b S_a^1/2)^1/2 is the nuclear norm of S_a^1/2 S_b^1/2; this form
    # avoids square roots of roundoff in near-singular covariances
    cross = np.linalg.svd(_sqrtm_psd(s_a) @ _sqrtm_psd(s_b), compute_uv=False).sum()
    return float(((mu_a - mu_b) ** 2).sum() + np.trace(s_a) + np.trace(s_b) - 2 * cross)


@torch.no_grad()
def clip_features(tok, clips: torch.Tensor) -> np.ndarray:
    """Patch-averaged encoder features of every frame of (B, F, H, W, ch) clips."""
    frames = clips.reshape(-1, *clips.shape[2:])
    return tok.features(frames).mean(1).numpy()


# -- bimodal toy sequence task ---------------------------------------------------

BIMODAL_MODES = torch.tensor([[3.0, 3.0], [-3.0, -3.0]])


def bimodal_data(rng: Rng, n: int, noise: float = 0.05) -> torch.Tensor:
    """(n, 1, 2, 2) sequences: token 0 sits at one of two modes, token 1 repeats it."""
    sign = torch.where(rng.uniform((n, 1, 1, 1)) < 0.5, -1.0, 1.0)
    return sign * 3.0 * torch.ones(n, 1, 2, 2) + noise * rng.normal((n, 1, 2, 2))


@dataclass
class BimodalReport:
    head: str
    final_loss: float
    hit_rate: float
    mode_a: float
    mode_b: float
    mean_nearest: float
    min_mode_distance: float

    @property
    def half_gap(self) -> float:
        return float(torch.dist(BIMODAL_MODES[0], BIMODAL_MODES[1])) / 2


def bimodal_task(kind: str, steps: int = 600, batch: int = 64, n_eval: int = 200, seed: int = 0,
                 components: int = 4, lr: float = 3e-3) -> BimodalReport:
    """Train a tiny AR model on the two-mode task and score its first generated token."""
    head = HeadConfig(kind, 2, components)
    cfg = ar.ARConfig(token_dim=2, n_q=2, max_frames=1, width=32, layers=2, heads=2, head=head)
    model = ar.ARModel(cfg, Rng(seed))
    opt = torch.optim.AdamW(model.parameters(), lr=lr, betas=(0.9, 0.98), eps=1e-6, weight_decay=0.05)
    rng = Rng(seed).fork(1)
    text = torch.zeros(batch, cfg.text_len, dtype=torch.int64)
    losses = []
    for _ in range(steps):
        x = bimodal_data(rng, batch)
        loss = ar.nll_step(model, ar.ARBatch(text, x, ar.draw_token_drop(rng, (batch, 1, 2))))
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    gen = ar.generate(model, torch.zeros(n_eval, cfg.text_len, dtype=torch.int64), 1, seed=seed + 5)
    first = gen.tokens[:, 0, 0]
    dist = torch.cdist(first, BIMODAL_MODES)
    near = dist.min(1).values
    return BimodalReport(kind, float(np.mean(losses[-50:])), float((near < 0.2).double().mean()),
                         float((dist[:, 0] < 0.2).double().mean()), float((dist[:, 1] < 0.2).double().mean()),
                         float(near.mean()), float(dist.min()))


# -- checkpoint evaluation -------------------------------------------------------


@dataclass
class EvalReport:
    recon_psnr: float
    zero_token_psnr: float
    noise_psnr: float
    boundary_mse: float
    interior_mse: float
    held_out_nll: float
    gen_motion: float
    static_motion: float
    frechet: float
    frechet_self: float

    def rows(self) -> list[tuple[str, float]]:
        return list(asdict(self).items())

    def table(self) -> str:
        width = max(len(k) for k in asdict(self))
        return "\n".join(f"{k:<{width}}  {v:.6g}" for k, v in self.rows())


@dataclass
class ReconReport:
    psnr: float
    zero_psnr: float
    noise_psnr: float
    boundary_mse: float
    interior_mse: float


@torch.no_grad()
def reconstruction_report(tok, den, clips: torch.Tensor, cfg: TrainConfig, seed: int = 0) -> ReconReport:
    sched = dd.NoiseSchedule()
    kw = dict(steps=cfg.ddim_steps, cfg_scale=cfg.recon_cfg_scale, rescale=cfg.recon_rescale, seed=seed)
    rec, p = dd.reconstruct(tok, den, sched, clips, **kw)
    _, pz = dd.reconstruct(tok, den, sched, clips, zero_tokens=tok.cfg.n_queries, **kw)
    err = ((rec - clips) ** 2).mean(dim=(0, 2, 3, 4))
    return ReconReport(p, pz, dd.noise_baseline_psnr(clips, seed), float((err[0] + err[-1]) / 2),
                       float(err[1:-1].mean()))


@torch.no_grad()
def decode_token_sets(den, tokens: torch.Tensor, cfg: TrainConfig, seed: int) -> torch.Tensor:
    """Clip n is decoded from sets (n, n+1); the last clip holds the final set at both ends."""
    nxt = torch.cat([tokens[:, 1:], tokens[:, -1:]], dim=1)
    b, n = tokens.shape[:2]
    head = tokens.reshape(b * n, *tokens.shape[2:])
    rear = nxt.reshape(b * n, *tokens.shape[2:])
    clips = dd.sample_clips(den, dd.NoiseSchedule(), head, rear, cfg.ddim_steps, cfg.cfg_scale, cfg.rescale, seed)
    return clips.reshape(b, n, *clips.shape[1:])


def evaluate(cfg: TrainConfig, data_dir: Path, tok_dir: Path, ar_dir: Path, out_dir: Path | None = None,
             seed: int = 0) -> EvalReport:
    nx.set_precision(cfg.precision)
    tcfg, tok, den = load_tokenizer_run(tok_dir)
    acfg, model, stats = load_ar_run(ar_dir)
    if acfg.n_q != tcfg.n_q or acfg.tok_width != tcfg.tok_width:
        raise TrainingError(f"tokenizer N_q={tcfg.n_q} does not match AR N_q={acfg.n_q}", 0)
    corpora = require_corpus(data_dir)
    test = corpora["test"]
    clips = boundary_clips(test, tcfg.clip_frames, cfg.eval_clips, seed)
    recon = reconstruction_report(tok, den, clips, cfg, seed)
    held = TokenData(stats.normalize(encode_corpus(tok, test, tcfg.clip_stride)), captions(test))
    nll = held_out_nll(model, held)
    # two generated sets give one boundary pair per prompt
    gen = ar.generate(model, held.text[: cfg.eval_clips], 2, seed=seed)
    tokens = stats.denormalize(gen.tokens)
    gen_clips = decode_token_sets(den, tokens, cfg, seed)[:, 0]
    static = decode_token_sets(den, tokens[:, :1].expand(-1, 2, -1, -1), cfg, seed)[:, 0]
    real_feats = clip_features(tok, clips)
    report = EvalReport(
        recon.psnr, recon.zero_psnr, recon.noise_psnr, recon.boundary_mse, recon.interior_mse, nll,
        float(np.mean([data.motion_score(c.numpy()) for c in gen_clips])),
        float(np.mean([data.motion_score(c.numpy()) for c in static])),
        frechet_distance(clip_features(tok, gen_clips), real_feats),
        frechet_distance(real_feats, real_feats),
    )
    if out_dir is not None:
        write_report(report, Path(out_dir))
    return report


def write_report(report: EvalReport, out_dir: Path, name: str = "eval") -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / f"{name}.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerows((k, repr(float(v))) for k, v in report.rows())
    (out_dir / f"{name}.txt").write_text(report.table() + "\n")
