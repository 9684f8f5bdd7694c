"""Tokenizer+decoder training and progressive AR training."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .. import ar, checkpoint, data
from .. import diffusion as dd
from .. import numerics as nx
from ..gmm import HeadConfig, head_loss, l2_loss, raw_to_params, sample_infer
from ..numerics import NonFiniteError, Rng
from ..tokenizer import Tokenizer, TokenizerConfig, subsample
from .config import TrainConfig, replace, resolve
from .runlog import MetricsLog, log_config
from .schedule import cosine_lr, load_optimizer, load_rng, make_optimizer, optimizer_tensors, rng_tensors, set_lr

log = logging.getLogger("deeptok")

TOKENIZER_CKPT = "tokenizer.ckpt"
AR_CKPT = "ar.ckpt"


class TrainingError(RuntimeError):
    """Training stopped early; ``step`` is the step that failed."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


# -- model construction ------------------------------------------------------


def build_tokenizer(cfg: TrainConfig) -> Tokenizer:
    tcfg = TokenizerConfig(image_size=cfg.image_size, patch=cfg.patch, width=cfg.tok_width,
                           enc_layers=cfg.tok_layers, enc_heads=cfg.tok_heads, q_layers=cfg.tok_layers,
                           q_heads=cfg.tok_heads, n_queries=cfg.n_q,
                           freeze_encoder=cfg.freeze_encoder)
    return Tokenizer(tcfg, Rng(cfg.seed).fork(1))


def build_denoiser(cfg: TrainConfig) -> dd.Denoiser:
    dcfg = dd.DenoiserConfig(image_size=cfg.image_size, patch=cfg.patch, clip_frames=cfg.clip_frames,
                             width=cfg.dec_width, layers=cfg.dec_layers, heads=cfg.dec_heads,
                             cond_dim=cfg.tok_width, n_queries=cfg.n_q)
    return dd.Denoiser(dcfg, Rng(cfg.seed).fork(2))


def kept_frames(cfg: TrainConfig) -> int:
    return len(range(0, cfg.n_frames, cfg.clip_stride))


def ar_config(cfg: TrainConfig) -> ar.ARConfig:
    head = HeadConfig(cfg.head, cfg.tok_width, cfg.components)
    return ar.ARConfig.preset(cfg.preset, token_dim=cfg.tok_width, n_q=cfg.n_q, max_frames=kept_frames(cfg),
                              head=head, drop_rate=cfg.token_drop)


def build_ar(cfg: TrainConfig) -> ar.ARModel:
    return ar.ARModel(ar_config(cfg), Rng(cfg.seed).fork(5))


# -- data --------------------------------------------------------------------


def draw_clips(corpus: data.Corpus, rng: Rng, batch: int, clip_frames: int) -> torch.Tensor:
    """Random windows of ``clip_frames`` consecutive frames, (B, F, H, W, ch)."""
    idx = rng.integers(0, len(corpus), size=batch)
    start = rng.integers(0, corpus.n_frames - clip_frames + 1, size=batch)
    clips = np.stack([corpus.frames(int(i))[s : s + clip_frames] for i, s in zip(idx, start)])
    return torch.from_numpy(clips).to(torch.get_default_dtype())


def boundary_clips(corpus: data.Corpus, clip_frames: int, count: int, seed: int) -> torch.Tensor:
    """Deterministic held-out clips for evaluation."""
    return draw_clips(corpus, Rng(seed).fork(77), count, clip_frames)


@torch.no_grad()
def encode_corpus(tok: Tokenizer, corpus: data.Corpus, stride: int, chunk: int = 512) -> torch.Tensor:
    """Deep tokens of the kept frames of every clip: (N, n_kept, N_q, C)."""
    idx, _ = subsample(range(corpus.n_frames), stride)
    frames = torch.from_numpy(np.stack([corpus.frames(i)[idx] for i in range(len(corpus))]))
    flat = frames.reshape(-1, *frames.shape[2:]).to(torch.get_default_dtype())
    out = torch.cat([tok(flat[i : i + chunk]) for i in range(0, len(flat), chunk)])
    return out.reshape(len(corpus), len(idx), *out.shape[1:])


def captions(corpus: data.Corpus) -> torch.Tensor:
    return ar.text_tokenize([corpus.caption(i) for i in range(len(corpus))])


def require_corpus(data_dir: Path) -> dict[str, data.Corpus]:
    try:
        return data.load_corpus(data_dir)
    except FileNotFoundError as e:
        raise TrainingError(str(e), 0) from None


# -- checkpoint state --------------------------------------------------------


def _state(step: int, opt, rng: Rng) -> dict:
    return {"state/step": torch.tensor(step), **optimizer_tensors(opt), **rng_tensors(rng)}


def _fail(run_dir: Path, step: int, err: Exception):
    (run_dir / "FAILED").write_text(f"step={step}\nerror={err}\n")
    raise TrainingError(f"non-finite loss: {err}", step) from err


# -- tokenizer stage ---------------------------------------------------------


def load_config(run_dir: Path) -> TrainConfig:
    path = Path(run_dir) / "config.resolved"
    if not path.exists():
        raise TrainingError(f"no resolved config in {run_dir}", 0)
    return resolve(path)


def load_tokenizer_run(run_dir: Path) -> tuple[TrainConfig, Tokenizer, dd.Denoiser]:
    run_dir = Path(run_dir)
    ckpt = run_dir / TOKENIZER_CKPT
    if not ckpt.exists():
        raise TrainingError(f"no tokenizer checkpoint at {ckpt}", 0)
    cfg = load_config(run_dir)
    tok, den = build_tokenizer(cfg), build_denoiser(cfg)
    tensors = checkpoint.load(ckpt)
    checkpoint.load_module(tok, tensors, "tokenizer/")
    checkpoint.load_module(den, tensors, "denoiser/")
    tok.eval(), den.eval()
    return cfg, tok, den


def train_tokenizer(cfg: TrainConfig, data_dir: Path, run_dir: Path, resume: bool = True,
                    stop_after: int | None = None) -> Path:
    """Jointly train encoder, query transformer and boundary decoder on the diffusion loss.

    Uses a fixed learning rate. ``stop_after`` ends the run early (with a
    checkpoint) to emulate an interruption.
    """
    data_dir, run_dir = Path(data_dir), Path(run_dir)
    nx.set_precision(cfg.precision)
    corpus = require_corpus(data_dir)["train"]
    if corpus.n_frames < cfg.clip_frames:
        raise TrainingError("corpus clips are shorter than the decoder clip length", 0)
    cfg = replace(cfg, n_frames=corpus.n_frames, image_size=corpus.size)
    log_config(cfg, run_dir, "train-tokenizer")
    tok, den = build_tokenizer(cfg), build_denoiser(cfg)
    sched = dd.NoiseSchedule()
    opt = make_optimizer([*tok.parameters(), *den.parameters()], cfg, cfg.tok_lr)
    rng = Rng(cfg.seed).fork(3)
    ckpt = run_dir / TOKENIZER_CKPT
    start = 0
    if resume and ckpt.exists():
        tensors = checkpoint.load(ckpt)
        checkpoint.load_module(tok, tensors, "tokenizer/")
        checkpoint.load_module(den, tensors, "denoiser/")
        load_optimizer(opt, tensors)
        load_rng(rng, tensors)
        start = int(tensors["state/step"])
        log.info("resuming tokenizer run at step %d", start)
    metrics = MetricsLog(run_dir, ["stage", "loss", "lr"], start_step=start)
    end = cfg.tok_steps if stop_after is None else min(cfg.tok_steps, stop_after)

    def save(step):
        den.steps_trained.fill_(step)
        tensors = {**checkpoint.module_tensors(tok, "tokenizer/"), **checkpoint.module_tensors(den, "denoiser/"),
                   **_state(step, opt, rng)}
        checkpoint.save(ckpt, tensors)

    tok.train(), den.train()
    for step in range(start + 1, end + 1):
        x = draw_clips(corpus, rng, cfg.tok_batch, cfg.clip_frames)
        batch = dd.ClipBatch(x, tok(x[:, 0]), tok(x[:, -1]), dd.draw_drop_mask(rng, len(x), cfg.cond_drop))
        try:
            loss = dd.diffusion_loss(batch, den, sched, rng)
        except NonFiniteError as e:
            _fail(run_dir, step, e)
        opt.zero_grad()
        loss.backward()
        opt.step()
        metrics.write(step=step, stage="tokenizer", loss=loss.item(), lr=cfg.tok_lr)
        if step % cfg.checkpoint_every == 0 or step == end:
            save(step)
    if end == start:
        save(start)
    return ckpt


# -- AR stages ---------------------------------------------------------------


@dataclass
class TokenData:
    """Standardised deep tokens and caption ids for one corpus."""

    tokens: torch.Tensor  # (N, F, N_q, C)
    text: torch.Tensor  # (N, 80)


@dataclass
class ARData:
    video: TokenData
    image: TokenData
    val: TokenData
    motion_idx: np.ndarray
    stats: ar.TokenStats


def prepare_ar_data(cfg: TrainConfig, corpora: dict[str, data.Corpus], tok: Tokenizer,
                    stats: ar.TokenStats | None = None) -> ARData:
    stride = cfg.clip_stride
    train, images, val = corpora["train"], corpora["image"], corpora["val"]
    video = encode_corpus(tok, train, stride)
    image = encode_corpus(tok, images, stride)
    held = encode_corpus(tok, val, stride)
    stats = stats or ar.TokenStats.fit(video)
    scores = train.motion_scores()
    lo, hi = data.motion_thresholds(scores, cfg.motion_lo_pct, cfg.motion_hi_pct)
    motion_idx = np.array([i for i, s in enumerate(scores) if lo <= s <= hi], dtype=np.int64)
    return ARData(TokenData(stats.normalize(video), captions(train)),
                  TokenData(stats.normalize(image), captions(images)),
                  TokenData(stats.normalize(held), captions(val)), motion_idx, stats)


def _seq_loss(model: ar.ARModel, text, tokens, drop, mean_only: bool):
    raw = model(text, tokens, drop)
    if mean_only:
        return l2_loss(raw_to_params(raw, model.cfg.head).mean(), tokens)
    return head_loss(raw, tokens, model.cfg.head)


@torch.no_grad()
def held_out_nll(model: ar.ARModel, held: TokenData, batch: int = 32) -> float:
    total, count = 0.0, 0
    for i in range(0, len(held.tokens), batch):
        t = held.tokens[i : i + batch]
        total += head_loss(model(held.text[i : i + batch], t), t, model.cfg.head).item() * len(t)
        count += len(t)
    return total / count


def stage_at(plan: list[tuple[str, int]], step: int) -> tuple[int, str, int, int]:
    """(stage index, kind, first step, last step) containing global ``step``."""
    first = 1
    for i, (kind, n) in enumerate(plan):
        if step < first + n:
            return i, kind, first, first + n - 1
        first += n
    raise ValueError(f"step {step} beyond the stage plan")


def ar_batch(kind: str, d: ARData, rng: Rng, cfg: TrainConfig):
    """Sub-batches [(text, tokens, drop)] for one step plus the image fraction."""
    b = cfg.batch_size
    if kind == "image":
        n_img = b
    elif kind == "motion":
        n_img = 0
    else:
        n_img = int(rng.bernoulli(cfg.image_ratio, (b,)).sum())
    parts = []
    if n_img:
        idx = torch.from_numpy(rng.integers(0, len(d.image.tokens), size=n_img))
        parts.append((d.image.text[idx], d.image.tokens[idx]))
    if b - n_img:
        pool = d.motion_idx if kind == "motion" else np.arange(len(d.video.tokens))
        idx = torch.from_numpy(pool[rng.integers(0, len(pool), size=b - n_img)])
        parts.append((d.video.text[idx], d.video.tokens[idx]))
    out = [(text, toks, ar.draw_token_drop(rng, tuple(toks.shape[:3]), cfg.token_drop)) for text, toks in parts]
    return out, n_img / b


def train_ar(cfg: TrainConfig, data_dir: Path, tok_dir: Path, run_dir: Path, resume: bool = True,
             stop_after: int | None = None) -> Path:
    """Progressive AR training: image, then 1:1 image/video mix, then motion-filtered video."""
    data_dir, tok_dir, run_dir = Path(data_dir), Path(tok_dir), Path(run_dir)
    nx.set_precision(cfg.precision)
    tcfg, tok, den = load_tokenizer_run(tok_dir)
    cfg = replace(cfg, n_q=tcfg.n_q, tok_width=tcfg.tok_width, clip_frames=tcfg.clip_frames,
                  n_frames=tcfg.n_frames, image_size=tcfg.image_size, patch=tcfg.patch)
    corpora = require_corpus(data_dir)
    plan = cfg.stage_plan()
    log_config(cfg, run_dir, "train-ar")
    d = prepare_ar_data(cfg, corpora, tok)
    model = build_ar(cfg)
    rng = Rng(cfg.seed).fork(4)
    total = cfg.total_ar_steps
    ckpt = run_dir / AR_CKPT
    start = 0
    tensors = None
    if resume and ckpt.exists():
        tensors = checkpoint.load(ckpt)
        checkpoint.load_module(model, tensors, "ar/")
        load_rng(rng, tensors)
        start = int(tensors["state/step"])
        log.info("resuming AR run at step %d", start)
    metrics = MetricsLog(run_dir, ["stage", "loss", "lr", "image_frac", "eval_nll"], start_step=start)
    end = total if stop_after is None else min(total, stop_after)
    opt, opt_stage = None, None
    if tensors is not None and 0 < start < total:
        opt_stage = stage_at(plan, start + 1)[0]
        opt = make_optimizer(model.parameters(), cfg, 0.0)
        # moments only carry over within a stage
        if stage_at(plan, start)[0] == opt_stage:
            load_optimizer(opt, tensors)

    def save(step):
        st = {**checkpoint.module_tensors(model, "ar/"), "stats/mean": d.stats.mean, "stats/std": d.stats.std,
              "state/step": torch.tensor(step), **rng_tensors(rng)}
        if opt is not None:
            st.update(optimizer_tensors(opt))
        checkpoint.save(ckpt, st)

    model.train()
    for step in range(start + 1, end + 1):
        si, kind, first, last = stage_at(plan, step)
        if si != opt_stage:
            opt, opt_stage = make_optimizer(model.parameters(), cfg, 0.0), si
            log.info("stage %d (%s): steps %d-%d", si, kind, first, last)
        lr = cosine_lr(step, cfg.peak_lr, cfg.warmup, total)
        set_lr(opt, lr)
        mean_only = (kind == "image" and cfg.head != "l2"
                     and step - first < cfg.l2_warm_fraction * (last - first + 1))
        parts, frac = ar_batch(kind, d, rng, cfg)
        try:
            losses = [_seq_loss(model, text, toks, drop, mean_only) for text, toks, drop in parts]
            weights = [toks.shape[0] * toks.shape[1] for _, toks, _ in parts]
            loss = sum(l * w for l, w in zip(losses, weights)) / sum(weights)
            if not torch.isfinite(loss):
                raise NonFiniteError("AR loss is not finite")
        except NonFiniteError as e:
            _fail(run_dir, step, e)
        opt.zero_grad()
        loss.backward()
        opt.step()
        eval_nll = held_out_nll(model, d.val) if step == last else None
        metrics.write(step=step, stage=kind, loss=loss.item(), lr=lr, image_frac=frac, eval_nll=eval_nll)
        if step % cfg.checkpoint_every == 0 or step == end:
            save(step)
    if end == start:
        save(start)
    if cfg.adapt_decoder and end == total:
        adapt_decoder(cfg, model, den, corpora["train"], d, run_dir)
    return ckpt


def load_ar_run(run_dir: Path) -> tuple[TrainConfig, ar.ARModel, ar.TokenStats]:
    run_dir = Path(run_dir)
    ckpt = run_dir / AR_CKPT
    if not ckpt.exists():
        raise TrainingError(f"no AR checkpoint at {ckpt}", 0)
    cfg = load_config(run_dir)
    model = build_ar(cfg)
    tensors = checkpoint.load(ckpt)
    checkpoint.load_module(model, tensors, "ar/")
    model.eval()
    return cfg, model, ar.TokenStats(tensors["stats/mean"], tensors["stats/std"])


def adapt_decoder(cfg: TrainConfig, model: ar.ARModel, den: dd.Denoiser, corpus: data.Corpus, d: ARData,
                  run_dir: Path) -> Path:
    """Fine-tune the decoder on boundary tokens sampled from the AR model's teacher-forced predictions."""
    rng = Rng(cfg.seed).fork(6)
    sched = dd.NoiseSchedule()
    opt = make_optimizer(den.parameters(), cfg, cfg.tok_lr)
    stride = cfg.clip_stride
    n_kept = d.video.tokens.shape[1]
    den.train()
    for step in range(1, cfg.adapt_steps + 1):
        idx = rng.integers(0, len(corpus), size=cfg.tok_batch)
        n = rng.integers(0, n_kept - 1, size=cfg.tok_batch)
        t_idx = torch.from_numpy(idx)
        with torch.no_grad():
            raw = model(d.video.text[t_idx], d.video.tokens[t_idx])
            pred = d.stats.denormalize(sample_infer(raw_to_params(raw, model.cfg.head), rng))
        ar_rows = torch.arange(len(idx))
        head, rear = pred[ar_rows, torch.from_numpy(n)], pred[ar_rows, torch.from_numpy(n + 1)]
        clips = np.stack([corpus.frames(int(i))[k * stride : k * stride + cfg.clip_frames] for i, k in zip(idx, n)])
        x = torch.from_numpy(clips).to(torch.get_default_dtype())
        batch = dd.ClipBatch(x, head, rear, dd.draw_drop_mask(rng, len(x), cfg.cond_drop))
        loss = dd.diffusion_loss(batch, den, sched, rng)
        opt.zero_grad()
        loss.backward()
        opt.step()
    den.steps_trained.add_(cfg.adapt_steps)
    path = run_dir / "adapted_decoder.ckpt"
    checkpoint.save(path, checkpoint.module_tensors(den, "denoiser/"))
    return path
