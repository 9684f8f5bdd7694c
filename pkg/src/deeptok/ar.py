"""Causal transformer over a text prefix followed by per-frame deep-token sets.

Sequence layout for ``n_frames`` frames of ``n_q`` tokens::

    [text x 80] [BOV, tok_0 .. tok_{n_q-1}] (frame 0) ... (frame n_frames-1)

Each frame's BOV position predicts its token 0 and token m predicts token
m+1; the last token of a frame predicts nothing (the next BOV is fixed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .data import caption_vocabulary
from .gmm import HeadConfig, MixtureParams, head_loss, predict, raw_to_params
from .layers import MLP3, Block, LayerNorm, init_params
from .numerics import NonFiniteError, Rng, Tensor, ensure_finite
from .tokenizer import DeepTokenSet

TEXT_LEN = 80
PAD, UNK = "[PAD]", "[UNK]"

# width, layers, heads
MODEL_PRESETS = {
    "tiny": (32, 2, 2),
    "small": (64, 3, 4),
    "base": (96, 4, 4),
    # published backbones; accepted for configuration, too large to train here
    "gpt2": (768, 12, 12),
    "gpt2-medium": (1024, 24, 16),
    "gpt2-large": (1280, 36, 20),
    "llama3.2-1b": (2048, 16, 32),
    "llama3.2-3b": (3072, 28, 24),
}


@dataclass(frozen=True)
class SequenceLayout:
    n_frames: int
    n_q: int
    text_len: int = TEXT_LEN

    @property
    def frame_len(self) -> int:
        return 1 + self.n_q

    @property
    def total_len(self) -> int:
        return self.text_len + self.frame_len * self.n_frames

    def bov_position(self, n: int) -> int:
        return self.text_len + n * self.frame_len

    @property
    def bov_positions(self) -> list[int]:
        return [self.bov_position(n) for n in range(self.n_frames)]

    def token_position(self, n: int, m: int) -> int:
        return self.bov_position(n) + 1 + m

    def predictor_position(self, n: int, m: int) -> int:
        """Sequence index whose output predicts token (n, m)."""
        return self.bov_position(n) if m == 0 else self.token_position(n, m - 1)

    def target_of(self, p: int) -> tuple[int, int] | None:
        """Visual token predicted at position p, or None (text, last slot)."""
        if p < self.text_len or p >= self.total_len:
            return None
        n, r = divmod(p - self.text_len, self.frame_len)
        return (n, r) if r < self.n_q else None


class Vocabulary:
    def __init__(self, words: list[str] | None = None):
        self.words = [PAD, UNK] + list(words if words is not None else caption_vocabulary())
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, caption: str, length: int = TEXT_LEN) -> list[int]:
        ids = [self.index.get(w, 1) for w in caption.split()][:length]
        return ids + [0] * (length - len(ids))


def text_tokenize(captions, vocab: Vocabulary | None = None, length: int = TEXT_LEN) -> Tensor:
    """Whitespace-tokenise, then pad or truncate each caption to ``length`` ids."""
    vocab = vocab or Vocabulary()
    if isinstance(captions, str):
        captions = [captions]
    return torch.tensor([vocab.encode(c, length) for c in captions], dtype=torch.int64)


@dataclass
class ARConfig:
    token_dim: int = 64
    n_q: int = 16
    max_frames: int = 10
    width: int = 64
    layers: int = 3
    heads: int = 4
    vocab_size: int = len(Vocabulary())
    head: HeadConfig = field(default_factory=lambda: HeadConfig("gmm", 64, 16))
    text_len: int = TEXT_LEN
    drop_rate: float = 0.05

    def __post_init__(self):
        if self.head.d != self.token_dim:
            raise ValueError("head dimension must equal the token dimension")

    @classmethod
    def preset(cls, name: str, **kw) -> "ARConfig":
        if name not in MODEL_PRESETS:
            raise ValueError(f"unknown model preset {name!r}; choose from {sorted(MODEL_PRESETS)}")
        w, l, h = MODEL_PRESETS[name]
        return cls(width=w, layers=l, heads=h, **kw)

    def layout(self, n_frames: int) -> SequenceLayout:
        return SequenceLayout(n_frames, self.n_q, self.text_len)


@dataclass
class ARBatch:
    text_ids: Tensor  # (B, 80)
    tokens: Tensor  # (B, n_frames, n_q, C)
    drop_mask: Tensor | None = None  # (B, n_frames, n_q) bool


class ARModel(nn.Module):
    def __init__(self, cfg: ARConfig, rng: Rng | None = None, init: bool = True):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.tok_emb = nn.Parameter(torch.zeros(cfg.vocab_size, w))
        self.text_pos = nn.Parameter(torch.zeros(cfg.text_len, w))
        self.bov = nn.Parameter(torch.zeros(w))
        self.null_token = nn.Parameter(torch.zeros(w))
        self.frame_pos = nn.Parameter(torch.zeros(cfg.max_frames, w))
        self.slot_pos = nn.Parameter(torch.zeros(cfg.n_q + 1, w))
        self.in_proj = MLP3(cfg.token_dim, w, w)
        self.blocks = nn.ModuleList(Block(w, cfg.heads) for _ in range(cfg.layers))
        self.norm = LayerNorm(w)
        self.out_proj = MLP3(w, w, cfg.head.param_count)
        if init:
            init_params(self, rng or Rng(0))
            self._init_head_bias()

    def _init_head_bias(self) -> None:
        # unit predicted variance at initialisation: softplus(b) = 1
        h = self.cfg.head
        if h.kind == "l2":
            return
        k, d = h.components, h.d
        with torch.no_grad():
            self.out_proj.l3.bias[k * d : 2 * k * d] = math.log(math.e - 1.0)
            if h.kind == "gmm":
                # spread component means so they are distinguishable from the start
                self.out_proj.l3.bias[: k * d] = torch.linspace(-1.0, 1.0, k).repeat_interleave(d) if k > 1 else 0.0

    @property
    def output_width(self) -> int:
        return self.out_proj.l3.out_features

    def embed(self, text_ids: Tensor, tokens: Tensor, drop_mask: Tensor | None = None) -> Tensor:
        b, n_frames, n_q, _ = tokens.shape
        if n_frames > self.cfg.max_frames:
            raise ValueError(f"{n_frames} frames exceed max_frames={self.cfg.max_frames}")
        if n_q != self.cfg.n_q:
            raise ValueError(f"expected {self.cfg.n_q} tokens per frame, got {n_q}")
        if int(text_ids.max()) >= self.cfg.vocab_size:
            raise ValueError("text id outside the vocabulary")
        text = self.tok_emb[text_ids] + self.text_pos[: text_ids.shape[1]]
        vis = self.in_proj(tokens)
        if drop_mask is not None:
            vis = torch.where(drop_mask[..., None], self.null_token.expand_as(vis), vis)
        bov = self.bov.expand(b, n_frames, 1, -1)
        frames = torch.cat([bov, vis], dim=2) + self.frame_pos[:n_frames, None] + self.slot_pos
        return torch.cat([text, frames.reshape(b, n_frames * (1 + n_q), -1)], dim=1)

    def hidden(self, text_ids: Tensor, tokens: Tensor, drop_mask: Tensor | None = None) -> Tensor:
        h = self.embed(text_ids, tokens, drop_mask)
        for blk in self.blocks:
            h = blk(h, causal=True)
        return self.norm(h)

    def forward(self, text_ids: Tensor, tokens: Tensor, drop_mask: Tensor | None = None) -> Tensor:
        """Raw head outputs (B, n_frames, n_q, P); entry (n, m) predicts token (n, m)."""
        b, n_frames, n_q, _ = tokens.shape
        h = self.hidden(text_ids, tokens, drop_mask)[:, self.cfg.text_len :]
        h = h.reshape(b, n_frames, 1 + n_q, -1)[:, :, :n_q]
        return ensure_finite(self.out_proj(h), "AR head output")

    def all_outputs(self, text_ids: Tensor, tokens: Tensor) -> Tensor:
        """Raw head outputs at every sequence position (B, L, P)."""
        return self.out_proj(self.hidden(text_ids, tokens))


def draw_token_drop(rng: Rng, shape: tuple, rate: float = 0.05) -> Tensor:
    return rng.bernoulli(rate, shape)


def nll_step(model: ARModel, batch: ARBatch) -> Tensor:
    """Teacher-forced loss averaged over every visual-predicting position."""
    raw = model(batch.text_ids, batch.tokens, batch.drop_mask)
    loss = head_loss(raw, batch.tokens, model.cfg.head)
    if not torch.isfinite(loss):
        raise NonFiniteError("AR loss is not finite")
    return loss


@dataclass
class Generation:
    tokens: Tensor  # (B, n_frames, n_q, C)
    raw: Tensor  # (B, n_frames, n_q, P) head outputs that produced each token

    def token_sets(self, b: int = 0, stride: int = 1) -> list[DeepTokenSet]:
        return [DeepTokenSet(n * stride, self.tokens[b, n]) for n in range(self.tokens.shape[1])]


@torch.no_grad()
def generate(model: ARModel, text_ids: Tensor, n_frames: int, seed: int = 0) -> Generation:
    """Sample ``n_frames`` deep-token sets one token at a time, feeding samples back."""
    cfg = model.cfg
    if n_frames > cfg.max_frames:
        raise ValueError(f"{n_frames} frames exceed max_frames={cfg.max_frames}")
    if text_ids.dim() == 1:
        text_ids = text_ids[None]
    b = text_ids.shape[0]
    rng = Rng(seed)
    tokens = torch.zeros(b, n_frames, cfg.n_q, cfg.token_dim)
    raws = torch.zeros(b, n_frames, cfg.n_q, cfg.head.param_count)
    for n in range(n_frames):
        for m in range(cfg.n_q):
            raw = model(text_ids, tokens)[:, n, m]
            raws[:, n, m] = raw
            tokens[:, n, m] = predict(raw_to_params(raw, cfg.head), cfg.head, rng)
    return Generation(tokens, raws)


def step_params(gen: Generation, cfg: ARConfig) -> MixtureParams:
    return raw_to_params(gen.raw, cfg.head)


@dataclass
class TokenStats:
    """Per-channel standardisation applied to deep tokens before AR modelling."""

    mean: Tensor
    std: Tensor

    @classmethod
    def fit(cls, tokens: Tensor) -> "TokenStats":
        flat = tokens.reshape(-1, tokens.shape[-1])
        return cls(flat.mean(0), flat.std(0).clamp_min(1e-6))

    def normalize(self, x: Tensor) -> Tensor:
        return (x - self.mean) / self.std

    def denormalize(self, x: Tensor) -> Tensor:
        return x * self.std + self.mean
