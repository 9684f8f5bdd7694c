"""Per-frame encoding and query-transformer compression into deep tokens."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .layers import Block, LayerNorm, init_params
from .numerics import Rng, Tensor, ensure_finite

SUPPORTED_N_Q = (8, 16, 32)


@dataclass
class TokenizerConfig:
    image_size: int = 32
    channels: int = 1
    patch: int = 8
    width: int = 64
    enc_layers: int = 2
    enc_heads: int = 4
    q_layers: int = 2
    q_heads: int = 4
    n_queries: int = 16
    head_dim: int | None = None
    feature_pos_emb: bool = True
    freeze_encoder: bool = False

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ValueError("image_size must be a multiple of patch")
        if self.n_queries < 1 or min(self.width, self.enc_layers, self.q_layers, self.q_heads) < 1:
            raise ValueError("tokenizer sizes must be positive")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    @classmethod
    def full_scale(cls) -> "TokenizerConfig":
        """Query transformer at the published width/depth (not trained here)."""
        return cls(image_size=224, channels=3, patch=14, width=1024, q_layers=4, q_heads=12, n_queries=16)


@dataclass
class FrameFeatures:
    frame_index: int
    features: Tensor  # (N, C)


@dataclass
class DeepTokenSet:
    frame_index: int
    tokens: Tensor  # (N_q, C)


def subsample(video, stride: int) -> tuple[list[int], list]:
    """Keep frames 0, f, 2f, ... of ``video``; returns (indices, frames)."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    n = len(video)
    if n == 0:
        raise ValueError("cannot subsample an empty video")
    idx = list(range(0, n, stride))
    return idx, [video[i] for i in idx]


def patchify(frames: Tensor, patch: int) -> Tensor:
    """(B, H, W, ch) -> (B, N, patch*patch*ch), row-major over patches."""
    b, h, w, ch = frames.shape
    x = frames.reshape(b, h // patch, patch, w // patch, patch, ch)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, (h // patch) * (w // patch), patch * patch * ch)


def unpatchify(tokens: Tensor, patch: int, size: int, channels: int) -> Tensor:
    b, n, _ = tokens.shape
    g = size // patch
    x = tokens.reshape(b, g, g, patch, patch, channels)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, size, size, channels)


class FrameEncoder(nn.Module):
    """Patch embedding followed by a small bidirectional transformer."""

    def __init__(self, cfg: TokenizerConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Linear(cfg.patch * cfg.patch * cfg.channels, cfg.width)
        self.pos = nn.Parameter(torch.zeros(cfg.n_patches, cfg.width))
        self.blocks = nn.ModuleList(Block(cfg.width, cfg.enc_heads, cfg.head_dim) for _ in range(cfg.enc_layers))
        self.norm = LayerNorm(cfg.width)
        self.proj = nn.Linear(cfg.width, cfg.width)

    def forward(self, frames: Tensor) -> Tensor:
        c = self.cfg
        if tuple(frames.shape[1:]) != (c.image_size, c.image_size, c.channels):
            raise ValueError(f"frame shape {tuple(frames.shape[1:])} does not match config")
        x = self.embed(patchify(frames, c.patch)) + self.pos
        for blk in self.blocks:
            x = blk(x)
        return self.proj(self.norm(x))


class QueryBank(nn.Module):
    def __init__(self, n_queries: int, width: int):
        super().__init__()
        self.queries = nn.Parameter(torch.zeros(n_queries, width))
        self.slot_pos = nn.Parameter(torch.zeros(n_queries, width))

    @property
    def n_queries(self) -> int:
        return self.queries.shape[0]

    def forward(self) -> Tensor:
        return self.queries + self.slot_pos


class QueryTransformer(nn.Module):
    """Self-attention over ``[queries, features]``; outputs the query slots."""

    def __init__(self, cfg: TokenizerConfig):
        super().__init__()
        self.cfg = cfg
        self.bank = QueryBank(cfg.n_queries, cfg.width)
        self.feature_pos = nn.Parameter(torch.zeros(cfg.n_patches, cfg.width)) if cfg.feature_pos_emb else None
        self.blocks = nn.ModuleList(Block(cfg.width, cfg.q_heads, cfg.head_dim) for _ in range(cfg.q_layers))
        self.norm = LayerNorm(cfg.width)

    def forward(self, features: Tensor) -> Tensor:
        if features.shape[-1] != self.bank.queries.shape[-1]:
            raise ValueError(f"feature channels {features.shape[-1]} != query channels {self.bank.queries.shape[-1]}")
        b = features.shape[0]
        if self.feature_pos is not None:
            features = features + self.feature_pos[: features.shape[1]]
        q = self.bank().expand(b, -1, -1)
        x = torch.cat([q, features], dim=1)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x[:, : self.bank.n_queries])


class Tokenizer(nn.Module):
    """Encoder plus query transformer: frames (B, H, W, ch) -> (B, N_q, C)."""

    def __init__(self, cfg: TokenizerConfig, rng: Rng | None = None):
        super().__init__()
        self.cfg = cfg
        self.encoder = FrameEncoder(cfg)
        self.qformer = QueryTransformer(cfg)
        init_params(self, rng or Rng(0))
        if cfg.freeze_encoder:
            self.encoder.requires_grad_(False)

    def forward(self, frames: Tensor) -> Tensor:
        return ensure_finite(self.qformer(self.encoder(frames)), "deep tokens")

    def features(self, frames: Tensor) -> Tensor:
        return self.encoder(frames)


def encode_frame(tok: Tokenizer, frame: Tensor, frame_index: int = 0) -> FrameFeatures:
    return FrameFeatures(frame_index, tok.encoder(frame[None])[0])


def compress(features: FrameFeatures, qformer: QueryTransformer) -> DeepTokenSet:
    return DeepTokenSet(features.frame_index, qformer(features.features[None])[0])


def tokenize_video(tok: Tokenizer, frames: Tensor, stride: int) -> list[DeepTokenSet]:
    """Deep tokens of frames 0, f, 2f, ... of a (T, H, W, ch) video, each frame independently."""
    idx, _ = subsample(range(frames.shape[0]), stride)
    out = tok(frames[idx])
    return [DeepTokenSet(i, out[j]) for j, i in enumerate(idx)]


def zero_out(tokens, count: int):
    """Replace the first ``count`` token vectors with zeros."""
    t = tokens.tokens if isinstance(tokens, DeepTokenSet) else tokens
    n_q = t.shape[-2]
    if not 0 <= count <= n_q:
        raise ValueError(f"count must be in [0, {n_q}], got {count}")
    keep = torch.ones(n_q, 1, dtype=t.dtype)
    keep[:count] = 0.0
    out = t * keep
    return DeepTokenSet(tokens.frame_index, out) if isinstance(tokens, DeepTokenSet) else out


@dataclass
class CompressionReport:
    frames: int
    low_level_tokens: int
    kept_frames: int
    deep_tokens: int
    ratio: float


def compression_report(n_frames: int, low_tokens_per_frame: int, n_q: int, stride: int | None = None) -> CompressionReport:
    """Low-level token count of a clip vs. its deep-token count.

    With ``stride`` left as None the whole clip is represented by the deep
    tokens of its head frame (stride equal to the clip length).
    """
    stride = n_frames if stride is None else stride
    kept = (n_frames - 1) // stride + 1
    low = n_frames * low_tokens_per_frame
    deep = kept * n_q
    return CompressionReport(n_frames, low, kept, deep, low / deep)


def token_budget(seconds: float, fps: float, tokens_per_frame: int) -> int:
    return int(round(seconds * fps)) * tokens_per_frame

