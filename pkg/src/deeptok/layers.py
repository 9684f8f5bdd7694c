"""Transformer building blocks shared by the tokenizer, denoiser and AR model."""

from __future__ import annotations

import math

import torch
from torch import nn

from . import numerics as nx


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return nx.layer_norm(x, self.gain, self.bias, self.eps)


class Attention(nn.Module):
    """Multi-head attention; ``context`` switches it to cross-attention.

    ``head_dim`` defaults to ``dim // heads`` so widths that do not divide
    evenly (e.g. 1024 wide with 12 heads) still build.
    """

    def __init__(self, dim: int, heads: int, head_dim: int | None = None, context_dim: int | None = None):
        super().__init__()
        self.heads = heads
        self.head_dim = head_dim or max(1, dim // heads)
        inner = self.heads * self.head_dim
        context_dim = context_dim or dim
        self.to_q = nn.Linear(dim, inner)
        self.to_k = nn.Linear(context_dim, inner)
        self.to_v = nn.Linear(context_dim, inner)
        self.out = nn.Linear(inner, dim)

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x, context=None, causal: bool = False):
        ctx = x if context is None else context
        q, k, v = self._split(self.to_q(x)), self._split(self.to_k(ctx)), self._split(self.to_v(ctx))
        y = nx.attention(q, k, v, causal=causal)
        b, h, n, d = y.shape
        return self.out(y.transpose(1, 2).reshape(b, n, h * d))


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * mult)
        self.fc2 = nn.Linear(dim * mult, dim)

    def forward(self, x):
        return self.fc2(nx.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block with optional cross-attention."""

    def __init__(self, dim: int, heads: int, head_dim: int | None = None, context_dim: int | None = None, mlp_mult: int = 4):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, head_dim)
        self.cross = None
        if context_dim is not None:
            self.norm_c = LayerNorm(dim)
            self.cross = Attention(dim, heads, head_dim, context_dim=context_dim)
        self.norm2 = LayerNorm(dim)
        self.ff = FeedForward(dim, mlp_mult)

    def forward(self, x, context=None, causal: bool = False):
        x = x + self.attn(self.norm1(x), causal=causal)
        if self.cross is not None:
            x = x + self.cross(self.norm_c(x), context=context)
        return x + self.ff(self.norm2(x))


class MLP3(nn.Module):
    """Three linear layers with GELU between them."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__()
        self.l1 = nn.Linear(d_in, d_hidden)
        self.l2 = nn.Linear(d_hidden, d_hidden)
        self.l3 = nn.Linear(d_hidden, d_out)

    def forward(self, x):
        return self.l3(nx.gelu(self.l2(nx.gelu(self.l1(x)))))


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half) / half)
    args = t.to(freqs.dtype)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def zero_init(param: nn.Parameter) -> nn.Parameter:
    """Mark a parameter to start at zero under ``init_params``."""
    param._zero_init = True
    return param


def init_params(module: nn.Module, rng: nx.Rng, std: float = 0.5) -> None:
    """Initialise every parameter of ``module`` from ``rng`` in name order.

    Biases and zero-marked parameters start at 0, layer-norm gains at 1,
    linear weights get N(0, 1/fan_in), everything else N(0, std^2).
    """
    gains = {id(m.gain) for m in module.modules() if isinstance(m, LayerNorm)}
    linear = {id(m.weight) for m in module.modules() if isinstance(m, nn.Linear)}
    with torch.no_grad():
        for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
            if id(p) in gains:
                p.fill_(1.0)
            elif name.endswith("bias") or getattr(p, "_zero_init", False):
                p.zero_()
            else:
                scale = p.shape[1] ** -0.5 if id(p) in linear else std
                p.copy_(rng.normal(tuple(p.shape)).to(p.dtype) * scale)
