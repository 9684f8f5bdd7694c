"""Differentiable tensor core.

Tensors are ``torch.Tensor`` objects running on the CPU in 64-bit floats by
default. This module adds the pieces the rest of the package relies on:
finiteness checks after every public op, a single-use backward pass, a
counter-based random generator that is threaded explicitly through every
stochastic call, and a central finite-difference gradient checker.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor

_PRECISIONS = {64: torch.float64, 32: torch.float32}


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class ShapeError(ValueError):
    pass


class BackwardReuseError(RuntimeError):
    pass


def set_precision(bits: int = 64) -> None:
    """Switch the default float type used for new tensors and parameters."""
    if bits not in _PRECISIONS:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    torch.set_default_dtype(_PRECISIONS[bits])


def precision() -> int:
    return 64 if torch.get_default_dtype() == torch.float64 else 32


def ensure_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return x


def tensor(data, requires_grad: bool = False) -> Tensor:
    t = torch.as_tensor(np.asarray(data, dtype=np.float64), dtype=torch.get_default_dtype())
    ensure_finite(t)
    return t.clone().requires_grad_(requires_grad)


# -- ops -------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 1 or b.dim() < 1:
        raise ShapeError("matmul needs at least 1-d operands")
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul inner extents differ: {tuple(a.shape)} x {tuple(b.shape)}")
    try:
        torch.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except RuntimeError as exc:
        raise ShapeError(f"batch dims not broadcastable: {tuple(a.shape)} x {tuple(b.shape)}") from exc
    return ensure_finite(a @ b, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ensure_finite(x, "softmax input")
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def logsumexp(x: Tensor, axis: int = -1, keepdim: bool = False) -> Tensor:
    ensure_finite(x, "logsumexp input")
    m = x.amax(dim=axis, keepdim=True).detach()
    out = m + torch.log(torch.exp(x - m).sum(dim=axis, keepdim=True))
    return out if keepdim else out.squeeze(axis)


def layer_norm(x: Tensor, gain: Tensor | None, bias: Tensor | None, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.mean(dim=-1, keepdim=True)
    xc = x - mu
    var = (xc * xc).mean(dim=-1, keepdim=True)
    y = xc / torch.sqrt(var + eps)
    if gain is not None:
        y = y * gain
    if bias is not None:
        y = y + bias
    return ensure_finite(y, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    return F.gelu(x)


def causal_mask(n_q: int, n_k: int | None = None) -> Tensor:
    """Additive mask: 0 where attention is allowed, -inf above the diagonal."""
    n_k = n_q if n_k is None else n_k
    allowed = torch.ones(n_q, n_k, dtype=torch.bool).tril(diagonal=n_k - n_q)
    return torch.zeros(n_q, n_k).masked_fill(~allowed, float("-inf"))


def attention(q: Tensor, k: Tensor, v: Tensor, causal: bool = False) -> Tensor:
    """Scaled dot-product attention over ``(..., heads, len, dim)`` tensors."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention shapes q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    if causal:
        scores = scores + causal_mask(q.shape[-2], k.shape[-2])
    # -inf entries are masked logits, not overflow; check only what comes out
    m = scores.amax(dim=-1, keepdim=True).detach()
    e = torch.exp(scores - m)
    w = e / e.sum(dim=-1, keepdim=True)
    return ensure_finite(w @ v, "attention")


def exp(x: Tensor) -> Tensor:
    return ensure_finite(torch.exp(x), "exp")


def log(x: Tensor) -> Tensor:
    return ensure_finite(torch.log(x), "log")


def add(a: Tensor, b: Tensor) -> Tensor:
    return ensure_finite(a + b, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return ensure_finite(a * b, "mul")


def gather(x: Tensor, axis: int, index: Tensor) -> Tensor:
    return torch.gather(x, axis, index)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    return torch.cat(list(xs), dim=axis)


def slice_(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    return x.narrow(axis, start, stop - start)


# -- tape ------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation once; a second call on the same loss fails."""
    if getattr(loss, "_deeptok_consumed", False):
        raise BackwardReuseError("backward already ran for this loss; re-record the forward pass")
    if loss.numel() != 1:
        raise ShapeError("backward needs a scalar loss")
    ensure_finite(loss.detach(), "loss")
    loss.backward()
    loss._deeptok_consumed = True


# -- random numbers --------------------------------------------------------


class Rng:
    """Seedable counter-based (Philox) generator.

    ``fork`` derives independent child streams without touching the parent,
    so callers can hand sub-generators to components deterministically.
    """

    def __init__(self, seed: int, spawn_key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.spawn_key = tuple(spawn_key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def fork(self, *key: int) -> "Rng":
        return Rng(self.seed, self.spawn_key + tuple(int(k) for k in key))

    def _t(self, arr: np.ndarray) -> Tensor:
        return torch.from_numpy(np.ascontiguousarray(arr)).to(torch.get_default_dtype())

    def normal(self, shape) -> Tensor:
        return self._t(self._gen.standard_normal(shape))

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> Tensor:
        return self._t(self._gen.uniform(low, high, shape))

    def integers(self, low: int, high: int, size=None) -> np.ndarray | int:
        out = self._gen.integers(low, high, size=size)
        return int(out) if size is None else out

    def bernoulli(self, p: float, shape) -> Tensor:
        return torch.from_numpy(self._gen.random(shape) < p)

    def categorical(self, probs: Tensor) -> Tensor:
        """Draw one index per row of ``probs`` (last axis) by inverse CDF."""
        p = probs.detach().cpu().numpy().astype(np.float64)
        cdf = np.cumsum(p, axis=-1)
        u = self._gen.random(p.shape[:-1] + (1,)) * cdf[..., -1:]
        idx = (cdf <= u).sum(axis=-1)
        idx = np.minimum(idx, p.shape[-1] - 1)
        return torch.from_numpy(np.asarray(idx, dtype=np.int64))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    @property
    def numpy(self) -> np.random.Generator:
        return self._gen

    def get_state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state


# -- gradient checking -----------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    worst_param: int
    worst_index: int

    def ok(self, tol: float) -> bool:
        return self.max_rel_err < tol


def check_gradients(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-4,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f()`` with central differences.

    ``params`` are leaf tensors that ``f`` reads. With ``max_entries`` set, a
    seeded random subset of coordinates per parameter is checked. The relative
    error of one coordinate is ``|g - n| / max(|g|, |n|, floor)``.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    if not torch.isfinite(loss).all():
        raise NonFiniteError("gradient check: loss is not finite")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, grads)]

    pick = np.random.default_rng(seed)
    worst = (0.0, -1, -1)
    count = 0
    with torch.no_grad():
        for pi, (p, g) in enumerate(zip(params, grads)):
            flat = p.view(-1)
            gflat = g.reshape(-1)
            idx = np.arange(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                idx = np.sort(pick.choice(flat.numel(), size=max_entries, replace=False))
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + step
                up = f().item()
                flat[i] = orig - step
                down = f().item()
                flat[i] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise NonFiniteError("gradient check: perturbed loss is not finite")
                num = (up - down) / (2 * step)
                ana = gflat[i].item()
                rel = abs(ana - num) / max(abs(ana), abs(num), floor)
                count += 1
                if rel > worst[0] or worst[1] < 0:
                    worst = (rel, pi, int(i))
    return GradCheckReport(worst[0], count, worst[1], worst[2])
