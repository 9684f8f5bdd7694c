"""Prediction heads over continuous tokens: L2, diagonal Gaussian, diagonal GMM.

The mixture negative log-likelihood is evaluated in the log domain::

    nll(x) = -logsumexp_k( log w_k + sum_j log N(x_j | mu_kj, var_kj) )

averaged over targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .numerics import NonFiniteError, Rng, Tensor, ensure_finite, logsumexp, softmax

VAR_FLOOR = 1e-6
LOG_2PI = math.log(2 * math.pi)
HEAD_KINDS = ("l2", "gaussian", "gmm")


@dataclass(frozen=True)
class HeadConfig:
    kind: str = "gmm"
    d: int = 64
    K: int = 16

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"head kind must be one of {HEAD_KINDS}, got {self.kind!r}")
        if self.d < 1 or self.K < 1:
            raise ValueError("head dimensions must be positive")

    @property
    def components(self) -> int:
        return self.K if self.kind == "gmm" else 1

    @property
    def param_count(self) -> int:
        if self.kind == "l2":
            return self.d
        if self.kind == "gaussian":
            return 2 * self.d
        return self.K * self.d * 2 + self.K

    @property
    def label(self) -> str:
        return {"l2": "L2", "gaussian": "Gaussian"}.get(self.kind, f"GMM-{self.K}")


@dataclass
class MixtureParams:
    means: Tensor  # (..., K, d)
    variances: Tensor  # (..., K, d)
    weights: Tensor  # (..., K)

    def validate(self) -> None:
        if float(self.variances.min()) < VAR_FLOOR * (1 - 1e-12):
            raise ValueError("variance below floor")
        if float((self.weights.sum(-1) - 1).abs().max()) > 1e-9:
            raise ValueError("mixture weights do not sum to one")

    def mean(self) -> Tensor:
        """Mixture mean sum_k w_k mu_k."""
        return (self.weights[..., None] * self.means).sum(-2)


def raw_to_params(raw: Tensor, cfg: HeadConfig) -> MixtureParams:
    """Split a head's raw output (..., P) into constrained mixture parameters.

    Layout of the last axis: K*d means, then K*d raw variances, then K weight
    logits. L2 heads carry means only (unit variance is implied).
    """
    if raw.shape[-1] != cfg.param_count:
        raise ValueError(f"raw width {raw.shape[-1]} != {cfg.param_count} for {cfg}")
    lead = raw.shape[:-1]
    k, d = cfg.components, cfg.d
    means = raw[..., : k * d].reshape(*lead, k, d)
    if cfg.kind == "l2":
        var = torch.ones_like(means)
    else:
        var = F.softplus(raw[..., k * d : 2 * k * d]).reshape(*lead, k, d) + VAR_FLOOR
    if cfg.kind == "gmm":
        weights = softmax(raw[..., 2 * k * d :], axis=-1)
    else:
        weights = torch.ones(*lead, 1, dtype=raw.dtype)
    return MixtureParams(means, var, weights)


def _check_inputs(params: MixtureParams, x: Tensor) -> None:
    if torch.isnan(x).any() or not torch.isfinite(x).all():
        raise NonFiniteError("target contains NaN or Inf")
    if float(params.variances.detach().min()) < VAR_FLOOR * (1 - 1e-12):
        raise ValueError("variance below floor")


def _diag_log_prob(mean: Tensor, var: Tensor, x: Tensor) -> Tensor:
    diff = x - mean
    return -0.5 * (LOG_2PI + torch.log(var) + diff * diff / var).sum(-1)


def component_log_probs(params: MixtureParams, x: Tensor) -> Tensor:
    """log N(x | mu_k, diag var_k) for every component: (..., K)."""
    return _diag_log_prob(params.means, params.variances, x[..., None, :])


def gmm_nll(params: MixtureParams, x: Tensor, reduce: bool = True) -> Tensor:
    """Mixture NLL of targets ``x`` (..., d); mean over leading dims when ``reduce``."""
    _check_inputs(params, x)
    log_w = torch.log(params.weights.clamp_min(1e-300))
    nll = -logsumexp(log_w + component_log_probs(params, x), axis=-1)
    ensure_finite(nll, "gmm nll")
    return nll.mean() if reduce else nll


def gaussian_nll(mean: Tensor, var: Tensor, x: Tensor, reduce: bool = True) -> Tensor:
    """Exact diagonal Gaussian NLL summed over the last axis."""
    var = torch.as_tensor(var, dtype=mean.dtype)
    if float(var.min()) <= 0:
        raise ValueError("variance must be positive")
    nll = -_diag_log_prob(mean, var.expand_as(mean), x)
    return nll.mean() if reduce else nll


def l2_loss(pred: Tensor, x: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    if pred.shape != x.shape:
        raise ValueError("prediction and target shapes differ")
    return ((pred - x) ** 2).mean()


def head_loss(raw: Tensor, x: Tensor, cfg: HeadConfig) -> Tensor:
    params = raw_to_params(raw, cfg)
    if cfg.kind == "l2":
        return l2_loss(params.means[..., 0, :], x)
    return gmm_nll(params, x)


def _draw(params: MixtureParams, rng: Rng) -> Tensor:
    comp = rng.categorical(params.weights)
    idx = comp[..., None, None].expand(*comp.shape, 1, params.means.shape[-1])
    mu = params.means.gather(-2, idx).squeeze(-2)
    var = params.variances.gather(-2, idx).squeeze(-2)
    eps = rng.normal(tuple(mu.shape)).to(mu.dtype)
    return mu + torch.sqrt(var) * eps


def sample_train(params: MixtureParams, rng: Rng) -> Tensor:
    """Reparameterised draw: categorical component pick (no gradient), then mu + sigma * eps."""
    return _draw(params, rng)


@torch.no_grad()
def sample_infer(params: MixtureParams, rng: Rng) -> Tensor:
    return _draw(params, rng)


def predict(params: MixtureParams, cfg: HeadConfig, rng: Rng) -> Tensor:
    """Next-token value at inference: the mean for L2 heads, a sample otherwise."""
    if cfg.kind == "l2":
        return params.means[..., 0, :].detach()
    return sample_infer(params, rng)
