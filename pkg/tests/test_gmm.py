import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from deeptok import gmm
from deeptok.gmm import HeadConfig, MixtureParams
from deeptok.numerics import NonFiniteError, Rng, check_gradients, tensor


def naive_gmm_nll(means, variances, weights, X):
    """Linear-domain loop exactly as the reference algorithm prints it."""
    K, d = means.shape
    total = 0.0
    for x in X:
        L = 0.0
        for k in range(K):
            p = 1.0
            for j in range(d):
                var = variances[k, j]
                p *= math.exp(-((x[j] - means[k, j]) ** 2) / (2 * var)) / math.sqrt(2 * math.pi * var)
            L += weights[k] * p
        total += math.log(L)
    return -total / len(X)


def params(means, variances, weights):
    return MixtureParams(tensor(means), tensor(variances), tensor(weights))


def test_full_scale_head_width():
    assert HeadConfig("gmm", d=1024, K=16).param_count == 32784
    assert HeadConfig("gaussian", d=8).param_count == 16
    assert HeadConfig("l2", d=8).param_count == 8


def test_raw_to_params_constraints():
    cfg = HeadConfig("gmm", d=3, K=4)
    p = gmm.raw_to_params(Rng(0).normal((5, cfg.param_count)) * 3, cfg)
    assert p.means.shape == (5, 4, 3) and p.weights.shape == (5, 4)
    p.validate()
    eq = gmm.raw_to_params(torch.cat([torch.zeros(24), torch.full((4,), 2.5)]), cfg)
    assert torch.allclose(eq.weights, torch.full((4,), 0.25), atol=1e-12, rtol=0)
    one = gmm.raw_to_params(Rng(1).normal((HeadConfig("gmm", 3, 1).param_count,)), HeadConfig("gmm", 3, 1))
    assert one.weights.tolist() == [1.0]
    with pytest.raises(ValueError):
        gmm.raw_to_params(torch.zeros(7), cfg)


def test_single_gaussian_at_its_mean():
    p = params([[0.5, -1.0, 2.0]], [[1.0, 1.0, 1.0]], [1.0])
    nll = gmm.gmm_nll(p, tensor([0.5, -1.0, 2.0])).item()
    assert nll == pytest.approx(2.756815599614018, abs=1e-14)


def test_two_component_value():
    # -ln(0.5 N(0|0,1) + 0.5 N(0|10,1)), frozen from a 40-digit evaluation
    p = params([[0.0], [10.0]], [[1.0], [1.0]], [0.5, 0.5])
    assert gmm.gmm_nll(p, tensor([0.0])).item() == pytest.approx(1.612085713764618, abs=1e-14)
    assert naive_gmm_nll(p.means.numpy(), p.variances.numpy(), p.weights.numpy(), [[0.0]]) == pytest.approx(
        1.612085713764618, abs=1e-14)


def test_far_mode_is_finite():
    p = params([[0.0], [10.0]], [[1.0], [1.0]], [0.5, 0.5])
    nll = gmm.gmm_nll(p, tensor([1000.0])).item()
    assert math.isfinite(nll)
    # 40-digit reference value
    assert nll == pytest.approx(490051.6120857138, rel=1e-14)


def test_errors():
    p = params([[0.0]], [[1e-9]], [1.0])
    with pytest.raises(ValueError):
        gmm.gmm_nll(p, tensor([0.0]))
    with pytest.raises(NonFiniteError):
        gmm.gmm_nll(params([[0.0]], [[1.0]], [1.0]), torch.tensor([float("nan")]))
    with pytest.raises(ValueError):
        gmm.gaussian_nll(tensor([0.0]), tensor([0.0]), tensor([0.0]))


def test_gaussian_nll_identities():
    rng = Rng(2)
    mu, x = rng.normal((5,)), rng.normal((5,))
    d = 5
    lhs = gmm.gaussian_nll(mu, torch.ones(5), x).item()
    assert lhs == pytest.approx(0.5 * ((x - mu) ** 2).sum().item() + d / 2 * math.log(2 * math.pi), abs=1e-12)
    var = torch.full((5,), 0.3)
    assert gmm.gaussian_nll(mu, var, mu).item() == pytest.approx(d / 2 * (math.log(2 * math.pi) + math.log(0.3)),
                                                                abs=1e-12)
    k1 = MixtureParams(mu[None], var[None], torch.ones(1))
    assert gmm.gmm_nll(k1, x).item() == gmm.gaussian_nll(mu, var, x).item()


def test_l2_loss_cases():
    x = Rng(3).normal((4, 6))
    assert gmm.l2_loss(x, x).item() == 0.0
    assert gmm.l2_loss(x + 1, x).item() == pytest.approx(1.0, abs=1e-15)
    # per-element mean: d * l2 = 2 * sigma^2 * (gaussian_nll - const) at sigma^2 = 1
    mu, t = Rng(4).normal((6,)), Rng(5).normal((6,))
    const = 3 * math.log(2 * math.pi)
    assert 6 * gmm.l2_loss(mu, t).item() == pytest.approx(2 * (gmm.gaussian_nll(mu, torch.ones(6), t).item() - const),
                                                        abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 8), st.integers(0, 10_000))
def test_log_domain_matches_naive(K, d, seed):
    rng = Rng(seed)
    means = rng.normal((K, d)).numpy()
    variances = (0.3 + rng.uniform((K, d)).numpy())
    logits = rng.normal((K,)).numpy()
    w = np.exp(logits) / np.exp(logits).sum()
    X = rng.normal((3, d)).numpy()
    got = gmm.gmm_nll(params(means, variances, w), tensor(X)).item()
    ref = naive_gmm_nll(means, variances, w, X)
    assert abs(got - ref) <= 1e-10 * abs(ref) + 1e-300


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 10_000))
def test_uniform_mixture_logsumexp_bound(K, d, seed):
    rng = Rng(seed)
    p = MixtureParams(rng.normal((K, d)) * 3, 0.1 + rng.uniform((K, d)), torch.full((K,), 1.0 / K))
    x = rng.normal((d,)) * 3
    per_comp = -gmm.component_log_probs(p, x)
    assert gmm.gmm_nll(p, x).item() >= per_comp.min().item() - math.log(K) - 1e-12


@pytest.mark.parametrize("K", [1, 2, 4])
def test_gmm_gradients_wrt_raw(K):
    cfg = HeadConfig("gmm", d=3, K=K)
    raw = (Rng(K).normal((2, cfg.param_count)) * 0.7).requires_grad_()
    x = Rng(10 + K).normal((2, 3))
    report = check_gradients(lambda: gmm.gmm_nll(gmm.raw_to_params(raw, cfg), x), [raw])
    assert report.max_rel_err < 1e-6


def test_sample_train_limits():
    mu = tensor([[1.5, -2.0]])
    p = MixtureParams(mu, torch.full((1, 2), gmm.VAR_FLOOR), torch.ones(1))
    rng = Rng(0)
    for _ in range(5):
        s = gmm.sample_train(p, rng)
        assert torch.all((s - mu[0]).abs() < math.sqrt(gmm.VAR_FLOOR) * 6)
    two = MixtureParams(tensor([[0.0], [100.0]]).expand(50, 2, 1), torch.ones(50, 2, 1) * 1e-4,
                        tensor([1.0, 0.0]).expand(50, 2))
    assert torch.all(gmm.sample_train(two, rng).abs() < 1.0)


def test_sample_train_gradient_flows_to_selected_component():
    means = tensor([[1.0, 2.0], [3.0, 4.0]]).requires_grad_()
    var = tensor([[0.5, 0.5], [0.5, 0.5]]).requires_grad_()
    p = MixtureParams(means, var, tensor([0.0, 1.0]))
    gmm.sample_train(p, Rng(0)).sum().backward()
    assert means.grad[0].abs().sum() == 0 and torch.all(means.grad[1] == 1.0)
    assert var.grad[1].abs().sum() > 0


def test_component_frequencies_match_weights():
    w = tensor([0.1, 0.2, 0.3, 0.4])
    p = MixtureParams(tensor([[0.0], [10.0], [20.0], [30.0]]).expand(20000, 4, 1), torch.full((20000, 4, 1), 1e-4),
                      w.expand(20000, 4))
    s = gmm.sample_train(p, Rng(7)).squeeze(-1)
    comp = torch.round(s / 10).long()
    freq = torch.bincount(comp, minlength=4).double() / 20000
    assert torch.all((freq - w).abs() <= 0.01)


def test_sample_infer_deterministic_and_moments():
    means = tensor([[0.0, 1.0], [2.0, -1.0], [-3.0, 0.5]])
    var = tensor([[0.5, 1.0], [0.2, 0.3], [1.5, 0.1]])
    w = tensor([0.2, 0.5, 0.3])
    n = 50000
    p = MixtureParams(means.expand(n, 3, 2), var.expand(n, 3, 2), w.expand(n, 3))
    a = gmm.sample_infer(p, Rng(1))
    assert torch.equal(a, gmm.sample_infer(p, Rng(1)))
    mix_mean = (w[:, None] * means).sum(0)
    mix_var = (w[:, None] * (var + means**2)).sum(0) - mix_mean**2
    se = torch.sqrt(mix_var / n)
    assert torch.all((a.mean(0) - mix_mean).abs() < 3 * se)
    assert torch.all(((a.var(0) - mix_var) / mix_var).abs() < 0.05)
    assert not a.requires_grad


def _fit_head(kind, data, steps=1500, K=2):
    cfg = HeadConfig(kind, d=2, K=K)
    rng = Rng(0)
    raw = (rng.normal((cfg.param_count,)) * 0.5).requires_grad_()
    opt = torch.optim.Adam([raw], lr=0.05)
    for _ in range(steps):
        loss = gmm.head_loss(raw.expand(len(data), -1), data, cfg)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return gmm.raw_to_params(raw.detach(), cfg)


def test_mode_recovery_gmm_vs_l2():
    rng = Rng(123)
    n = 2000
    signs = torch.where(rng.uniform((n, 1)) < 0.5, -1.0, 1.0)
    modes = torch.tensor([[3.0, 3.0], [-3.0, -3.0]])
    data = signs * 3.0 + 0.3 * rng.normal((n, 2))
    p = _fit_head("gmm", data)
    for m in modes:
        assert (p.means - m).norm(dim=-1).min().item() < 0.2
    l2 = _fit_head("l2", data).means[0, 0]
    assert min((l2 - m).norm().item() for m in modes) >= 2.5
