import numpy as np
import pytest
import torch

from deeptok import diffusion as dd
from deeptok import tokenizer as tk
from deeptok.numerics import Rng, check_gradients


def tiny_cfg(**kw):
    base = dict(image_size=4, patch=2, clip_frames=2, width=8, layers=1, heads=2, cond_dim=4, n_queries=2)
    base.update(kw)
    return dd.DenoiserConfig(**base)


class Oracle:
    """Returns the exact v for a known clean clip."""

    def __init__(self, x0, schedule):
        self.x0, self.schedule = x0, schedule

    def __call__(self, x_t, t, cond):
        ab = dd._expand(self.schedule.alpha_bar(t.numpy()), x_t)
        return (torch.sqrt(ab) * x_t - self.x0) / torch.sqrt(1 - ab)


def test_schedule_shape():
    s = dd.NoiseSchedule()
    ab = s.alpha_bar_table
    assert len(ab) == 1000 and np.all(np.diff(ab) < 0)
    assert ab[0] > 0.999 and ab[-1] < 1e-4
    with pytest.raises(ValueError):
        s.alpha_bar(0)
    with pytest.raises(ValueError):
        s.alpha_bar(1001)


def test_q_sample_and_v_trivial_cases():
    x0, eps = Rng(0).normal((3, 4)), Rng(1).normal((3, 4))
    assert torch.equal(dd.q_sample(x0, 1.0, eps), x0)
    assert torch.equal(dd.q_sample(x0, 0.0, eps), eps)
    assert dd.q_sample(torch.ones(1), 0.25, torch.zeros(1)).item() == 0.5
    assert torch.equal(dd.v_target(x0, eps, 1.0), eps)
    assert torch.equal(dd.v_target(x0, eps, 0.0), -x0)
    with pytest.raises(ValueError):
        dd.q_sample(x0, 0.5, eps[:2])


def test_round_trip_all_steps():
    s = dd.NoiseSchedule()
    t = np.arange(1, 1001)
    x0, eps = Rng(2).normal((1000, 6)), Rng(3).normal((1000, 6))
    ab = s.alpha_bar(t)
    x_t = dd.q_sample(x0, ab, eps)
    v = dd.v_target(x0, eps, ab)
    assert (dd.x0_from_v(x_t, v, ab) - x0).abs().max() < 1e-12
    assert (dd.eps_from_v(x_t, v, ab) - eps).abs().max() < 1e-12


def _batch(cfg, b=4, seed=0, drop=None):
    rng = Rng(seed)
    clips = rng.uniform((b, cfg.clip_frames, cfg.image_size, cfg.image_size, cfg.channels), -1, 1)
    head, rear = rng.normal((b, cfg.n_queries, cfg.cond_dim)), rng.normal((b, cfg.n_queries, cfg.cond_dim))
    mask = torch.zeros(b, dtype=torch.bool) if drop is None else drop
    return dd.ClipBatch(clips, head, rear, mask)


def test_loss_zero_for_perfect_and_mean_square_for_zero():
    cfg = tiny_cfg()
    s = dd.NoiseSchedule()
    batch = _batch(cfg)
    t = np.array([1, 10, 500, 1000])
    eps = Rng(5).normal(tuple(batch.clips.shape))
    ab = s.alpha_bar(t)
    target = dd.v_target(batch.clips, eps, ab)

    class Perfect(dd.Denoiser):
        def forward(self, x_t, t_, cond):
            return target

    perfect = Perfect(cfg)
    assert dd.diffusion_loss(batch, perfect, s, Rng(0), t=t, eps=eps).item() == 0.0
    zero = dd.Denoiser(cfg)  # output layer starts at zero
    loss = dd.diffusion_loss(batch, zero, s, Rng(0), t=t, eps=eps).item()
    assert loss == pytest.approx((target**2).mean().item(), abs=1e-14)


def test_condition_drop_rate():
    mask = dd.draw_drop_mask(Rng(11), 10_000)
    assert 0.04 <= mask.double().mean().item() <= 0.06


def test_dropped_condition_uses_null_token():
    d = dd.Denoiser(tiny_cfg(), Rng(1))
    b = _batch(d.cfg, drop=torch.tensor([True, False, False, True]))
    cond = d.condition(b.cond_head, b.cond_rear, b.cond_drop_mask)
    assert torch.equal(cond[0], d.null_cond) and torch.equal(cond[3], d.null_cond)
    assert torch.equal(cond[1, :2], b.cond_head[1])


def test_ddim_oracle_recovers_x0():
    s = dd.NoiseSchedule()
    x0 = Rng(4).uniform((2, 3, 4, 4, 1), -0.9, 0.9)
    out = dd.ddim_sample(Oracle(x0, s), s, None, tuple(x0.shape), steps=1000, cfg_scale=1.0, rescale=0.0, seed=3)
    assert (out - x0).abs().max() < 1e-8
    out50 = dd.ddim_sample(Oracle(x0, s), s, None, tuple(x0.shape), steps=50, cfg_scale=1.0, rescale=0.0, seed=3)
    assert (out50 - x0).abs().max() < 1e-8


def test_guidance_identity_and_rescale():
    c, u = Rng(0).normal((2, 5)), Rng(1).normal((2, 5))
    assert torch.equal(dd.guide(c, u, 1.0, 0.0), c)
    g = dd.guide(c, u, 7.5, 1.0)
    assert torch.allclose(g.std(dim=1), c.std(dim=1), atol=1e-12)
    raw = u + 7.5 * (c - u)
    assert torch.allclose(dd.guide(c, u, 7.5, 0.0), raw, atol=1e-14)


def test_sampling_seed_deterministic_and_validated():
    d = dd.Denoiser(tiny_cfg(), Rng(2))
    with torch.no_grad():
        d.out.weight.normal_(0, 0.1, generator=torch.Generator().manual_seed(0))
    s = dd.NoiseSchedule()
    head = Rng(3).normal((1, 2, 4))
    a = dd.sample_clips(d, s, head, head, steps=10, seed=5)
    b = dd.sample_clips(d, s, head, head, steps=10, seed=5)
    assert a.numpy().tobytes() == b.numpy().tobytes()
    assert not torch.equal(a, dd.sample_clips(d, s, head, head, steps=10, seed=6))
    with pytest.raises(ValueError):
        dd.sample_clips(d, s, head, head, steps=1001)
    with pytest.raises(ValueError):
        dd.ddim_sample(d, s, d.condition(head, head), (1, 2, 4, 4, 1), cfg_scale=-1.0, uncond=d.null_condition(1))


def test_default_sampler_settings():
    import inspect
    sig = inspect.signature(dd.ddim_sample).parameters
    assert (sig["steps"].default, sig["cfg_scale"].default, sig["rescale"].default) == (50, 7.5, 0.7)


def test_diffusion_loss_gradient():
    cfg = tiny_cfg()
    d = dd.Denoiser(cfg, Rng(7))
    gen = torch.Generator().manual_seed(1)
    with torch.no_grad():
        for p in d.parameters():
            p.add_(0.3 * torch.randn(p.shape, generator=gen))
    batch = _batch(cfg, b=2, drop=torch.tensor([False, True]))
    t = np.array([100, 700])
    eps = Rng(9).normal(tuple(batch.clips.shape))
    s = dd.NoiseSchedule()
    params = list(d.parameters())
    report = check_gradients(lambda: dd.diffusion_loss(batch, d, s, Rng(0), t=t, eps=eps), params, max_entries=400)
    assert report.max_rel_err < 1e-4


def test_reconstruct_requires_training():
    tok = tk.Tokenizer(tk.TokenizerConfig(image_size=4, patch=2, width=8, n_queries=2, enc_layers=1, q_layers=1,
                                          enc_heads=2, q_heads=2), Rng(0))
    d = dd.Denoiser(tiny_cfg(cond_dim=8), Rng(1))
    clip = Rng(2).uniform((2, 4, 4, 1), -1, 1)
    with pytest.raises(dd.UntrainedModelError):
        dd.reconstruct(tok, d, dd.NoiseSchedule(), clip)
    d.steps_trained += 1
    rec, p = dd.reconstruct(tok, d, dd.NoiseSchedule(), clip, steps=5)
    assert rec.shape == (1, 2, 4, 4, 1) and np.isfinite(p)


def test_psnr_values():
    x = torch.zeros(10)
    assert dd.psnr(x, x) == float("inf")
    assert dd.psnr(x + 1, x) == pytest.approx(10 * np.log10(4), abs=1e-12)
    assert dd.noise_baseline_psnr(torch.zeros(1000), seed=1) == pytest.approx(10 * np.log10(12), abs=0.3)
