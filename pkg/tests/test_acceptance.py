"""Acceptance criteria, one test each, at their stated tolerances.

Every test records a PASS/FAIL line; the lines are repeated in the
"acceptance criteria" section of the pytest summary.
"""

import math
import time

import numpy as np
import pytest
import torch
from conftest import record

from deeptok import ar, checkpoint
from deeptok import diffusion as dd
from deeptok import gmm
from deeptok.gmm import HeadConfig, MixtureParams
from deeptok.numerics import Rng, check_gradients, tensor
from deeptok.pipeline import cli, config, evaluate, train
from deeptok.pipeline.ablate import ablate

from test_gmm import naive_gmm_nll


def check(criterion: str, ok: bool, detail: str) -> None:
    record(criterion, ok, detail)
    assert ok, detail


# -- 1 ------------------------------------------------------------------------------


def test_ac1_gmm_oracle_equivalence():
    start = time.perf_counter()
    rng = Rng(2024)
    worst = 0.0
    for case in range(1000):
        K, d = rng.integers(1, 5), rng.integers(1, 9)
        means = rng.normal((K, d)).numpy() * 2
        variances = 0.2 + 2 * rng.uniform((K, d)).numpy()
        w = rng.uniform((K,)).numpy() + 0.05
        w /= w.sum()
        x = rng.normal((2, d)).numpy() * 2
        got = gmm.gmm_nll(MixtureParams(tensor(means), tensor(variances), tensor(w)), tensor(x)).item()
        ref = naive_gmm_nll(means, variances, w, x)
        worst = max(worst, abs(got - ref) / max(abs(ref), 1e-300))
    elapsed = time.perf_counter() - start
    check("AC1 GMM oracle equivalence", worst <= 1e-10 and elapsed < 10,
          f"max rel err {worst:.2e} over 1000 cases (<= 1e-10) in {elapsed:.1f} s (< 10 s)")


# -- 2 ------------------------------------------------------------------------------


def test_ac2_degeneration_identities():
    rng = Rng(7)
    exact, worst = True, 0.0
    for i in range(200):
        d = 1 + i % 8
        mu, x = rng.normal((d,)), rng.normal((d,)) * 2
        var = 0.1 + rng.uniform((d,)) * 3
        k1 = MixtureParams(mu[None], var[None], torch.ones(1))
        exact &= gmm.gmm_nll(k1, x).item() == gmm.gaussian_nll(mu, var, x).item()
        unit = gmm.gaussian_nll(mu, torch.ones(d), x).item()
        # l2_loss is the per-element mean, so 1/2 ||x - mu||^2 = (d / 2) * l2_loss
        expected = 0.5 * d * gmm.l2_loss(mu, x).item() + d / 2 * math.log(2 * math.pi)
        worst = max(worst, abs(unit - expected))
    check("AC2 degeneration identities", exact and worst <= 1e-12,
          f"GMM(K=1) == Gaussian exactly: {exact}; unit-variance Gaussian vs 1/2 L2 + const max |diff| {worst:.1e}")


# -- 3 ------------------------------------------------------------------------------


def test_ac3_gradient_checks():
    start = time.perf_counter()
    errs = {}
    # gmm_nll wrt means, variances and weights directly, then through the raw head
    rng = Rng(3)
    means = rng.normal((3, 4)).requires_grad_()
    var = (0.5 + rng.uniform((3, 4))).requires_grad_()
    w = (rng.uniform((3,)) + 0.2).requires_grad_()
    x = rng.normal((5, 4))
    errs["gmm params"] = check_gradients(lambda: gmm.gmm_nll(MixtureParams(means, var, w / w.sum()), x),
                                         [means, var, w]).max_rel_err
    cfg = HeadConfig("gmm", 4, 3)
    raw = (rng.normal((5, cfg.param_count)) * 0.7).requires_grad_()
    errs["gmm raw"] = check_gradients(lambda: gmm.gmm_nll(gmm.raw_to_params(raw, cfg), x), [raw]).max_rel_err

    dcfg = dd.DenoiserConfig(image_size=4, patch=2, clip_frames=2, width=8, layers=1, heads=2, cond_dim=4,
                             n_queries=2)
    den = dd.Denoiser(dcfg, Rng(4))
    gen = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for p in den.parameters():
            p.add_(0.3 * torch.randn(p.shape, generator=gen))
    r = Rng(5)
    batch = dd.ClipBatch(r.uniform((2, 2, 4, 4, 1), -1, 1), r.normal((2, 2, 4)), r.normal((2, 2, 4)),
                         torch.tensor([False, True]))
    t, eps, sched = np.array([50, 900]), r.normal((2, 2, 4, 4, 1)), dd.NoiseSchedule()
    errs["diffusion"] = check_gradients(lambda: dd.diffusion_loss(batch, den, sched, Rng(0), t=t, eps=eps),
                                        list(den.parameters())).max_rel_err

    acfg = ar.ARConfig(token_dim=2, n_q=2, max_frames=2, width=16, layers=2, heads=2, head=HeadConfig("gmm", 2, 2))
    model = ar.ARModel(acfg, Rng(6))
    ab = ar.ARBatch(ar.text_tokenize(["bright circle", "dim square moving up"]), Rng(7).normal((2, 2, 2, 2)))
    errs["AR"] = check_gradients(lambda: ar.nll_step(model, ab), list(model.parameters())).max_rel_err
    elapsed = time.perf_counter() - start
    worst = max(errs.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    check("AC3 gradient checks", worst < 1e-4 and elapsed < 120,
          f"max rel err {detail} (< 1e-4) in {elapsed:.1f} s (< 120 s)")


# -- 4 ------------------------------------------------------------------------------


def test_ac4_dimension_formulas():
    width = HeadConfig("gmm", d=1024, K=16).param_count
    cfg = ar.ARConfig.preset("gpt2", token_dim=1024, n_q=16, max_frames=16, head=HeadConfig("gmm", 1024, 16))
    with torch.device("meta"):
        model = ar.ARModel(cfg, init=False)
    length = cfg.layout(16).total_len
    check("AC4 dimension formulas", width == 32784 and model.output_width == 32784 and length == 352,
          f"head width {width} (model {model.output_width}) == 32784; context length {length} == 352")


# -- 5 ------------------------------------------------------------------------------


def test_ac5_causality():
    cfg = ar.ARConfig(token_dim=3, n_q=3, max_frames=3, width=16, layers=2, heads=2, head=HeadConfig("gmm", 3, 2))
    model = ar.ARModel(cfg, Rng(8))
    lay = cfg.layout(3)
    rng = Rng(9)
    ids = ar.text_tokenize("bright circle moving right fast")
    x = rng.normal((1, 3, 3, 3))
    with torch.no_grad():
        base = model.all_outputs(ids, x)
        failures = 0
        for trial in range(1000):
            ids2, x2 = ids.clone(), x.clone()
            if trial % 5 == 0:
                pos = rng.integers(0, 80)
                ids2[0, pos] = (ids2[0, pos] + 1 + rng.integers(0, 5)) % cfg.vocab_size
            else:
                n, m = rng.integers(0, 3), rng.integers(0, 3)
                x2[0, n, m] += rng.normal((3,)) * 3
                pos = lay.token_position(n, m)
            out = model.all_outputs(ids2, x2)
            failures += not torch.equal(out[:, :pos], base[:, :pos])
    check("AC5 causality", failures == 0, f"{failures}/1000 perturbations changed an earlier position")


# -- 6 ------------------------------------------------------------------------------


def test_ac6_diffusion_algebra():
    s = dd.NoiseSchedule()
    t = np.arange(1, s.T + 1)
    x0, eps = Rng(1).normal((s.T, 16)), Rng(2).normal((s.T, 16))
    ab = s.alpha_bar(t)
    xt = dd.q_sample(x0, ab, eps)
    v = dd.v_target(x0, eps, ab)
    rt = max(float((dd.x0_from_v(xt, v, ab) - x0).abs().max()), float((dd.eps_from_v(xt, v, ab) - eps).abs().max()))

    clean = Rng(3).uniform((2, 3, 4, 4, 1), -0.9, 0.9)

    def oracle(x_t, tt, cond):
        a = dd._expand(s.alpha_bar(tt.numpy()), x_t)
        return (torch.sqrt(a) * x_t - clean) / torch.sqrt(1 - a)

    out = dd.ddim_sample(oracle, s, None, tuple(clean.shape), steps=s.T, cfg_scale=1.0, rescale=0.0, seed=0)
    ddim = float((out - clean).abs().max())

    den = dd.Denoiser(dd.DenoiserConfig(image_size=4, patch=2, clip_frames=2, width=8, layers=1, heads=2,
                                        cond_dim=4, n_queries=2), Rng(4))
    with torch.no_grad():
        den.out.weight.normal_(0, 0.2, generator=torch.Generator().manual_seed(1))
    cond = Rng(5).normal((1, 2, 4))
    a = dd.sample_clips(den, s, cond, cond, steps=20, seed=11)
    b = dd.sample_clips(den, s, cond, cond, steps=20, seed=11)
    same = a.numpy().tobytes() == b.numpy().tobytes()
    check("AC6 diffusion algebra", rt <= 1e-12 and ddim <= 1e-8 and same,
          f"round trip {rt:.1e} (<= 1e-12), oracle DDIM error {ddim:.1e} (<= 1e-8), seed-deterministic {same}")


# -- 7 ------------------------------------------------------------------------------


def test_ac7_multimodality():
    start = time.perf_counter()
    g = evaluate.bimodal_task("gmm", steps=600)
    l2 = evaluate.bimodal_task("l2", steps=600)
    elapsed = time.perf_counter() - start
    half = g.half_gap
    gmm_ok = g.hit_rate >= 0.8 and g.mode_a >= 0.3 and g.mode_b >= 0.3
    l2_ok = l2.min_mode_distance >= half
    check("AC7 multimodality", gmm_ok and l2_ok and elapsed < 600,
          f"GMM hits {g.hit_rate:.3f} (>= 0.8), modes {g.mode_a:.3f}/{g.mode_b:.3f} (>= 0.3 each); "
          f"L2 min distance to a mode {l2.min_mode_distance:.3f} (>= {half:.3f}); {elapsed:.0f} s (< 600 s)")


# -- 8 ------------------------------------------------------------------------------


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    """Full-desk corpus and tokenizer run; the elapsed time covers data and training."""
    root = tmp_path_factory.mktemp("desk")
    start = time.perf_counter()
    assert cli.main(["gen-data", "--manifest-only", "--out", str(root / "data")]) == 0
    assert cli.main(["train-tokenizer", "--data", str(root / "data"), "--out", str(root / "tokenizer")]) == 0
    return root, time.perf_counter() - start


def test_ac8_tokenizer_reconstruction(desk_runs):
    root, train_time = desk_runs
    start = time.perf_counter()
    cfg = config.resolve()
    tcfg, tok, den = train.load_tokenizer_run(root / "tokenizer")
    test = train.require_corpus(root / "data")["test"]
    clips = train.boundary_clips(test, tcfg.clip_frames, cfg.eval_clips, seed=0)
    rep = evaluate.reconstruction_report(tok, den, clips, cfg, seed=0)
    elapsed = train_time + time.perf_counter() - start
    gain, drop = rep.psnr - rep.noise_psnr, rep.psnr - rep.zero_psnr
    check("AC8 tokenizer reconstruction", gain >= 6 and drop >= 3 and elapsed < 1200,
          f"PSNR {rep.psnr:.2f} dB vs noise {rep.noise_psnr:.2f} dB (+{gain:.2f}, need >= 6); zero tokens "
          f"{rep.zero_psnr:.2f} dB (drop {drop:.2f}, need >= 3); boundary/interior MSE "
          f"{rep.boundary_mse:.4f}/{rep.interior_mse:.4f}; {elapsed:.0f} s (< 1200 s)")


# -- 9 ------------------------------------------------------------------------------


def test_ac9_ablation_harness(desk_runs, tmp_path):
    root, _ = desk_runs
    tiny = config.resolve(overrides={"budget": "tiny", "preset": "tiny"})
    tiny_data = tmp_path / "data"
    assert cli.main(["gen-data", "--budget", "tiny", "--manifest-only", "--out", str(tiny_data)]) == 0
    loss_rows = ablate("loss_type", tiny, tiny_data, tmp_path / "loss", evaluate_runs=True, bimodal_steps=20)
    token_rows = ablate("n_tokens", tiny, tiny_data, tmp_path / "tokens", evaluate_runs=True)
    sizes = ablate("model_size", config.resolve(overrides={"budget": "ci"}), root / "data", tmp_path / "size",
                   root / "tokenizer", evaluate_runs=False)
    loss_set = [r.setting for r in loss_rows]
    token_set = [r.setting for r in token_rows]
    losses = {r.setting: r.final_loss for r in sizes}
    trend = losses["tiny"] > losses["small"] > losses["base"]
    check("AC9 ablation harness", loss_set == ["L2", "Gaussian", "GMM-16"] and token_set == ["8", "16", "32"]
          and [r.setting for r in sizes] == ["tiny", "small", "base"] and trend,
          f"loss rows {loss_set}, token rows {token_set}; final loss by size "
          + ", ".join(f"{k} {v:.4f}" for k, v in losses.items()) + f" (larger lower: {trend})")


# -- 10 -----------------------------------------------------------------------------


def test_ac10_determinism_and_persistence(tiny_runs, tmp_path):
    common = ["--budget", "tiny", "--set", "preset=tiny"]
    assert cli.main(["train-tokenizer", *common, "--data", str(tiny_runs / "data"), "--out", str(tmp_path / "tok")]) == 0
    assert cli.main(["train-ar", *common, "--data", str(tiny_runs / "data"), "--tokenizer", str(tmp_path / "tok"),
                     "--out", str(tmp_path / "ar")]) == 0
    same_tok = (tmp_path / "tok" / "metrics.csv").read_bytes() == (tiny_runs / "tokenizer" / "metrics.csv").read_bytes()
    same_ar = (tmp_path / "ar" / "metrics.csv").read_bytes() == (tiny_runs / "ar" / "metrics.csv").read_bytes()
    roundtrip = True
    for name in ("tok/tokenizer.ckpt", "ar/ar.ckpt"):
        blob = (tmp_path / name).read_bytes()
        again = tmp_path / "again.ckpt"
        checkpoint.save(again, checkpoint.load(tmp_path / name))
        roundtrip &= again.read_bytes() == blob
    check("AC10 determinism and persistence", same_tok and same_ar and roundtrip,
          f"tokenizer metrics identical {same_tok}, AR metrics identical {same_ar}, "
          f"checkpoint save/load/save byte-identical {roundtrip}")
