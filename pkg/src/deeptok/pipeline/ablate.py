"""Ablation sweeps over head type, deep-token count and AR model size."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import TrainConfig, replace
from .evaluate import bimodal_task, evaluate
from .runlog import read_metrics
from .train import TOKENIZER_CKPT, train_ar, train_tokenizer

log = logging.getLogger("deeptok")

AXES = {
    "loss_type": [("L2", {"head": "l2"}), ("Gaussian", {"head": "gaussian"}), ("GMM-16", {"head": "gmm", "components": 16})],
    "n_tokens": [("8", {"n_q": 8}), ("16", {"n_q": 16}), ("32", {"n_q": 32})],
    "model_size": [("tiny", {"preset": "tiny"}), ("small", {"preset": "small"}), ("base", {"preset": "base"})],
}

COLUMNS = ["axis", "setting", "final_loss", "held_out_nll", "recon_psnr", "frechet", "gen_motion", "mode_coverage"]


@dataclass
class AblationRow:
    axis: str
    setting: str
    final_loss: float
    held_out_nll: float
    recon_psnr: float
    frechet: float
    gen_motion: float
    mode_coverage: float | None = None


def final_loss(run_dir: Path, window: int = 50) -> float:
    losses = [float(r["loss"]) for r in read_metrics(Path(run_dir) / "metrics.csv")]
    return float(np.mean(losses[-window:]))


def ablate(axis: str, cfg: TrainConfig, data_dir: Path, run_dir: Path, tok_dir: Path | None = None,
           evaluate_runs: bool = True, bimodal_steps: int = 600) -> list[AblationRow]:
    """Train one AR model per setting under the same budget and seed.

    The token-count axis retrains the tokenizer per setting; the other axes
    share one tokenizer (``tok_dir``, trained under ``run_dir`` when absent).
    """
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {sorted(AXES)}")
    run_dir, data_dir = Path(run_dir), Path(data_dir)
    shared = Path(tok_dir) if tok_dir else run_dir / "tokenizer"
    if axis != "n_tokens" and not (shared / TOKENIZER_CKPT).exists():
        train_tokenizer(cfg, data_dir, shared)
    rows = []
    for label, change in AXES[axis]:
        scfg = replace(cfg, **change)
        sdir = run_dir / f"{axis}-{label}"
        if axis == "n_tokens":
            tdir = sdir / "tokenizer"
            if not (tdir / TOKENIZER_CKPT).exists():
                train_tokenizer(scfg, data_dir, tdir)
        else:
            tdir = shared
        train_ar(scfg, data_dir, tdir, sdir / "ar")
        row = AblationRow(axis, label, final_loss(sdir / "ar"), *(float("nan"),) * 4)
        if evaluate_runs:
            rep = evaluate(scfg, data_dir, tdir, sdir / "ar", out_dir=sdir, seed=cfg.seed)
            row.held_out_nll, row.recon_psnr, row.frechet, row.gen_motion = (
                rep.held_out_nll, rep.recon_psnr, rep.frechet, rep.gen_motion)
        if axis == "loss_type":
            row.mode_coverage = bimodal_task(scfg.head, steps=bimodal_steps, seed=cfg.seed,
                                             components=scfg.components).hit_rate
        log.info("ablation %s=%s: final loss %.4f", axis, label, row.final_loss)
        rows.append(row)
    write_rows(rows, run_dir / f"ablate_{axis}.csv")
    return rows


def write_rows(rows: list[AblationRow], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in rows:
            w.writerow(["" if getattr(r, c) is None else (repr(getattr(r, c)) if isinstance(getattr(r, c), float)
                                                        else getattr(r, c)) for c in COLUMNS])


def format_rows(rows: list[AblationRow]) -> str:
    lines = [" ".join(f"{c:>13}" for c in COLUMNS)]
    for r in rows:
        vals = []
        for c in COLUMNS:
            v = getattr(r, c)
            vals.append(f"{v:>13.4f}" if isinstance(v, float) else f"{'' if v is None else v:>13}")
        lines.append(" ".join(vals))
    return "\n".join(lines)
