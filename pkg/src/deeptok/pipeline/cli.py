"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Run directories default to subdirectories of ``$DEEPTOK_RUNS`` (``./runs``).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from .. import ar, checkpoint, data, pnm
from .. import diffusion as dd
from .. import numerics as nx
from ..numerics import NonFiniteError
from .ablate import AXES, ablate, format_rows
from .config import ConfigError, TrainConfig, parse_pairs, resolve, run_root
from .evaluate import decode_token_sets, evaluate, reconstruction_report
from .runlog import log_config
from .train import TrainingError, boundary_clips, load_ar_run, load_tokenizer_run, require_corpus, train_ar, train_tokenizer

log = logging.getLogger("deeptok")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _pair(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    return key.strip(), value


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", dest="overrides", action="append", type=_pair, default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    common.add_argument("--budget", help="named step/corpus budget (full-desk, ci, tiny)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="deeptok", description="Deep-token video modelling on synthetic clips.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="render the synthetic corpus")
    g.add_argument("--out", help="corpus directory")
    g.add_argument("--manifest-only", action="store_true", help="skip writing frame images")

    t = sub.add_parser("train-tokenizer", parents=[common], help="train encoder, query transformer and decoder")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--no-resume", action="store_true")

    a = sub.add_parser("train-ar", parents=[common], help="progressive AR training")
    a.add_argument("--data")
    a.add_argument("--tokenizer")
    a.add_argument("--out")
    a.add_argument("--adapt-decoder", action="store_true")
    a.add_argument("--no-resume", action="store_true")

    r = sub.add_parser("reconstruct", parents=[common], help="boundary-conditioned reconstruction of test clips")
    r.add_argument("--data")
    r.add_argument("--tokenizer")
    r.add_argument("--out")
    r.add_argument("--count", type=int, default=4)

    gen = sub.add_parser("generate", parents=[common], help="sample deep tokens and decode clips")
    gen.add_argument("--tokenizer")
    gen.add_argument("--ar")
    gen.add_argument("--out")
    gen.add_argument("--frames", type=int, default=4)
    gen.add_argument("--caption", default="", help="prompt; empty means unconditional")

    e = sub.add_parser("eval", parents=[common], help="evaluate tokenizer and AR checkpoints")
    e.add_argument("--data")
    e.add_argument("--tokenizer")
    e.add_argument("--ar")
    e.add_argument("--out")

    ab = sub.add_parser("ablate", parents=[common], help="sweep one ablation axis")
    ab.add_argument("--axis", required=True, choices=sorted(AXES))
    ab.add_argument("--data")
    ab.add_argument("--tokenizer", help="reuse a trained tokenizer (ignored for n_tokens)")
    ab.add_argument("--out")
    ab.add_argument("--no-eval", action="store_true")
    return p


def _config(args) -> TrainConfig:
    overrides = dict(args.overrides)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.budget is not None:
        overrides["budget"] = args.budget
    return resolve(args.config, parse_pairs(overrides))


def _dir(value: str | None, default: str) -> Path:
    return Path(value) if value else run_root() / default


def _write_clip(out: Path, clip: torch.Tensor, sidecar: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(clip.numpy()):
        pnm.write(out / f"frame_{t:03d}.{'pgm' if frame.shape[-1] == 1 else 'ppm'}", frame)
    (out / "sidecar.txt").write_text(sidecar + "\n")


def cmd_gen_data(args, cfg: TrainConfig) -> None:
    out = _dir(args.out, "data")
    log_config(cfg, out, "gen-data")
    splits = data.make_splits(cfg.n_train, cfg.n_val, cfg.n_test, cfg.seed, cfg.n_frames, cfg.image_size,
                              n_images=cfg.n_images)
    if args.manifest_only:
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.txt").write_text(splits.manifest)
    else:
        data.write_corpus(out, splits)
    print(f"wrote corpus manifest to {out / 'manifest.txt'}")


def cmd_reconstruct(args, cfg: TrainConfig) -> None:
    tcfg, tok, den = load_tokenizer_run(_dir(args.tokenizer, "tokenizer"))
    out = _dir(args.out, "reconstruct")
    log_config(cfg, out, "reconstruct")
    clips = boundary_clips(require_corpus(_dir(args.data, "data"))["test"], tcfg.clip_frames, args.count, cfg.seed)
    rec, p = dd.reconstruct(tok, den, dd.NoiseSchedule(), clips, steps=cfg.ddim_steps,
                            cfg_scale=cfg.recon_cfg_scale, rescale=cfg.recon_rescale, seed=cfg.seed)
    for i in range(len(rec)):
        _write_clip(out / f"clip_{i:03d}", rec[i],
                    f"clip_{i:03d} seed={cfg.seed} steps={cfg.ddim_steps} cfg_scale={cfg.recon_cfg_scale} "
                    f"rescale={cfg.recon_rescale}")
    rep = reconstruction_report(tok, den, clips, cfg, cfg.seed)
    print(f"psnr {p:.3f} dB  zero-token {rep.zero_psnr:.3f} dB  noise baseline {rep.noise_psnr:.3f} dB")


def cmd_generate(args, cfg: TrainConfig) -> None:
    _, tok, den = load_tokenizer_run(_dir(args.tokenizer, "tokenizer"))
    acfg, model, stats = load_ar_run(_dir(args.ar, "ar"))
    out = _dir(args.out, "generate")
    log_config(cfg, out, "generate")
    if not 1 <= args.frames <= model.cfg.max_frames:
        raise UsageError(f"--frames must be in [1, {model.cfg.max_frames}]")
    ids = ar.text_tokenize([args.caption])
    gen = ar.generate(model, ids, args.frames, seed=cfg.seed)
    tokens = stats.denormalize(gen.tokens)
    clips = decode_token_sets(den, tokens, cfg, cfg.seed)[0]
    stride = acfg.clip_stride
    for n in range(args.frames):
        checkpoint.save(out / f"tokens_{n:02d}.ckpt", {"tokens": tokens[0, n]})
        (out / f"tokens_{n:02d}.txt").write_text(
            f"set_{n:02d} frame_index={n * stride} seed={cfg.seed} caption={args.caption!r}\n")
        _write_clip(out / f"clip_{n:02d}", clips[n],
                    f"clip_{n:02d} seed={cfg.seed} steps={cfg.ddim_steps} cfg_scale={cfg.cfg_scale} "
                    f"rescale={cfg.rescale}")
    print(f"wrote {args.frames} token sets and {args.frames} clips to {out}")


def cmd_eval(args, cfg: TrainConfig) -> None:
    out = _dir(args.out, "eval")
    log_config(cfg, out, "eval")
    rep = evaluate(cfg, _dir(args.data, "data"), _dir(args.tokenizer, "tokenizer"), _dir(args.ar, "ar"), out,
                   seed=cfg.seed)
    print(rep.table())


def cmd_ablate(args, cfg: TrainConfig) -> None:
    out = _dir(args.out, f"ablate-{args.axis}")
    log_config(cfg, out, f"ablate --axis {args.axis}")
    rows = ablate(args.axis, cfg, _dir(args.data, "data"), out,
                  Path(args.tokenizer) if args.tokenizer else None, evaluate_runs=not args.no_eval)
    print(format_rows(rows))


def dispatch(args, cfg: TrainConfig) -> None:
    if args.command == "gen-data":
        cmd_gen_data(args, cfg)
    elif args.command == "train-tokenizer":
        ckpt = train_tokenizer(cfg, _dir(args.data, "data"), _dir(args.out, "tokenizer"), resume=not args.no_resume)
        print(f"tokenizer checkpoint: {ckpt}")
    elif args.command == "train-ar":
        if args.adapt_decoder:
            cfg.adapt_decoder = True
        ckpt = train_ar(cfg, _dir(args.data, "data"), _dir(args.tokenizer, "tokenizer"), _dir(args.out, "ar"),
                        resume=not args.no_resume)
        print(f"AR checkpoint: {ckpt}")
    elif args.command == "reconstruct":
        cmd_reconstruct(args, cfg)
    elif args.command == "generate":
        cmd_generate(args, cfg)
    elif args.command == "eval":
        cmd_eval(args, cfg)
    elif args.command == "ablate":
        cmd_ablate(args, cfg)


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        cfg = _config(args)
        nx.set_precision(cfg.precision)
        dispatch(args, cfg)
    except (UsageError, ConfigError) as e:
        print(f"deeptok: error: {e}", file=sys.stderr)
        return 1
    except (TrainingError, NonFiniteError, checkpoint.CheckpointError, FileNotFoundError, OSError,
            ValueError, RuntimeError) as e:
        print(f"deeptok: failed: {e}", file=sys.stderr)
        return 2
    finally:
        nx.set_precision(64)
    return 0


if __name__ == "__main__":
    sys.exit(main())
