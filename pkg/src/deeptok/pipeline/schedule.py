"""Learning-rate schedule, optimizer construction and optimizer/RNG state archiving."""

from __future__ import annotations

import math

import numpy as np
import torch

from ..numerics import Rng
from .config import TrainConfig


def cosine_lr(step: int, peak: float, warmup: int, total: int) -> float:
    """Linear warmup to ``peak`` at ``warmup``, cosine decay to 0 at ``total``.

    Step 0 gives 0, so the first optimizer step (step 1) uses peak / warmup.
    """
    if step <= 0:
        return 0.0
    if step < warmup:
        return peak * step / warmup
    if step >= total:
        return 0.0
    progress = (step - warmup) / (total - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def make_optimizer(params, cfg: TrainConfig, lr: float) -> torch.optim.AdamW:
    return torch.optim.AdamW(list(params), lr=lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps,
                             weight_decay=cfg.weight_decay)


def set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr


def optimizer_tensors(opt: torch.optim.Optimizer, prefix: str = "optim/") -> dict[str, torch.Tensor]:
    out = {}
    params = [p for g in opt.param_groups for p in g["params"]]
    for i, p in enumerate(params):
        st = opt.state.get(p)
        if not st:
            continue
        for key, val in st.items():
            out[f"{prefix}{i:04d}/{key}"] = torch.as_tensor(val).clone()
    return out


def load_optimizer(opt: torch.optim.Optimizer, tensors: dict[str, torch.Tensor], prefix: str = "optim/") -> None:
    params = [p for g in opt.param_groups for p in g["params"]]
    for name, val in tensors.items():
        if not name.startswith(prefix):
            continue
        idx, key = name[len(prefix):].split("/")
        p = params[int(idx)]
        # moments follow the parameter dtype; the step counter keeps its own
        if key != "step":
            val = val.to(p.dtype)
        opt.state[p][key] = val.clone()


def rng_tensors(rng: Rng, prefix: str = "rng/") -> dict[str, torch.Tensor]:
    st = rng.get_state()
    inner = st["state"]
    as_i64 = lambda a: torch.from_numpy(np.asarray(a, dtype=np.uint64).view(np.int64).copy())
    return {
        prefix + "counter": as_i64(inner["counter"]),
        prefix + "key": as_i64(inner["key"]),
        prefix + "buffer": as_i64(st["buffer"]),
        prefix + "scalars": torch.tensor([st["buffer_pos"], st["has_uint32"], st["uinteger"]], dtype=torch.int64),
    }


def load_rng(rng: Rng, tensors: dict[str, torch.Tensor], prefix: str = "rng/") -> None:
    as_u64 = lambda t: t.numpy().view(np.uint64).copy()
    pos, has, uint = (int(v) for v in tensors[prefix + "scalars"])
    rng.set_state({
        "bit_generator": "Philox",
        "state": {"counter": as_u64(tensors[prefix + "counter"]), "key": as_u64(tensors[prefix + "key"])},
        "buffer": as_u64(tensors[prefix + "buffer"]),
        "buffer_pos": pos,
        "has_uint32": has,
        "uinteger": uint,
    })
