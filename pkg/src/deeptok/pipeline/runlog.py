"""Append-only metrics CSVs and per-run config logging."""

from __future__ import annotations

import csv
import logging
import time
from pathlib import Path

from .config import TrainConfig

log = logging.getLogger("deeptok")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


class MetricsLog:
    """CSV with a fixed header. Wall-clock goes to a separate ``timing.csv``
    so that ``metrics.csv`` stays bit-identical across repeated runs.

    Opening with ``start_step`` keeps rows up to that step and drops the rest,
    which is what a resumed run needs.
    """

    def __init__(self, run_dir: Path, columns: list[str], start_step: int = 0, name: str = "metrics.csv"):
        self.path = Path(run_dir) / name
        self.timing = Path(run_dir) / "timing.csv"
        self.columns = ["step"] + [c for c in columns if c != "step"]
        self._t0 = time.perf_counter()
        self._last = start_step
        self._truncate(self.path, self.columns, start_step)
        self._truncate(self.timing, ["step", "seconds"], start_step)

    @staticmethod
    def _truncate(path: Path, header: list[str], start_step: int) -> None:
        rows = []
        if start_step > 0 and path.exists():
            with path.open(newline="") as fh:
                reader = csv.reader(fh)
                next(reader, None)
                rows = [r for r in reader if r and int(r[0]) <= start_step]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)

    def write(self, **row) -> None:
        step = int(row["step"])
        if step <= self._last:
            raise ValueError(f"metrics steps must increase (got {step} after {self._last})")
        self._last = step
        with self.path.open("a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow([_fmt(row.get(c)) for c in self.columns])
        with self.timing.open("a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow([step, f"{time.perf_counter() - self._t0:.3f}"])


def read_metrics(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def log_config(cfg: TrainConfig, run_dir: Path, command: str) -> None:
    """Write the resolved config verbatim to the run directory and the log."""
    run_dir.mkdir(parents=True, exist_ok=True)
    text = cfg.to_text()
    (run_dir / "config.resolved").write_text(f"# {command}\n" + text)
    log.info("resolved config for %s:\n%s", command, text.rstrip())


def smoothed(values: list[float], window: int = 50) -> list[float]:
    out, acc = [], 0.0
    for i, v in enumerate(values):
        acc += v
        if i >= window:
            acc -= values[i - window]
        out.append(acc / min(i + 1, window))
    return out
