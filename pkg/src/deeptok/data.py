"""Synthetic moving-shape videos with captions, motion scoring and splits."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics import Rng
from . import pnm

SHAPES = ("circle", "square")
FAST_SPEED = 0.015  # frame widths per frame
BRIGHT = 0.6


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    x: float
    y: float
    vx: float
    vy: float
    size: float
    intensity: float

    def validate(self) -> None:
        if self.kind not in SHAPES:
            raise SpecError(f"unknown shape {self.kind!r}")
        if not 0.0 < self.size < 0.5:
            raise SpecError(f"size must be in (0, 0.5), got {self.size}")
        if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
            raise SpecError("start position must lie in [0, 1]^2")
        if not 0.2 <= self.intensity <= 1.0:
            raise SpecError(f"intensity must be in [0.2, 1], got {self.intensity}")

    def direction(self) -> str:
        if self.vx == 0 and self.vy == 0:
            return "still"
        if abs(self.vx) >= abs(self.vy):
            return "right" if self.vx > 0 else "left"
        # image rows grow downwards
        return "down" if self.vy > 0 else "up"

    def speed(self) -> str:
        return "fast" if math.hypot(self.vx, self.vy) >= FAST_SPEED else "slow"

    def brightness(self) -> str:
        return "bright" if self.intensity >= BRIGHT else "dim"

    def phrase(self, static: bool = False) -> str:
        head = f"{self.brightness()} {self.kind}"
        if static:
            return head
        if self.direction() == "still":
            return f"{head} staying still"
        return f"{head} moving {self.direction()} {self.speed()}"

    def attributes(self, static: bool = False) -> dict:
        attrs = {"brightness": self.brightness(), "kind": self.kind}
        if not static:
            attrs["direction"] = self.direction()
            attrs["speed"] = None if attrs["direction"] == "still" else self.speed()
        return attrs


@dataclass(frozen=True)
class SceneSpec:
    primary: ShapeSpec
    secondary: ShapeSpec | None = None

    def shapes(self) -> list[ShapeSpec]:
        return [self.primary] + ([self.secondary] if self.secondary else [])

    def validate(self) -> None:
        for s in self.shapes():
            s.validate()

    def caption(self, static: bool = False) -> str:
        return " and ".join(s.phrase(static) for s in self.shapes())

    def to_line(self) -> str:
        parts = []
        for tag, s in (("a", self.primary), ("b", self.secondary)):
            if s is None:
                continue
            for k, v in asdict(s).items():
                parts.append(f"{tag}.{k}={v!r}" if isinstance(v, str) else f"{tag}.{k}={float(v).hex()}")
        return " ".join(parts)

    @classmethod
    def from_line(cls, line: str) -> "SceneSpec":
        fields_: dict[str, dict] = {"a": {}, "b": {}}
        for item in line.split():
            key, val = item.split("=", 1)
            tag, name = key.split(".", 1)
            fields_[tag][name] = val.strip("'") if name == "kind" else float.fromhex(val)
        prim = ShapeSpec(**fields_["a"])
        sec = ShapeSpec(**fields_["b"]) if fields_["b"] else None
        return cls(prim, sec)

    @property
    def spec_hash(self) -> str:
        return hashlib.sha256(self.to_line().encode()).hexdigest()[:16]


def parse_caption(caption: str) -> list[dict]:
    """Recover the discrete attributes encoded in a generated caption."""
    out = []
    for phrase in caption.split(" and "):
        words = phrase.split()
        if len(words) < 2 or words[0] not in ("bright", "dim") or words[1] not in SHAPES:
            raise SpecError(f"caption phrase not in grammar: {phrase!r}")
        attrs = {"brightness": words[0], "kind": words[1]}
        rest = words[2:]
        if rest == ["staying", "still"]:
            attrs.update(direction="still", speed=None)
        elif len(rest) == 3 and rest[0] == "moving":
            attrs.update(direction=rest[1], speed=rest[2])
        elif rest:
            raise SpecError(f"caption phrase not in grammar: {phrase!r}")
        out.append(attrs)
    return out


def caption_vocabulary() -> list[str]:
    return sorted({"bright", "dim", *SHAPES, "moving", "staying", "still", "left", "right", "up", "down",
                   "slow", "fast", "and"})


def random_spec(rng: Rng, p_second: float = 0.25, p_still: float = 0.05) -> SceneSpec:
    g = rng.numpy

    def one() -> ShapeSpec:
        if g.random() < p_still:
            vx = vy = 0.0
        else:
            speed = g.uniform(0.006, 0.03)
            angle = g.uniform(0, 2 * math.pi)
            vx, vy = speed * math.cos(angle), speed * math.sin(angle)
        return ShapeSpec(
            kind=SHAPES[int(g.integers(0, 2))],
            x=float(g.uniform(0.2, 0.8)),
            y=float(g.uniform(0.2, 0.8)),
            vx=float(vx),
            vy=float(vy),
            size=float(g.uniform(0.15, 0.25)),
            intensity=float(g.uniform(0.3, 1.0)),
        )

    first = one()
    second = one() if g.random() < p_second else None
    return SceneSpec(first, second)


# -- rendering ---------------------------------------------------------------


def _reflect(u: np.ndarray, lo: float, hi: float) -> np.ndarray:
    span = hi - lo
    m = np.mod(u - lo, 2 * span)
    return lo + np.where(m <= span, m, 2 * span - m)


def trajectory(shape: ShapeSpec, frames: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unfolded and border-reflected centre positions at the given frame indices."""
    t = np.asarray(frames, dtype=np.float64)
    ux, uy = shape.x + shape.vx * t, shape.y + shape.vy * t
    lo, hi = shape.size, 1.0 - shape.size
    return np.stack([ux, uy], -1), np.stack([_reflect(ux, lo, hi), _reflect(uy, lo, hi)], -1)


def _coverage(shape: ShapeSpec, centres: np.ndarray, size: int) -> np.ndarray:
    grid = (np.arange(size) + 0.5) / size
    dx = grid[None, None, :] - centres[:, 0, None, None]
    dy = grid[None, :, None] - centres[:, 1, None, None]
    if shape.kind == "circle":
        edge = shape.size - np.sqrt(dx * dx + dy * dy)
        return np.clip(edge * size + 0.5, 0.0, 1.0)
    cx = np.clip((shape.size - np.abs(dx)) * size + 0.5, 0.0, 1.0)
    cy = np.clip((shape.size - np.abs(dy)) * size + 0.5, 0.0, 1.0)
    return cx * cy


@dataclass
class SyntheticClip:
    frames: np.ndarray  # (T, H, W, 1) in [-1, 1]
    spec: SceneSpec
    motion_score: float = field(default=0.0)

    @property
    def caption(self) -> str:
        return self.spec.caption()


def render_frames(spec: SceneSpec, frames: Sequence[int], size: int = 32, seed: int = 0,
                  noise_std: float = 0.0) -> np.ndarray:
    spec.validate()
    idx = np.asarray(frames, dtype=np.int64)
    level = np.zeros((len(idx), size, size))
    for shape in spec.shapes():
        _, centres = trajectory(shape, idx)
        level = np.maximum(level, shape.intensity * _coverage(shape, centres, size))
    out = -1.0 + 2.0 * level
    if noise_std > 0:
        g = Rng(seed).numpy
        out = out + noise_std * g.standard_normal((int(idx.max()) + 1, size, size))[idx]
    return out[..., None]


def render(spec: SceneSpec, n_frames: int, seed: int = 0, size: int = 32, noise_std: float = 0.0) -> SyntheticClip:
    if n_frames < 1:
        raise SpecError("n_frames must be positive")
    frames = render_frames(spec, range(n_frames), size, seed, noise_std)
    score = motion_score(frames) if n_frames > 1 else 0.0
    return SyntheticClip(frames, spec, score)


def motion_score(clip) -> float:
    """Mean over consecutive frame pairs of the mean absolute pixel change."""
    frames = clip.frames if isinstance(clip, SyntheticClip) else np.asarray(clip)
    if frames.shape[0] < 2:
        raise ValueError("motion score needs at least two frames")
    return float(np.abs(np.diff(frames, axis=0)).mean())


# -- corpora -----------------------------------------------------------------


@dataclass
class Corpus:
    """Specs plus lazily rendered, cached frames."""

    specs: list[SceneSpec]
    seeds: list[int]
    n_frames: int = 64
    size: int = 32
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.specs)

    def frames(self, i: int) -> np.ndarray:
        if i not in self._cache:
            self._cache[i] = render_frames(self.specs[i], range(self.n_frames), self.size, self.seeds[i])
        return self._cache[i]

    def clip(self, i: int) -> SyntheticClip:
        f = self.frames(i)
        return SyntheticClip(f, self.specs[i], motion_score(f) if self.n_frames > 1 else 0.0)

    def caption(self, i: int) -> str:
        return self.specs[i].caption(static=self.n_frames == 1)

    def subset(self, idx: Iterable[int]) -> "Corpus":
        idx = list(idx)
        return Corpus([self.specs[i] for i in idx], [self.seeds[i] for i in idx], self.n_frames, self.size)

    def motion_scores(self) -> np.ndarray:
        return np.array([motion_score(self.frames(i)) for i in range(len(self))])


def motion_thresholds(scores: np.ndarray, lo_pct: float = 30.0, hi_pct: float = 90.0) -> tuple[float, float]:
    """Map percentile bounds of a corpus's scores to absolute thresholds."""
    return float(np.percentile(scores, lo_pct)), float(np.percentile(scores, hi_pct))


def filter_by_motion(corpus: Corpus, lo: float, hi: float, scores: np.ndarray | None = None) -> tuple[Corpus, float]:
    """Keep clips with ``lo <= score <= hi``; returns the subset and the kept fraction."""
    if not lo <= hi:
        raise ValueError("filter_by_motion needs lo <= hi")
    scores = corpus.motion_scores() if scores is None else scores
    keep = [i for i, s in enumerate(scores) if lo <= s <= hi]
    frac = len(keep) / len(corpus) if len(corpus) else 0.0
    return corpus.subset(keep), frac


@dataclass
class Splits:
    train: Corpus
    val: Corpus
    test: Corpus
    images: Corpus
    manifest: str


def _corpus(rng: Rng, seeds: list[int], n_frames: int, size: int) -> Corpus:
    specs = [random_spec(rng.fork(s)) for s in seeds]
    order = sorted(range(len(specs)), key=lambda i: specs[i].spec_hash)
    return Corpus([specs[i] for i in order], [seeds[i] for i in order], n_frames, size)


def make_splits(n_train: int, n_val: int, n_test: int, seed: int, n_frames: int = 64, size: int = 32,
                n_images: int | None = None) -> Splits:
    if min(n_train, n_val, n_test) < 1:
        raise ValueError("split sizes must be at least 1")
    n_images = n_train if n_images is None else n_images
    rng = Rng(seed)
    counts = [n_train, n_val, n_test, n_images]
    bounds = np.cumsum([0] + counts)
    seed_lists = [list(range(int(a), int(b))) for a, b in zip(bounds[:-1], bounds[1:])]
    train, val, test = (_corpus(rng, s, n_frames, size) for s in seed_lists[:3])
    images = _corpus(rng, seed_lists[3], 1, size)
    hashes = [set(s.spec_hash for s in c.specs) for c in (train, val, test)]
    if hashes[0] & hashes[1] or hashes[0] & hashes[2] or hashes[1] & hashes[2]:
        raise ValueError("overlapping specs across splits")
    lines = [f"# deeptok corpus seed={seed} frames={n_frames} size={size}"]
    for name, c in (("train", train), ("val", val), ("test", test), ("image", images)):
        for spec, s in zip(c.specs, c.seeds):
            lines.append(f"{name}\t{s}\t{spec.spec_hash}\t{spec.to_line()}")
    return Splits(train, val, test, images, "\n".join(lines) + "\n")


def read_manifest(text: str) -> dict[str, Corpus]:
    header = text.splitlines()[0]
    meta = dict(kv.split("=") for kv in header.split()[3:])
    n_frames, size = int(meta["frames"]), int(meta["size"])
    groups: dict[str, tuple[list, list]] = {}
    for line in text.splitlines()[1:]:
        if not line.strip():
            continue
        name, s, _h, body = line.split("\t")
        specs, seeds = groups.setdefault(name, ([], []))
        specs.append(SceneSpec.from_line(body))
        seeds.append(int(s))
    return {
        name: Corpus(specs, seeds, 1 if name == "image" else n_frames, size)
        for name, (specs, seeds) in groups.items()
    }


def write_corpus(root: str | Path, splits: Splits) -> Path:
    """Write one directory per clip (PGM frames + spec file) and the manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for name in ("train", "val", "test", "images"):
        corpus = getattr(splits, name)
        for i, spec in enumerate(corpus.specs):
            d = root / name / spec.spec_hash
            d.mkdir(parents=True, exist_ok=True)
            frames = corpus.frames(i)
            for t in range(frames.shape[0]):
                pnm.write(d / f"frame_{t:03d}.pgm", frames[t])
            (d / "spec.txt").write_text(
                f"seed={corpus.seeds[i]}\ncaption={corpus.caption(i)}\n{spec.to_line()}\n")
    (root / "manifest.txt").write_text(splits.manifest)
    return root / "manifest.txt"


def load_corpus(root: str | Path) -> dict[str, Corpus]:
    path = Path(root) / "manifest.txt"
    if not path.exists():
        raise FileNotFoundError(f"no corpus manifest at {path}")
    return read_manifest(path.read_text())
