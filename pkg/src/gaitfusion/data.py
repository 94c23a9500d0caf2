"""Dataset index, P x K clip sampling and a synthetic walker generator.

On-disk layout (raw and preprocessed trees alike)::

    root/sils/<id>/<condition>/<view>/<frame>.png
    root/depth/<id>/<condition>/<view>/<frame>.png
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError

log = logging.getLogger(__name__)

SIL_DIR = "sils"
DEPTH_DIR = "depth"
MANIFEST = "manifest.tsv"


@dataclass(frozen=True)
class IndexEntry:
    subject: str
    condition: str
    view: str
    relpath: str
    nframes: int

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.subject, self.condition, self.view)


@dataclass
class DatasetIndex:
    entries: list[IndexEntry]
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[IndexEntry]:
        return iter(self.entries)

    def subjects(self) -> list[str]:
        return sorted({e.subject for e in self.entries})

    def by_subject(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = {}
        for i, e in enumerate(self.entries):
            out.setdefault(e.subject, []).append(i)
        return out

    def to_manifest(self) -> str:
        return "".join(f"{e.subject}\t{e.condition}\t{e.view}\t{e.relpath}\t{e.nframes}\n"
                       for e in self.entries)

    @classmethod
    def from_manifest(cls, text: str) -> "DatasetIndex":
        entries = []
        for line in text.splitlines():
            if not line.strip():
                continue
            sid, cond, view, rel, n = line.split("\t")
            entries.append(IndexEntry(sid, cond, view, rel, int(n)))
        return cls(entries)


def frame_names(seq_dir: Path) -> list[str]:
    return sorted(p.name for p in seq_dir.glob("*.png"))


def _subdirs(p: Path) -> list[Path]:
    return sorted(q for q in p.iterdir() if q.is_dir())


def scan_dataset(root: str | Path) -> DatasetIndex:
    root = Path(root)
    sil_root, dep_root = root / SIL_DIR, root / DEPTH_DIR
    if not sil_root.is_dir():
        raise ConfigError(f"no '{SIL_DIR}/' directory under {root}")
    entries, skipped = [], 0
    for sdir in _subdirs(sil_root):
        for cdir in _subdirs(sdir):
            for vdir in _subdirs(cdir):
                rel = f"{sdir.name}/{cdir.name}/{vdir.name}"
                sil_frames = frame_names(vdir)
                dep_dir = dep_root / rel
                dep_frames = set(frame_names(dep_dir)) if dep_dir.is_dir() else set()
                common = [n for n in sil_frames if n in dep_frames]
                if not common:
                    log.warning("sequence %s lacks silhouette or depth frames; skipped", rel)
                    skipped += 1
                    continue
                entries.append(IndexEntry(sdir.name, cdir.name, vdir.name, rel, len(common)))
    if not entries:
        raise ConfigError(f"dataset at {root} has no usable sequences")
    return DatasetIndex(entries, skipped)


def load_index(root: str | Path) -> DatasetIndex:
    """Read ``manifest.tsv`` under ``root`` if present, otherwise scan and cache it."""
    root = Path(root)
    manifest = root / MANIFEST
    if manifest.is_file():
        return DatasetIndex.from_manifest(manifest.read_text())
    index = scan_dataset(root)
    try:
        manifest.write_text(index.to_manifest())
    except OSError:
        log.warning("could not cache manifest at %s", manifest)
    return index


class SequenceStore:
    """Loads preprocessed sequences as float32 arrays (T, H, W), cached in memory."""

    def __init__(self, root: str | Path, index: DatasetIndex):
        self.root = Path(root)
        self.index = index
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def __getitem__(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        if i not in self._cache:
            e = self.index.entries[i]
            sil_dir, dep_dir = self.root / SIL_DIR / e.relpath, self.root / DEPTH_DIR / e.relpath
            dep_names = set(frame_names(dep_dir))
            names = [n for n in frame_names(sil_dir) if n in dep_names]
            sils = np.stack([_read(sil_dir / n) for n in names]).astype(np.float32)
            deps = np.stack([_read(dep_dir / n) for n in names]).astype(np.float32)
            self._cache[i] = (sils, deps)
        return self._cache[i]


def _read(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.array(im)
    return arr.astype(np.float64) / (255.0 if arr.dtype == np.uint8 else 65535.0)


# -- sampling ---------------------------------------------------------------

@dataclass(frozen=True)
class SamplerConfig:
    p: int = 4
    k: int = 4
    clip_len: int = 10
    short_clip_policy: str = "wrap"

    def __post_init__(self):
        if self.p < 2 or self.k < 2:
            raise ConfigError("P and K must both be >= 2")
        if self.clip_len < 1:
            raise ConfigError("clip length must be >= 1")
        if self.short_clip_policy not in ("wrap", "discard"):
            raise ConfigError("short_clip_policy must be 'wrap' or 'discard'")


@dataclass
class Batch:
    entries: list[int]  # index positions, subject-major
    frames: list[np.ndarray]  # one frame-index array per clip
    subjects: list[str]


def clip_indices(nframes: int, clip_len: int, rng: np.random.Generator) -> np.ndarray:
    if nframes >= clip_len:
        start = int(rng.integers(0, nframes - clip_len + 1))
        return np.arange(start, start + clip_len)
    return np.arange(clip_len) % nframes


def sample_batch(index: DatasetIndex, cfg: SamplerConfig, rng: np.random.Generator | int) -> Batch:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    groups = index.by_subject()
    if cfg.short_clip_policy == "discard":
        groups = {s: [i for i in g if index.entries[i].nframes >= cfg.clip_len]
                  for s, g in groups.items()}
        groups = {s: g for s, g in groups.items() if g}
    subjects = sorted(groups)
    if len(subjects) < cfg.p:
        raise ConfigError(f"need {cfg.p} subjects per batch, dataset has {len(subjects)}")
    chosen = rng.choice(len(subjects), size=cfg.p, replace=False)
    batch = Batch([], [], [])
    for si in chosen:
        seqs = groups[subjects[si]]
        picks = rng.choice(len(seqs), size=cfg.k, replace=len(seqs) < cfg.k)
        for pi in picks:
            entry = seqs[pi]
            batch.entries.append(entry)
            batch.frames.append(clip_indices(index.entries[entry].nframes, cfg.clip_len, rng))
            batch.subjects.append(subjects[si])
    return batch


def load_batch(store: SequenceStore, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    """Stack a batch into (N, 1, L, H, W) silhouette and depth arrays."""
    sils, deps = [], []
    for entry, frames in zip(batch.entries, batch.frames):
        s, d = store[entry]
        sils.append(s[frames])
        deps.append(d[frames])
    return np.stack(sils)[:, None], np.stack(deps)[:, None]


# -- synthetic walkers --------------------------------------------------------

SYNTH_CONDITIONS = ("nm", "bg")
SYNTH_VIEWS = ("000", "090")
SYNTH_HEIGHT, SYNTH_WIDTH = 96, 64


@dataclass(frozen=True)
class Walker:
    """Id-specific body proportions and gait rhythm."""
    head_r: float
    torso_w: float
    torso_h: float
    leg_len: float
    arm_len: float
    limb_w: float
    swing: float
    period: float
    depth_base: float
    depth_relief: float

    @classmethod
    def random(cls, rng: np.random.Generator) -> "Walker":
        return cls(head_r=rng.uniform(5.0, 8.0), torso_w=rng.uniform(6.0, 11.0),
                   torso_h=rng.uniform(13.0, 18.0), leg_len=rng.uniform(28.0, 38.0),
                   arm_len=rng.uniform(18.0, 26.0), limb_w=rng.uniform(3.0, 6.0),
                   swing=rng.uniform(0.25, 0.55), period=rng.uniform(14.0, 22.0),
                   depth_base=rng.uniform(2.0, 4.0), depth_relief=rng.uniform(0.1, 0.4))


def _capsule(yy, xx, p0, p1, radius):
    (y0, x0), (y1, x1) = p0, p1
    dy, dx = y1 - y0, x1 - x0
    t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / max(dy * dy + dx * dx, 1e-9), 0, 1)
    return (yy - y0 - t * dy) ** 2 + (xx - x0 - t * dx) ** 2 <= radius * radius


def render_walker(w: Walker, t: float, phase: float, x_center: float, condition: str,
                  view: str, height: int = SYNTH_HEIGHT, width: int = SYNTH_WIDTH):
    """One frame: (silhouette uint8 {0,255}, depth float64, 0 on background)."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    ground = height - 3.0
    hip_y = ground - w.leg_len
    torso_cy = hip_y - w.torso_h * 0.8
    shoulder_y = torso_cy - w.torso_h * 0.7
    head_cy = torso_cy - w.torso_h - w.head_r + 1
    ang = w.swing * np.sin(2 * np.pi * t / w.period + phase)

    torso = ((xx - x_center) / w.torso_w) ** 2 + ((yy - torso_cy) / w.torso_h) ** 2 <= 1
    head = (xx - x_center) ** 2 + (yy - head_cy) ** 2 <= w.head_r ** 2
    limbs = []
    for sign in (1.0, -1.0):
        foot = (hip_y + w.leg_len * np.cos(ang), x_center + sign * w.leg_len * np.sin(ang))
        hand = (shoulder_y + w.arm_len * np.cos(0.7 * ang),
                x_center - sign * w.arm_len * np.sin(0.7 * ang))
        limbs.append((_capsule(yy, xx, (hip_y, x_center), foot, w.limb_w / 2), sign))
        limbs.append((_capsule(yy, xx, (shoulder_y, x_center), hand, w.limb_w / 2.5), -sign))
    body = torso | head
    sil = body.copy()
    for m, _ in limbs:
        sil |= m
    if condition.startswith("bg"):
        bag = (np.abs(yy - hip_y + 2) <= 5) & (np.abs(xx - x_center - w.torso_w) <= 4)
        sil |= bag

    # linear ramp in depth, torso pulled nearer, limbs pushed back by swing side
    depth = w.depth_base + 0.5 * yy / height
    ellipse = np.clip(1 - ((xx - x_center) / w.torso_w) ** 2 - ((yy - torso_cy) / w.torso_h) ** 2, 0, 1)
    depth = depth - w.depth_relief * ellipse
    for m, sign in limbs:
        depth = np.where(m & ~body, depth + w.depth_relief * (0.5 + 0.5 * sign * np.sin(ang)), depth)
    if view == SYNTH_VIEWS[1]:
        sil = sil[:, ::-1]
        depth = depth[:, ::-1]
    depth = np.where(sil, depth, 0.0)
    return np.where(sil, 255, 0).astype(np.uint8), depth


def synth_layout(seq: int) -> tuple[str, str]:
    nv, nc = len(SYNTH_VIEWS), len(SYNTH_CONDITIONS)
    cond = f"{SYNTH_CONDITIONS[(seq // nv) % nc]}-{seq // (nv * nc) + 1:02d}"
    return cond, SYNTH_VIEWS[seq % nv]


def synth_sequences(ids: int, seqs_per_id: int, frames: int, seed: int):
    """Yield (subject, condition, view, [(sil, depth), ...]) for every synthetic sequence."""
    root_rng = np.random.default_rng(seed)
    walkers = [Walker.random(np.random.default_rng(root_rng.integers(2**63))) for _ in range(ids)]
    for i, w in enumerate(walkers):
        seq_rng = np.random.default_rng([seed, i])
        for s in range(seqs_per_id):
            cond, view = synth_layout(s)
            phase = seq_rng.uniform(0, 2 * np.pi)
            x0 = seq_rng.uniform(-4, 4) + SYNTH_WIDTH / 2
            drift = seq_rng.uniform(-0.15, 0.15)
            seq = [render_walker(w, t, phase, x0 + drift * t, cond, view) for t in range(frames)]
            yield f"{i:03d}", cond, view, seq


def check_separability(sequences: dict[tuple[str, int], list[np.ndarray]], min_fraction: float = 0.9) -> float:
    """Worst fraction of frames in which two subjects' silhouettes differ."""
    subjects = sorted({s for s, _ in sequences})
    seqs = sorted({q for _, q in sequences})
    worst = 1.0
    for a_i, a in enumerate(subjects):
        for b in subjects[a_i + 1:]:
            for q in seqs:
                fa, fb = sequences.get((a, q)), sequences.get((b, q))
                if fa is None or fb is None:
                    continue
                n = min(len(fa), len(fb))
                differ = sum(bool((fa[t] != fb[t]).any()) for t in range(n))
                worst = min(worst, differ / n)
    if worst < min_fraction:
        raise ConfigError(f"synthetic subjects differ in only {worst:.0%} of frames")
    return worst


def synth_generate(out: str | Path, ids: int = 8, seqs_per_id: int = 4, frames: int = 30,
                   seed: int = 0) -> DatasetIndex:
    """Render a synthetic raw dataset (silhouettes + 16-bit depth in millimetres)."""
    out = Path(out)
    sequences = list(synth_sequences(ids, seqs_per_id, frames, seed))
    per_subject: dict[str, int] = {}
    sils_by_seq: dict[tuple[str, int], list[np.ndarray]] = {}
    for subject, _, _, seq in sequences:
        q = per_subject.get(subject, 0)
        per_subject[subject] = q + 1
        sils_by_seq[(subject, q)] = [s for s, _ in seq]
    check_separability(sils_by_seq)
    for subject, cond, view, seq in sequences:
        rel = Path(subject) / cond / view
        for t, (sil, depth) in enumerate(seq):
            name = f"{t:03d}.png"
            for sub, img in ((SIL_DIR, sil), (DEPTH_DIR, np.round(depth * 1000).astype(np.uint16))):
                p = out / sub / rel / name
                p.parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray(img).save(p)
    return scan_dataset(out)
