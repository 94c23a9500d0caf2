"""Gallery/probe rank-k identification with optional identical-view exclusion."""
from __future__ import annotations

import fnmatch
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import parse_text, _bool, _ints, _strs
from .data import DatasetIndex, IndexEntry, SequenceStore
from .errors import ConfigError

log = logging.getLogger(__name__)


class ProtocolError(ConfigError):
    """A protocol selector matched no sequences."""


@dataclass(frozen=True)
class EvalProtocol:
    gallery_conditions: tuple[str, ...] = ("*",)
    gallery_views: tuple[str, ...] = ("*",)
    probe_conditions: tuple[str, ...] = ("*",)
    probe_views: tuple[str, ...] = ("*",)
    exclude_identical_view: bool = True
    conditions: tuple[str, ...] = ()
    ranks: tuple[int, ...] = (1, 5)
    root: str = ""

    @classmethod
    def from_text(cls, text: str) -> "EvalProtocol":
        raw = parse_text(text)
        keys = {
            "gallery.condition": ("gallery_conditions", _strs),
            "gallery.view": ("gallery_views", _strs),
            "probe.condition": ("probe_conditions", _strs),
            "probe.view": ("probe_views", _strs),
            "exclude_identical_view": ("exclude_identical_view", _bool),
            "conditions": ("conditions", _strs),
            "ranks": ("ranks", _ints),
            "root": ("root", str),
        }
        unknown = sorted(set(raw) - set(keys))
        if unknown:
            raise ConfigError(f"unknown protocol key(s): {', '.join(unknown)}")
        kwargs = {}
        for k, v in raw.items():
            name, conv = keys[k]
            try:
                kwargs[name] = conv(v)
            except ValueError as exc:
                raise ConfigError(f"{k}: {exc}") from None
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "EvalProtocol":
        return cls.from_text(Path(path).read_text())

    def with_exclusion(self, exclude: bool) -> "EvalProtocol":
        from dataclasses import replace
        return replace(self, exclude_identical_view=exclude)


def _matches(value: str, patterns: Sequence[str]) -> bool:
    return any(fnmatch.fnmatchcase(value, p) for p in patterns)


def select(index: DatasetIndex, conditions, views) -> list[int]:
    return [i for i, e in enumerate(index.entries)
            if _matches(e.condition, conditions) and _matches(e.view, views)]


def condition_group(condition: str, groups: Sequence[str]) -> str | None:
    """First declared group that names ``condition`` (exact, ``group-*`` or glob)."""
    if not groups:
        return condition
    for g in groups:
        if condition == g or condition.startswith(g + "-") or fnmatch.fnmatchcase(condition, g):
            return g
    return None


@dataclass
class EmbeddingSet:
    features: np.ndarray  # (n, P, E)
    subjects: list[str]
    conditions: list[str]
    views: list[str]

    def __len__(self) -> int:
        return len(self.subjects)


@torch.no_grad()
def embed_sequence(model, sils: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Whole-sequence embedding, (P, E)."""
    s = torch.from_numpy(np.ascontiguousarray(sils))[None, None]
    d = torch.from_numpy(np.ascontiguousarray(depth))[None, None]
    dtype = next(model.parameters()).dtype
    f, _ = model(s.to(dtype), d.to(dtype))
    return f[0].transpose(0, 1).double().numpy()


def embed_gallery_probe(model, store: SequenceStore, protocol: EvalProtocol):
    index = store.index
    g_idx = select(index, protocol.gallery_conditions, protocol.gallery_views)
    p_idx = select(index, protocol.probe_conditions, protocol.probe_views)
    if not g_idx:
        raise ProtocolError("gallery selector matched no sequences")
    if not p_idx:
        raise ProtocolError("probe selector matched no sequences")
    was_training = model.training
    model.eval()
    cache: dict[int, np.ndarray] = {}
    try:
        for i in sorted(set(g_idx) | set(p_idx)):
            cache[i] = embed_sequence(model, *store[i])
    finally:
        model.train(was_training)

    def build(ids: list[int]) -> EmbeddingSet:
        es = [index.entries[i] for i in ids]
        return EmbeddingSet(np.stack([cache[i] for i in ids]), [e.subject for e in es],
                            [e.condition for e in es], [e.view for e in es])

    return build(g_idx), build(p_idx)


def part_distance(probe: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """(np, P, E) x (ng, P, E) -> (np, ng): per-part Euclidean distance, averaged over parts."""
    diff = probe[:, None] - gallery[None]
    return np.sqrt((diff ** 2).sum(-1)).mean(-1)


@dataclass
class RankResult:
    ranks: tuple[int, ...]
    hits: dict[int, list[bool]]  # per rank, per evaluated probe
    probe_ids: list[int]  # positions in the probe set that were evaluated
    skipped: list[int]


def rank_k(probe: EmbeddingSet, gallery: EmbeddingSet, ks: Sequence[int] = (1, 5),
           exclude_identical_view: bool = False, distances: np.ndarray | None = None) -> RankResult:
    """Rank the gallery for each probe; ties keep gallery order."""
    d = part_distance(probe.features, gallery.features) if distances is None else distances
    g_subj = np.array(gallery.subjects, dtype=object)
    g_view = np.array(gallery.views, dtype=object)
    res = RankResult(tuple(ks), {k: [] for k in ks}, [], [])
    for i in range(len(probe)):
        admissible = np.ones(len(gallery), dtype=bool)
        if exclude_identical_view:
            admissible &= g_view != probe.views[i]
        cand = np.flatnonzero(admissible)
        if cand.size == 0:
            log.warning("probe %d has an empty admissible gallery; skipped", i)
            res.skipped.append(i)
            continue
        order = cand[np.argsort(d[i, cand], kind="stable")]
        match = g_subj[order] == probe.subjects[i]
        res.probe_ids.append(i)
        for k in ks:
            res.hits[k].append(bool(match[:k].any()))
    return res


@dataclass
class EvalReport:
    conditions: list[str]
    ranks: tuple[int, ...]
    per_view: dict[str, dict[str, dict[int, float]]]  # condition -> view -> rank -> acc
    exclude_identical_view: bool = True
    probes: int = 0
    skipped: int = 0

    @property
    def per_condition(self) -> dict[str, dict[int, float]]:
        out = {}
        for c in self.conditions:
            views = self.per_view.get(c, {})
            out[c] = {k: float(np.mean([v[k] for v in views.values()])) if views else float("nan")
                      for k in self.ranks}
        return out

    @property
    def mean(self) -> dict[int, float]:
        pc = self.per_condition
        vals = {k: [pc[c][k] for c in self.conditions if not np.isnan(pc[c][k])] for k in self.ranks}
        return {k: float(np.mean(v)) if v else float("nan") for k, v in vals.items()}

    def render_text(self) -> str:
        mode = "exclude" if self.exclude_identical_view else "include"
        head = f"{'':6s}" + "".join(f"{c:>8s}" for c in self.conditions) + f"{'Mean':>8s}"
        lines = [f"identical-view: {mode}; probes {self.probes}, skipped {self.skipped}", head]
        pc, mean = self.per_condition, self.mean
        for k in self.ranks:
            row = f"{'R-' + str(k):6s}" + "".join(f"{pc[c][k]:8.1f}" for c in self.conditions)
            lines.append(row + f"{mean[k]:8.1f}")
        lines.append("")
        lines.append("per-view rank-%d" % self.ranks[0])
        for c in self.conditions:
            views = self.per_view.get(c, {})
            cells = "  ".join(f"{v}:{acc[self.ranks[0]]:.1f}" for v, acc in sorted(views.items()))
            lines.append(f"  {c:8s} {cells}")
        return "\n".join(lines) + "\n"

    def records(self) -> list[dict]:
        pc, mean = self.per_condition, self.mean
        rows = []
        for k in self.ranks:
            rec = {"rank": k, "exclude_identical_view": self.exclude_identical_view}
            rec.update({c: pc[c][k] for c in self.conditions})
            rec["Mean"] = mean[k]
            rows.append(rec)
        for c in self.conditions:
            for v, acc in sorted(self.per_view.get(c, {}).items()):
                rows.append({"condition": c, "view": v,
                             **{f"R-{k}": acc[k] for k in self.ranks}})
        return rows

    def render_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=False) + "\n" for r in self.records())


def report(result: RankResult, probe: EmbeddingSet, conditions: Sequence[str] = (),
           exclude_identical_view: bool = True) -> EvalReport:
    """Aggregate hits per (condition, view) cell; conditions average their views."""
    groups = list(conditions) or sorted(set(probe.conditions))
    cells: dict[str, dict[str, dict[int, list[bool]]]] = {}
    for pos, i in enumerate(result.probe_ids):
        g = condition_group(probe.conditions[i], groups)
        if g is None:
            continue
        cell = cells.setdefault(g, {}).setdefault(probe.views[i], {k: [] for k in result.ranks})
        for k in result.ranks:
            cell[k].append(result.hits[k][pos])
    per_view = {g: {v: {k: 100.0 * sum(h) / len(h) for k, h in cell.items()}
                    for v, cell in views.items()} for g, views in cells.items()}
    return EvalReport(groups, result.ranks, per_view, exclude_identical_view,
                      probes=len(result.probe_ids), skipped=len(result.skipped))


def evaluate(model, store: SequenceStore, protocol: EvalProtocol) -> EvalReport:
    gallery, probe = embed_gallery_probe(model, store, protocol)
    res = rank_k(probe, gallery, protocol.ranks, protocol.exclude_identical_view)
    return report(res, probe, protocol.conditions, protocol.exclude_identical_view)


def write_report(rep: EvalReport, out_dir: str | Path, stem: str = "report") -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{stem}.txt").write_text(rep.render_text())
    (out_dir / f"{stem}.jsonl").write_text(rep.render_jsonl())
