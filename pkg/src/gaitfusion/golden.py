"""Naive reference implementations and the frozen golden vectors they produce.

The oracles here are deliberately slow scalar loops. They share no code with
the vectorized implementations they check; only the seeded input generators
are common to both sides.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

GOLDEN_DIR = Path(__file__).resolve().parents[2] / "tests" / "golden"

TARGET_H, WINDOW_W = 64, 64


@dataclass
class GoldenCase:
    name: str
    expected: np.ndarray
    tolerance: float
    provenance: str
    inputs: str  # how the inputs are regenerated

    def dumps(self) -> str:
        head = (f"# name={self.name} provenance={self.provenance} "
                f"tolerance={self.tolerance:g} inputs={self.inputs}\n")
        shape = "shape " + " ".join(str(s) for s in self.expected.shape) + "\n"
        if self.expected.dtype.kind in "iub":
            body = "".join(f"{int(v)}\n" for v in self.expected.ravel())
        else:
            body = "".join(f"{float(v):.17g}\n" for v in self.expected.ravel())
        return head + shape + body


def load_case(path: str | Path) -> GoldenCase:
    lines = Path(path).read_text().splitlines()
    meta = dict(tok.split("=", 1) for tok in lines[0][2:].split())
    shape = tuple(int(s) for s in lines[1].split()[1:])
    vals = lines[2:]
    is_int = all(v.lstrip("-").isdigit() for v in vals[:50])
    arr = np.array([int(v) if is_int else float(v) for v in vals],
                   dtype=np.int64 if is_int else np.float64).reshape(shape)
    return GoldenCase(meta["name"], arr, float(meta["tolerance"]), meta["provenance"],
                      meta["inputs"])


# -- seeded inputs ------------------------------------------------------------

def seeded_frames(n: int = 50, seed: int = 1234) -> list[tuple[np.ndarray, np.ndarray]]:
    """Random blob silhouettes (some touching the frame edges) with positive depth."""
    rng = np.random.default_rng(seed)
    frames = []
    for _ in range(n):
        h, w = int(rng.integers(40, 121)), int(rng.integers(20, 101))
        yy, xx = np.mgrid[0:h, 0:w]
        sil = np.zeros((h, w), dtype=bool)
        for _ in range(int(rng.integers(1, 5))):
            cy, cx = rng.uniform(0, h), rng.uniform(-0.2 * w, 1.2 * w)
            ry, rx = rng.uniform(3, h / 2), rng.uniform(2, w / 3)
            sil |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
        if not sil.any():
            sil[h // 2, w // 2] = True
        depth = rng.uniform(0.5, 1.5) + 0.02 * yy + rng.uniform(0, 0.3, size=(h, w))
        frames.append((np.where(sil, 255, 0).astype(np.uint8), np.where(sil, depth, 0.0)))
    return frames


def seeded_depth_frames(n: int = 20, seed: int = 99) -> list[tuple[np.ndarray, np.ndarray]]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        h, w = int(rng.integers(8, 33)), int(rng.integers(8, 33))
        mask = rng.random((h, w)) < rng.uniform(0.2, 0.9)
        mask[rng.integers(h), rng.integers(w)] = True
        depth = rng.uniform(0.05, 10.0, size=(h, w)) * mask
        out.append((depth, np.where(mask, 255, 0).astype(np.uint8)))
    return out


def seeded_rank_instances(n: int = 200, seed: int = 7):
    """Small gallery/probe problems with integer embeddings so distance ties occur."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        parts, dims = int(rng.integers(1, 3)), int(rng.integers(1, 4))
        ng, npr = int(rng.integers(1, 9)), int(rng.integers(1, 7))
        n_ids, views = int(rng.integers(1, 4)), ["a", "b", "c"][: int(rng.integers(1, 4))]
        out.append({
            "gallery": rng.integers(0, 3, size=(ng, parts, dims)).astype(np.float64),
            "probe": rng.integers(0, 3, size=(npr, parts, dims)).astype(np.float64),
            "g_subj": [f"s{int(v)}" for v in rng.integers(0, n_ids, ng)],
            "p_subj": [f"s{int(v)}" for v in rng.integers(0, n_ids, npr)],
            "g_view": [str(rng.choice(views)) for _ in range(ng)],
            "p_view": [str(rng.choice(views)) for _ in range(npr)],
            "p_cond": [str(rng.choice(["x", "y"])) for _ in range(npr)],
            "exclude": bool(rng.integers(0, 2)),
        })
    return out


# -- oracles --------------------------------------------------------------------

def disparity_oracle(depth: np.ndarray, mask: np.ndarray) -> np.ndarray:
    h, w = depth.shape
    qs = []
    for r in range(h):
        for c in range(w):
            if mask[r, c] > 0:
                qs.append(1.0 / max(float(depth[r, c]), 1e-6))
    q_min, q_max = min(qs), max(qs)
    out = np.zeros((h, w))
    for r in range(h):
        for c in range(w):
            if mask[r, c] > 0 and q_max > q_min:
                q = 1.0 / max(float(depth[r, c]), 1e-6)
                out[r, c] = (q - q_min) / (q_max - q_min)
    return out


def _tap(pos_out: int, n_out: int, n_in: int):
    src = (pos_out + 0.5) * (n_in / n_out) - 0.5
    src = min(max(src, 0.0), n_in - 1)
    lo = int(math.floor(src))
    return lo, min(lo + 1, n_in - 1), src - lo


def crop_align_oracle(sil: np.ndarray, depth: np.ndarray, final_width: int = 44):
    """Per-pixel crop/scale/center/trim; returns (silhouette 0/255, depth, axis)."""
    h_in, w_in = sil.shape
    rows = [r for r in range(h_in) if any(sil[r, c] > 0 for c in range(w_in))]
    top, bottom = rows[0], rows[-1]
    h = bottom - top + 1
    new_w = max(1, int(math.floor(w_in * TARGET_H / h + 0.5)))

    s_sc = [[0] * new_w for _ in range(TARGET_H)]
    d_sc = [[0.0] * new_w for _ in range(TARGET_H)]
    for i in range(TARGET_H):
        si = min(int(math.floor((i + 0.5) * (h / TARGET_H))), h - 1)
        r0, r1, ty = _tap(i, TARGET_H, h)
        for j in range(new_w):
            sj = min(int(math.floor((j + 0.5) * (w_in / new_w))), w_in - 1)
            if sil[top + si, sj] == 0:
                continue
            s_sc[i][j] = 1
            c0, c1, tx = _tap(j, new_w, w_in)
            num = den = 0.0
            for rr, wy in ((r0, 1 - ty), (r1, ty)):
                for cc, wx in ((c0, 1 - tx), (c1, tx)):
                    if sil[top + rr, cc] > 0:
                        num += wy * wx * float(depth[top + rr, cc])
                        den += wy * wx
            d_sc[i][j] = num / den

    total = sum(sum(row) for row in s_sc)
    cum, axis = 0, None
    for j in range(new_w):
        cum += sum(s_sc[i][j] for i in range(TARGET_H))
        if 2 * cum > total:
            axis = j
            break

    trim = (WINDOW_W - final_width) // 2
    s_out = np.zeros((TARGET_H, final_width), dtype=np.int64)
    d_out = np.zeros((TARGET_H, final_width))
    for c in range(final_width):
        src = axis - WINDOW_W // 2 + trim + c
        if 0 <= src < new_w:
            for i in range(TARGET_H):
                s_out[i, c] = 255 * s_sc[i][src]
                d_out[i, c] = d_sc[i][src]
    return s_out, d_out, axis


def rank_oracle_hits(inst: dict, ks=(1, 5)) -> list[list[bool] | None]:
    """Per probe: hit flag for each k, or None when no gallery entry is admissible."""
    g, p = inst["gallery"], inst["probe"]
    out = []
    for i in range(len(p)):
        dist = []
        for j in range(len(g)):
            parts = []
            for q in range(g.shape[1]):
                parts.append(math.sqrt(sum((p[i, q, e] - g[j, q, e]) ** 2 for e in range(g.shape[2]))))
            dist.append(sum(parts) / len(parts))
        adm = [j for j in range(len(g)) if not (inst["exclude"] and inst["g_view"][j] == inst["p_view"][i])]
        if not adm:
            out.append(None)
            continue
        flags = []
        for k in ks:
            hit = False
            for j in adm:
                if inst["g_subj"][j] != inst["p_subj"][i]:
                    continue
                # position of j: admissible entries strictly closer, or tied and listed earlier
                better = sum(1 for m in adm if dist[m] < dist[j] or (dist[m] == dist[j] and m < j))
                if better < k:
                    hit = True
            flags.append(hit)
        out.append(flags)
    return out


def rank_oracle(inst: dict, ks=(1, 5)) -> list[float]:
    """Exhaustive ranking; returns [mean R-k for each k..., skipped probes]."""
    hits = {}  # (cond, view) -> list of per-k hit flags
    skipped = 0
    for i, flags in enumerate(rank_oracle_hits(inst, ks)):
        if flags is None:
            skipped += 1
            continue
        hits.setdefault((inst["p_cond"][i], inst["p_view"][i]), []).append(flags)
    conds = sorted({c for c, _ in hits})
    result = []
    for ki in range(len(ks)):
        per_cond = []
        for c in conds:
            cells = [100.0 * sum(f[ki] for f in v) / len(v) for (cc, _), v in sorted(hits.items()) if cc == c]
            per_cond.append(sum(cells) / len(cells))
        result.append(sum(per_cond) / len(per_cond) if per_cond else float("nan"))
    return result + [float(skipped)]


# -- golden files ----------------------------------------------------------------

def build_cases() -> list[GoldenCase]:
    frames = seeded_frames()
    crops = [crop_align_oracle(s, d) for s, d in frames]
    depth_frames = seeded_depth_frames()
    disp = [disparity_oracle(d, m) for d, m in depth_frames]
    ranks = [rank_oracle(inst) for inst in seeded_rank_instances()]
    return [
        GoldenCase("crop_silhouettes", np.stack([c[0] for c in crops]), 0, "DERIVED",
                   "seeded_frames(50,1234)"),
        GoldenCase("crop_depth", np.stack([c[1] for c in crops]), 1e-6, "DERIVED",
                   "seeded_frames(50,1234)"),
        GoldenCase("crop_axis", np.array([c[2] for c in crops], dtype=np.int64), 0, "DERIVED",
                   "seeded_frames(50,1234)"),
        GoldenCase("disparity", np.concatenate([d.ravel() for d in disp]), 1e-6, "DERIVED",
                   "seeded_depth_frames(20,99)"),
        GoldenCase("rank_k", np.array(ranks), 1e-9, "DERIVED", "seeded_rank_instances(200,7)"),
    ]


def run_oracles(out_dir: str | Path | None = None) -> list[Path]:
    """Regenerate every golden file from the oracles; returns the written paths."""
    out_dir = Path(out_dir) if out_dir else GOLDEN_DIR
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for case in build_cases():
        p = out_dir / f"{case.name}.txt"
        p.write_text(case.dumps())
        paths.append(p)
    return paths


# -- checking the library against the frozen files --------------------------------

def library_outputs() -> dict[str, np.ndarray]:
    """Run the vectorized implementations on the same seeded inputs."""
    from .evaluation import EmbeddingSet, rank_k, report
    from .preprocess import crop_align, normalize_disparity

    pairs = [crop_align(s, d) for s, d in seeded_frames()]
    disp = [normalize_disparity(d, m) for d, m in seeded_depth_frames()]
    ranks = []
    for inst in seeded_rank_instances():
        probe = EmbeddingSet(inst["probe"], inst["p_subj"], inst["p_cond"], inst["p_view"])
        gallery = EmbeddingSet(inst["gallery"], inst["g_subj"], ["g"] * len(inst["g_subj"]),
                               inst["g_view"])
        res = rank_k(probe, gallery, (1, 5), inst["exclude"])
        rep = report(res, probe, sorted(set(inst["p_cond"])), inst["exclude"])
        ranks.append([rep.mean[1], rep.mean[5], float(len(res.skipped))])
    return {
        "crop_silhouettes": np.stack([p.silhouette.astype(np.int64) for p in pairs]),
        "crop_depth": np.stack([p.depth for p in pairs]),
        "crop_axis": np.array([p.center_axis for p in pairs], dtype=np.int64),
        "disparity": np.concatenate([d.ravel() for d in disp]),
        "rank_k": np.array(ranks),
    }


def compare(case: GoldenCase, actual: np.ndarray) -> float:
    """Largest absolute deviation (NaNs must coincide)."""
    if actual.shape != case.expected.shape:
        return float("inf")
    a, e = np.asarray(actual, dtype=np.float64), case.expected.astype(np.float64)
    if not np.array_equal(np.isnan(a), np.isnan(e)):
        return float("inf")
    ok = ~np.isnan(e)
    return float(np.max(np.abs(a[ok] - e[ok]), initial=0.0))


def verify(golden_dir: str | Path | None = None) -> list[tuple[str, bool, float]]:
    golden_dir = Path(golden_dir) if golden_dir else GOLDEN_DIR
    actual = library_outputs()
    rows = []
    for name, arr in actual.items():
        case = load_case(golden_dir / f"{name}.txt")
        err = compare(case, arr)
        rows.append((name, err <= case.tolerance, err))
    return rows
