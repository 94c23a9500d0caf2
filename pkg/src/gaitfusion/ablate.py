"""Ablation harness: fusion method, channel width, fusion stage and modality studies."""
from __future__ import annotations

import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, loads
from .data import SequenceStore, load_index
from .errors import ConfigError
from .evaluation import EvalProtocol, evaluate

log = logging.getLogger(__name__)

AXES = ("fusion_method", "channels", "stages", "modality")
METHOD_LABELS = {"plus": "PlusFusion", "cat": "Cat Fusion", "attention": "Attention Fusion",
                 "mcf": "MCF"}
MODALITY_ROWS = (
    ("baseline", "Baseline (sils)", {"model.modality": "silhouette"}),
    ("depth", "Depth Map", {"model.modality": "depth"}),
    ("msf", "+MSF", {"model.modality": "both", "fusion.kind": "mcf", "fusion.stages": "all",
                     "fusion.fsd_rule": "zero"}),
    ("mcf", "+MSF+CLF", {"model.modality": "both", "fusion.kind": "mcf", "fusion.stages": "all"}),
)


@dataclass
class AblationRun:
    name: str
    settings: dict  # axis -> value, used to address table cells
    overrides: dict
    seed: int


@dataclass
class AblationResult:
    run: AblationRun
    exclude: dict  # condition -> rank-1, plus "Mean"
    include: dict


def _widths(c: int, n: int) -> tuple[int, ...]:
    return tuple(c * 2 ** i for i in range(n))


def _default_stage(method: str, stages: list[str]) -> str:
    want = "all" if method == "mcf" else "2"
    return want if want in stages else stages[0]


def plan_runs(cfg: RunConfig, axes) -> list[AblationRun]:
    axes = list(dict.fromkeys(axes))
    bad = [a for a in axes if a not in AXES]
    if bad:
        raise ConfigError(f"unknown ablation axes {bad}; choose from {AXES}")
    n_stages = len(cfg["model.channels"])
    methods = list(cfg["ablate.methods"]) if "fusion_method" in axes else [cfg["fusion.kind"]]
    chans = list(cfg["ablate.channels"]) if "channels" in axes else [None]
    stages = list(cfg["ablate.stages"]) if "stages" in axes else [None]
    plans: list[tuple[str, dict, dict]] = []
    if set(axes) & {"fusion_method", "channels", "stages"}:
        for m, c, s in itertools.product(methods, chans, stages):
            ov = {"model.modality": "both", "fusion.kind": m,
                  "fusion.stages": s if s is not None else "default"}
            if c is not None:
                ov["model.channels"] = _widths(c, n_stages)
            name = f"{m}" + (f"_c{c}" if c is not None else "") + (f"_s{s}" if s is not None else "")
            plans.append((name, {"method": m, "channels": c, "stages": s, "modality": None}, ov))
    if "modality" in axes:
        for key, _, ov in MODALITY_ROWS:
            plans.append((f"modality_{key}", {"method": None, "channels": None, "stages": None,
                                              "modality": key}, dict(ov)))
    runs = []
    for seed in cfg["ablate.seeds"]:
        for name, settings, ov in plans:
            runs.append(AblationRun(f"{name}_seed{seed}", settings, ov, seed))
    return runs


def _execute(args) -> tuple[dict, dict]:
    cfg_text, out_dir, protocol_text = args
    from .train import train

    cfg = loads(cfg_text)
    res = train(cfg, out_dir)
    protocol = EvalProtocol.from_text(protocol_text)
    root = protocol.root or cfg["data.root"]
    store = SequenceStore(root, load_index(root))
    out = {}
    for mode, exclude in (("exclude", True), ("include", False)):
        rep = evaluate(res.model, store, protocol.with_exclusion(exclude))
        row = {c: v[1] for c, v in rep.per_condition.items()}
        row["Mean"] = rep.mean[1]
        out[mode] = row
    return out["exclude"], out["include"]


def run_ablation(cfg: RunConfig, axes, protocol_text: str, out_dir: str | Path,
                 parallel: int = 1) -> "AblationReport":
    out_dir = Path(out_dir)
    runs = plan_runs(cfg, axes)
    jobs = []
    for r in runs:
        run_cfg = cfg.with_values({**r.overrides, "run.seed": r.seed,
                                   "run.out_dir": str(out_dir / "runs" / r.name)})
        jobs.append((run_cfg.dumps(), str(out_dir / "runs" / r.name), protocol_text))
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            outs = list(pool.map(_execute, jobs))
    else:
        outs = []
        for r, job in zip(runs, jobs):
            log.info("ablation run %s", r.name)
            outs.append(_execute(job))
    results = [AblationResult(r, ex, inc) for r, (ex, inc) in zip(runs, outs)]
    protocol = EvalProtocol.from_text(protocol_text)
    rep = AblationReport(cfg, list(dict.fromkeys(axes)), results, protocol.exclude_identical_view)
    rep.write(out_dir)
    return rep


@dataclass
class Table:
    key: str
    title: str
    label_columns: list[str]
    value_columns: list[str]
    rows: list[tuple[list[str], list[float]]] = field(default_factory=list)

    def render(self) -> str:
        widths = [max(len(c), *(len(r[0][i]) for r in self.rows)) if self.rows else len(c)
                  for i, c in enumerate(self.label_columns)]
        head = "  ".join(c.ljust(w) for c, w in zip(self.label_columns, widths))
        head += "".join(f"{c:>9s}" for c in self.value_columns)
        lines = [self.title, head, "-" * len(head)]
        for labels, vals in self.rows:
            line = "  ".join(l.ljust(w) for l, w in zip(labels, widths))
            lines.append(line + "".join(f"{v:9.1f}" for v in vals))
        return "\n".join(lines) + "\n"

    def records(self) -> list[dict]:
        out = []
        for labels, vals in self.rows:
            rec = {"table": self.key}
            rec.update(dict(zip(self.label_columns, labels)))
            rec.update(dict(zip(self.value_columns, vals)))
            out.append(rec)
        return out


class AblationReport:
    def __init__(self, cfg: RunConfig, axes, results: list[AblationResult], exclude: bool = True):
        self.cfg = cfg
        self.axes = axes
        self.results = results
        self.mode = "exclude" if exclude else "include"

    def _cell(self, mode: str = None, **settings) -> dict:
        mode = mode or self.mode
        hits = [getattr(r, mode) for r in self.results
                if all(r.run.settings.get(k) == v for k, v in settings.items())]
        if not hits:
            raise KeyError(f"no ablation run for {settings}")
        cols = list(hits[0])
        return {c: float(np.mean([h[c] for h in hits])) for c in cols}

    def _conditions(self) -> list[str]:
        return [c for c in getattr(self.results[0], self.mode) if c != "Mean"]

    def tables(self) -> list[Table]:
        conds = self._conditions()
        vcols = conds + ["Mean"]
        methods = list(self.cfg["ablate.methods"]) if "fusion_method" in self.axes else [self.cfg["fusion.kind"]]
        chans = list(self.cfg["ablate.channels"]) if "channels" in self.axes else [None]
        stages = list(self.cfg["ablate.stages"]) if "stages" in self.axes else [None]
        c_main = max(c for c in chans) if chans != [None] else None

        def stage_for(m):
            return _default_stage(m, stages) if stages != [None] else None

        tables = []
        if "fusion_method" in self.axes:
            t = Table("fusion_method", "Fusion method (rank-1, %s identical view)" % self.mode,
                      ["Fusion Method"], vcols)
            for m in methods:
                cell = self._cell(method=m, channels=c_main, stages=stage_for(m))
                t.rows.append(([METHOD_LABELS[m]], [cell[c] for c in vcols]))
            tables.append(t)
        if "channels" in self.axes:
            t = Table("channels", "Channel number (rank-1, %s identical view)" % self.mode,
                      ["Fusion Method", "Channel Number"], vcols)
            for m in methods:
                for c in chans:
                    cell = self._cell(method=m, channels=c, stages=stage_for(m))
                    t.rows.append(([METHOD_LABELS[m], f"c={c}"], [cell[v] for v in vcols]))
            tables.append(t)
        if "stages" in self.axes:
            t = Table("stages", "Fusion stage (rank-1, %s identical view)" % self.mode,
                      ["Fusion Method", "Fusion Stage"], vcols)
            for m in methods:
                for s in stages:
                    cell = self._cell(method=m, channels=c_main, stages=s)
                    label = "All Stages" if s == "all" else f"Stage={s}"
                    t.rows.append(([METHOD_LABELS[m], label], [cell[v] for v in vcols]))
            tables.append(t)
        if "modality" in self.axes:
            t = Table("modality", "Key modules (mean rank-1)", ["Setting"], ["Exclude", "Include"])
            for key, label, _ in MODALITY_ROWS:
                ex = self._cell("exclude", modality=key)["Mean"]
                inc = self._cell("include", modality=key)["Mean"]
                t.rows.append(([label], [ex, inc]))
            tables.append(t)
        return tables

    def render_text(self) -> str:
        return "\n".join(t.render() for t in self.tables())

    def write(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        tables = self.tables()
        (out_dir / "ablation.txt").write_text("\n".join(t.render() for t in tables))
        with open(out_dir / "ablation.jsonl", "w") as fh:
            for t in tables:
                for rec in t.records():
                    fh.write(json.dumps(rec) + "\n")
        try:
            from .plotting import plot_ablation_table
            for t in tables:
                mean_col = "Mean" if "Mean" in t.value_columns else t.value_columns[0]
                i = t.value_columns.index(mean_col)
                plot_ablation_table(t.title, [" / ".join(r[0]) for r in t.rows],
                                    [r[1][i] for r in t.rows], out_dir / f"ablation_{t.key}.png")
        except Exception as exc:  # figures never block the text report
            log.warning("ablation figures not rendered: %s", exc)
