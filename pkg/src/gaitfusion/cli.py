"""Command-line entry point: ``gait <command> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ConfigError, EmptySequence, TrainingDiverged

log = logging.getLogger("gaitfusion")


def _overrides(pairs) -> dict[str, str]:
    out = {}
    for p in pairs or ():
        if "=" not in p:
            raise ConfigError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def cmd_preprocess(args) -> int:
    from .preprocess import preprocess_tree

    stats = preprocess_tree(Path(args.inp), Path(args.out), args.final_width, args.scope)
    print(" ".join(f"{k}={v}" for k, v in stats.items()))
    return 0


def cmd_synth(args) -> int:
    from .data import synth_generate

    index = synth_generate(args.out, args.ids, args.seqs, args.frames, args.seed)
    print(f"wrote {len(index.entries)} sequences for {args.ids} subjects to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .config import load_config
    from .train import train

    cfg = load_config(args.config, _overrides(args.set))
    res = train(cfg, args.out)
    print(f"trained {res.steps} steps; checkpoint {res.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    from .config import load_config
    from .data import SequenceStore, load_index
    from .evaluation import EvalProtocol, evaluate, write_report
    from .model import load_checkpoint, spec_from_config

    model, payload = load_checkpoint(args.checkpoint)
    if args.config:
        expected = spec_from_config(load_config(args.config))
        if expected.as_dict() != payload["model_spec"]:
            raise ConfigError(f"checkpoint {args.checkpoint} was not trained with {args.config}: "
                              "model or fusion settings differ")
    protocol = EvalProtocol.load(args.protocol)
    root = args.data or protocol.root
    if not root:
        from .config import loads
        root = loads(payload["config"])["data.root"]
    store = SequenceStore(root, load_index(root))
    rep = evaluate(model, store, protocol)
    out = Path(args.out) if args.out else Path(args.checkpoint).resolve().parent / "eval"
    write_report(rep, out)
    try:
        from .plotting import plot_view_matrix
        plot_view_matrix(rep, out / "view_matrix.png")
    except Exception as exc:
        log.warning("view figure not rendered: %s", exc)
    sys.stdout.write(rep.render_text())
    return 0


def cmd_ablate(args) -> int:
    from .ablate import run_ablation
    from .config import load_config

    cfg = load_config(args.config, _overrides(args.set))
    proto_path = args.protocol or cfg["eval.protocol"]
    if not proto_path:
        raise ConfigError("no evaluation protocol: pass --protocol or set eval.protocol")
    axes = [a.strip() for a in args.axes.split(",") if a.strip()]
    out = Path(args.out or Path(cfg["run.out_dir"]) / "ablation")
    rep = run_ablation(cfg, axes, Path(proto_path).read_text(), out, args.parallel)
    sys.stdout.write(rep.render_text())
    return 0


def cmd_golden(args) -> int:
    from . import golden

    if args.regen:
        for p in golden.run_oracles(args.dir):
            print(f"wrote {p}")
        return 0
    failed = 0
    for name, ok, err in golden.verify(args.dir):
        print(f"{'PASS' if ok else 'FAIL'} {name} max_abs_err={err:.3g}")
        failed += not ok
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gait", description="Silhouette + depth gait recognition.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="crop, align and normalize a raw dataset tree")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--final-width", type=int, default=44)
    p.add_argument("--scope", choices=("frame", "sequence"), default="frame",
                   help="disparity normalization scope")
    p.set_defaults(fn=cmd_preprocess)

    p = sub.add_parser("synth", help="render a synthetic raw dataset")
    p.add_argument("--ids", type=int, default=8)
    p.add_argument("--seqs", type=int, default=4, help="sequences per subject")
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config")
    p.add_argument("--out", help="run directory (default: run.out_dir)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="rank-k evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--protocol", required=True)
    p.add_argument("--config", help="refuse to run if the checkpoint disagrees with this config")
    p.add_argument("--data", help="preprocessed dataset root")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run the ablation grid")
    p.add_argument("--config")
    p.add_argument("--axes", default="fusion_method,channels,stages",
                   help="comma list of fusion_method, channels, stages, modality")
    p.add_argument("--protocol")
    p.add_argument("--out")
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("golden", help="check the library against the frozen golden files")
    p.add_argument("--regen", action="store_true", help="rewrite the golden files from the oracles")
    p.add_argument("--dir")
    p.set_defaults(fn=cmd_golden)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, EmptySequence, FileNotFoundError) as exc:
        print(f"gait {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"gait {args.command}: diverged: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
