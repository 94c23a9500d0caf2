"""SGD training loop with a milestone learning-rate schedule."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .data import SamplerConfig, SequenceStore, load_batch, load_index, sample_batch
from .errors import ConfigError, TrainingDiverged
from .head import combined_loss
from .model import GaitModel, save_checkpoint, spec_from_config

log = logging.getLogger(__name__)

LOG_NAME = "loss.log"
CONFIG_NAME = "config.txt"
FINAL_CHECKPOINT = "final.pt"


def lr_at(step: int, base: float, milestones) -> float:
    """Learning rate used at 1-based ``step``: x0.1 for every milestone already passed."""
    return base * 0.1 ** sum(step > m for m in milestones)


def configure_determinism(seed: int, threads: int = 1) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(max(1, threads))
    torch.use_deterministic_algorithms(True)


@dataclass
class TrainResult:
    out_dir: Path
    checkpoint: Path
    steps: int
    losses: list[float] = field(default_factory=list)
    model: GaitModel | None = None
    subjects: list[str] = field(default_factory=list)


def train(cfg: RunConfig, out_dir: str | Path | None = None, on_step=None) -> TrainResult:
    """Train from ``cfg``; ``on_step(step, model)`` may return True to stop early."""
    out_dir = Path(out_dir or cfg["run.out_dir"])
    if not cfg["data.root"]:
        raise ConfigError("data.root is not set")
    configure_determinism(cfg["run.seed"], cfg["run.threads"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / CONFIG_NAME).write_text(cfg.dumps())

    index = load_index(cfg["data.root"])
    store = SequenceStore(cfg["data.root"], index)
    subjects = index.subjects()
    label_of = {s: i for i, s in enumerate(subjects)}
    model = GaitModel(spec_from_config(cfg), len(subjects))
    model.train()
    optim = torch.optim.SGD(model.parameters(), lr=cfg["train.lr"],
                            momentum=cfg["train.momentum"], weight_decay=cfg["train.weight_decay"])
    sampler = SamplerConfig(cfg["data.p"], cfg["data.k"], cfg["data.clip_len"],
                            cfg["data.short_clip_policy"])
    rng = np.random.default_rng(cfg["run.seed"])
    ckpt_dir = out_dir / "checkpoints"
    total = cfg["train.total_steps"]
    result = TrainResult(out_dir, out_dir / FINAL_CHECKPOINT, total, model=model, subjects=subjects)

    if total == 0:
        save_checkpoint(result.checkpoint, model, cfg, step=0, extra={"subjects": subjects})
        (out_dir / LOG_NAME).write_text("step loss l_tri l_ce lr\n")
        return result

    with open(out_dir / LOG_NAME, "w") as logf:
        logf.write("step loss l_tri l_ce lr\n")
        for step in range(1, total + 1):
            lr = lr_at(step, cfg["train.lr"], cfg["train.milestones"])
            for group in optim.param_groups:
                group["lr"] = lr
            batch = sample_batch(index, sampler, rng)
            sils, deps = load_batch(store, batch)
            labels = torch.tensor([label_of[s] for s in batch.subjects])
            f, logits = model(torch.from_numpy(sils), torch.from_numpy(deps))
            loss, l_tri, l_ce = combined_loss(f, logits, labels, cfg["head.alpha"],
                                              cfg["head.beta"], cfg["head.margin"])
            if not math.isfinite(loss.item()):
                logf.write(f"{step} nan nan nan {lr:g}\n")
                raise TrainingDiverged(f"non-finite loss at step {step}; "
                                       f"last good checkpoint kept in {ckpt_dir}")
            optim.zero_grad(set_to_none=True)
            loss.backward()
            optim.step()
            result.losses.append(loss.item())
            logf.write(f"{step} {loss.item():.6f} {l_tri.item():.6f} {l_ce.item():.6f} {lr:g}\n")
            if step % cfg["train.checkpoint_every"] == 0 or step == total:
                logf.flush()
                save_checkpoint(ckpt_dir / f"step_{step:06d}.pt", model, cfg, step=step,
                                extra={"subjects": subjects})
            if on_step is not None:
                stop = on_step(step, model)
                model.train()
                if stop:
                    result.steps = step
                    break
    save_checkpoint(result.checkpoint, model, cfg, step=result.steps, extra={"subjects": subjects})
    try:
        from .plotting import plot_loss_curve
        plot_loss_curve(out_dir / LOG_NAME, out_dir / "loss.png")
    except Exception as exc:  # figure is a convenience, never fatal
        log.warning("loss curve not rendered: %s", exc)
    model.eval()
    return result


def read_loss_log(path: str | Path) -> dict[str, np.ndarray]:
    rows = [line.split() for line in Path(path).read_text().splitlines()[1:] if line.strip()]
    cols = ("step", "loss", "l_tri", "l_ce", "lr")
    return {c: np.array([float(r[i]) for r in rows]) for i, c in enumerate(cols)}
