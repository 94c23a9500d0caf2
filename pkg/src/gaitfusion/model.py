"""Full network: two staged branches, per-stage fusion and the embedding head."""
from __future__ import annotations

import io
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import torch
from torch import nn

from .config import RunConfig
from .encoder import Branch, StageConfig, build_stage_configs, forward_dual, forward_single
from .errors import ConfigError
from .fusion import FusionVariant, build_fusion
from .head import Head

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    channels: tuple[int, ...] = (4, 8, 16, 32)
    strides: tuple[int, ...] = (1, 2, 2, 1)
    blocks: tuple[int, ...] = (1, 1, 1, 1)
    temporal_kernel: tuple[int, ...] = (1, 1, 1, 1)
    gamma_order: str = "paper"
    conv_bias: bool = True
    modality: str = "both"
    tie_branches: bool = False
    fusion: FusionVariant = field(default_factory=FusionVariant)
    parts: int = 16
    embed_dim: int = 64
    tp_mode: str = "max"

    def stage_configs(self) -> list[StageConfig]:
        return build_stage_configs(self.channels, self.strides, self.blocks, self.temporal_kernel)

    def as_dict(self) -> dict[str, Any]:
        return {
            "channels": list(self.channels), "strides": list(self.strides),
            "blocks": list(self.blocks), "temporal_kernel": list(self.temporal_kernel),
            "gamma_order": self.gamma_order, "conv_bias": self.conv_bias,
            "modality": self.modality, "tie_branches": self.tie_branches,
            "fusion": self.fusion.as_dict(), "parts": self.parts,
            "embed_dim": self.embed_dim, "tp_mode": self.tp_mode,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelSpec":
        d = dict(d)
        fv = dict(d.pop("fusion"))
        fv["stages"] = tuple(fv["stages"]) if fv.get("stages") else None
        for k in ("channels", "strides", "blocks", "temporal_kernel"):
            d[k] = tuple(d[k])
        return cls(fusion=FusionVariant(**fv), **d)


def spec_from_config(cfg: RunConfig) -> ModelSpec:
    stages = cfg["fusion.stages"]
    if stages == "default":
        fstages = None
    elif stages == "all":
        fstages = tuple(range(1, len(cfg["model.channels"]) + 1))
    else:
        fstages = tuple(int(s) for s in stages.split(","))
    variant = FusionVariant(kind=cfg["fusion.kind"], stages=fstages,
                            reduction=cfg["fusion.reduction"], fsd_rule=cfg["fusion.fsd_rule"],
                            weight_granularity=cfg["fusion.weight_granularity"])
    return ModelSpec(
        channels=cfg["model.channels"], strides=cfg["model.strides"], blocks=cfg["model.blocks"],
        temporal_kernel=cfg["model.temporal_kernel"], gamma_order=cfg["model.gamma_order"],
        conv_bias=cfg["model.conv_bias"], modality=cfg["model.modality"],
        tie_branches=cfg["model.tie_branches"], fusion=variant, parts=cfg["head.parts"],
        embed_dim=cfg["head.embed_dim"], tp_mode=cfg["head.tp_mode"])


class GaitModel(nn.Module):
    """Maps (silhouette, depth) clips of shape (N, 1, T, 64, W) to (f, logits)."""

    def __init__(self, spec: ModelSpec, num_classes: int):
        super().__init__()
        if spec.modality not in ("both", "silhouette", "depth"):
            raise ConfigError(f"unknown modality {spec.modality!r}")
        self.spec = spec
        self.num_classes = num_classes
        cfgs = spec.stage_configs()
        self.sfe = Branch(cfgs, spec.gamma_order, spec.conv_bias) if spec.modality != "depth" else None
        if spec.modality == "depth":
            self.dfe = Branch(cfgs, spec.gamma_order, spec.conv_bias)
        elif spec.modality == "both":
            self.dfe = self.sfe if spec.tie_branches else Branch(cfgs, spec.gamma_order, spec.conv_bias)
        else:
            self.dfe = None
        self.fusions = nn.ModuleDict()
        if spec.modality == "both":
            for i in spec.fusion.active_stages(len(cfgs)):
                self.fusions[str(i)] = build_fusion(cfgs[i - 1].out_channels, spec.fusion,
                                                    spec.gamma_order, spec.conv_bias)
        self.head = Head(cfgs[-1].out_channels, spec.parts, spec.embed_dim, num_classes,
                         spec.tp_mode)

    def features(self, sils: torch.Tensor | None, depth: torch.Tensor | None):
        """Final fused feature map plus per-stage traces."""
        if self.spec.modality == "silhouette":
            return forward_single(sils, self.sfe)
        if self.spec.modality == "depth":
            return forward_single(depth, self.dfe)
        fusions = {int(k): m for k, m in self.fusions.items()}
        return forward_dual(sils, depth, self.sfe, self.dfe, fusions)

    def forward(self, sils, depth, return_trace: bool = False):
        y, traces = self.features(sils, depth)
        f, logits = self.head(y)
        if return_trace:
            return f, logits, traces
        return f, logits


def save_checkpoint(path: str | Path, model: GaitModel, config: RunConfig | None = None,
                    step: int = 0, extra: dict | None = None) -> None:
    state = OrderedDict((k, v.detach().clone()) for k, v in model.state_dict().items())
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "step": step,
        "num_classes": model.num_classes,
        "model_spec": model.spec.as_dict(),
        "stage_configs": [c.as_dict() for c in model.spec.stage_configs()],
        "fusion_variant": model.spec.fusion.as_dict(),
        "config": config.dumps() if config is not None else None,
        "params": state,
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[GaitModel, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint format {payload.get('format_version')!r}")
    spec = ModelSpec.from_dict(payload["model_spec"])
    if spec.fusion.as_dict() != payload["fusion_variant"]:
        raise ConfigError("checkpoint fusion variant disagrees with its model spec")
    model = GaitModel(spec, payload["num_classes"])
    model.load_state_dict(payload["params"])
    model.eval()
    return model, payload
