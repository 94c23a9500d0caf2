"""Staged feature extractors for the silhouette (SFE) and depth (DFE) branches.

Each stage is ``blocks`` repetitions of [3x3 conv -> Gamma], with the stage
stride applied in the first block. A 3x3 stem lifts the 1-channel frames to
the first stage width.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError
from .numerics import Gamma, SpatialConv

PROFILES = {
    "desk": (4, 8, 16, 32),
    "paper-like": (64, 128, 256, 512),
}


@dataclass(frozen=True)
class StageConfig:
    index: int
    in_channels: int
    out_channels: int
    stride: int = 1
    blocks: int = 1
    temporal_kernel: int = 1

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ConfigError(f"stage {self.index}: stride must be 1 or 2")
        if self.blocks < 1:
            raise ConfigError(f"stage {self.index}: need at least one block")
        if self.temporal_kernel not in (1, 3):
            raise ConfigError(f"stage {self.index}: temporal kernel must be 1 or 3")

    def as_dict(self) -> dict:
        return dict(index=self.index, in_channels=self.in_channels,
                    out_channels=self.out_channels, stride=self.stride, blocks=self.blocks,
                    temporal_kernel=self.temporal_kernel)


def build_stage_configs(channels, strides=None, blocks=None, temporal=None) -> list[StageConfig]:
    n = len(channels)
    strides = strides or (1, 2, 2, 1)[:n] + (1,) * max(0, n - 4)
    blocks = blocks or (1,) * n
    temporal = temporal or (1,) * n
    if not (len(strides) == len(blocks) == len(temporal) == n):
        raise ConfigError("channels, strides, blocks and temporal kernels need equal lengths")
    cfgs = []
    prev = channels[0]
    for i in range(n):
        cfgs.append(StageConfig(i + 1, prev, channels[i], strides[i], blocks[i], temporal[i]))
        prev = channels[i]
    return cfgs


class EncoderStage(nn.Module):
    def __init__(self, cfg: StageConfig, gamma_order: str = "paper", bias: bool = True):
        super().__init__()
        self.cfg = cfg
        layers = []
        ch = cfg.in_channels
        for b in range(cfg.blocks):
            layers.append(SpatialConv(ch, cfg.out_channels, 3, stride=cfg.stride if b == 0 else 1,
                                      bias=bias, temporal_kernel=cfg.temporal_kernel))
            layers.append(Gamma(cfg.out_channels, gamma_order))
            ch = cfg.out_channels
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


def encode_stage(x: torch.Tensor, stage: EncoderStage) -> torch.Tensor:
    if x.dim() != 5 or x.shape[1] != stage.cfg.in_channels:
        raise ConfigError(f"stage {stage.cfg.index} expects {stage.cfg.in_channels} channels, "
                          f"got input of shape {tuple(x.shape)}")
    return stage(x)


class Branch(nn.Module):
    """One feature extractor: stem followed by the staged body."""

    def __init__(self, stage_cfgs: list[StageConfig], gamma_order: str = "paper",
                 bias: bool = True, in_channels: int = 1):
        super().__init__()
        width = stage_cfgs[0].in_channels
        self.stem = nn.Sequential(SpatialConv(in_channels, width, 3, bias=bias),
                                  Gamma(width, gamma_order))
        self.stages = nn.ModuleList(EncoderStage(c, gamma_order, bias) for c in stage_cfgs)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.stem(x)
        for stage in self.stages:
            x = encode_stage(x, stage)
        return x


def forward_dual(s: torch.Tensor, d: torch.Tensor, sfe: Branch, dfe: Branch,
                 fusions: dict[int, nn.Module]) -> tuple[torch.Tensor, list[dict]]:
    """Run both branches stage by stage, fusing at the stages in ``fusions``.

    Before the first fusion each branch consumes its own modality. A fused
    stage feeds its output to both branches of the next stage; a stage without
    fusion after that point runs the silhouette branch alone.
    """
    if s.shape != d.shape:
        raise ConfigError(f"silhouette and depth inputs differ: {tuple(s.shape)} vs {tuple(d.shape)}")
    x_s, x_d = sfe.stem(s), dfe.stem(d)
    unified = None
    traces = []
    for i, (st_s, st_d) in enumerate(zip(sfe.stages, dfe.stages), start=1):
        fusion = fusions.get(i)
        if unified is None:
            trace = {"stage": i, "S_in": x_s, "D_in": x_d}
            f_s, f_d = encode_stage(x_s, st_s), encode_stage(x_d, st_d)
            trace.update(F_s=f_s, F_d=f_d, fused=fusion is not None)
            if fusion is None:
                x_s, x_d = f_s, f_d
            else:
                unified, extra = fusion(f_s, f_d, 1)
                trace.update(extra)
        elif fusion is not None:
            trace = {"stage": i, "S_in": unified, "D_in": unified}
            f_s, f_d = encode_stage(unified, st_s), encode_stage(unified, st_d)
            trace.update(F_s=f_s, F_d=f_d, fused=True)
            unified, extra = fusion(f_s, f_d, i)
            trace.update(extra)
        else:
            trace = {"stage": i, "S_in": unified, "D_in": None}
            unified = encode_stage(unified, st_s)
            trace.update(F_s=unified, F_d=None, fused=False)
        traces.append(trace)
    if unified is None:
        raise ConfigError("no fusion stage was active in dual mode")
    return unified, traces


def forward_single(x: torch.Tensor, branch: Branch) -> tuple[torch.Tensor, list[dict]]:
    x = branch.stem(x)
    traces = []
    for i, stage in enumerate(branch.stages, start=1):
        trace = {"stage": i, "S_in": x}
        x = encode_stage(x, stage)
        trace.update(F_s=x, fused=False)
        traces.append(trace)
    return x, traces
