"""Cross-modal fusion of silhouette and depth feature maps.

The multi-scale cross-level block (``MCFusion``) concatenates both modalities,
scores the result with a local (3x3) and a global (5x5) branch, turns the
summed scores into per-modality softmax weights, blends the two feature maps
with them and finally adds the unified encoder features once both branches
share their input. ``PlusFusion``, ``CatFusion`` and ``AttentionFusion`` are
the simpler baselines used in ablations.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .errors import ConfigError
from .numerics import Gamma, SpatialConv, softmax_axis

KINDS = ("mcf", "plus", "cat", "attention")
FSD_RULES = ("mean", "sum", "zero")
GRANULARITIES = ("per_channel", "per_pixel")


@dataclass(frozen=True)
class FusionVariant:
    kind: str = "mcf"
    stages: Optional[tuple[int, ...]] = None  # None -> the kind's default
    reduction: int = 4
    fsd_rule: str = "mean"
    weight_granularity: str = "per_channel"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"fusion kind must be one of {KINDS}, got {self.kind!r}")
        if self.fsd_rule not in FSD_RULES:
            raise ConfigError(f"fsd_rule must be one of {FSD_RULES}")
        if self.weight_granularity not in GRANULARITIES:
            raise ConfigError(f"weight_granularity must be one of {GRANULARITIES}")
        if self.reduction < 1:
            raise ConfigError("reduction ratio must be >= 1")

    def active_stages(self, n_stages: int) -> tuple[int, ...]:
        if self.stages is None:
            stages = tuple(range(1, n_stages + 1)) if self.kind == "mcf" else (min(2, n_stages),)
        else:
            stages = tuple(sorted(set(self.stages)))
        if not stages or stages[0] < 1 or stages[-1] > n_stages:
            raise ConfigError(f"fusion stages {stages} outside 1..{n_stages}")
        return stages

    def as_dict(self) -> dict:
        return {"kind": self.kind, "stages": list(self.stages) if self.stages else None,
                "reduction": self.reduction, "fsd_rule": self.fsd_rule,
                "weight_granularity": self.weight_granularity}


def concat_modalities(f_s: torch.Tensor, f_d: torch.Tensor) -> torch.Tensor:
    if f_s.shape != f_d.shape:
        raise ConfigError(f"modality shapes differ: {tuple(f_s.shape)} vs {tuple(f_d.shape)}")
    return torch.cat([f_s, f_d], dim=1)


def inner_width(total_channels: int, reduction: int) -> int:
    return max(total_channels // reduction, 2)


class ScoreBranch(nn.Module):
    """Con1 -> Gamma -> Conk -> Gamma -> Con1, no activation on the output."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, reduction: int,
                 gamma_order: str = "paper", bias: bool = True):
        super().__init__()
        mid = inner_width(in_channels, reduction)
        self.reduce = SpatialConv(in_channels, mid, 1, bias=bias)
        self.gamma1 = Gamma(mid, gamma_order)
        self.spatial = SpatialConv(mid, mid, kernel_size, bias=bias)
        self.gamma2 = Gamma(mid, gamma_order)
        self.expand = SpatialConv(mid, out_channels, 1, bias=bias)

    def forward(self, f_t: torch.Tensor) -> torch.Tensor:
        return self.expand(self.gamma2(self.spatial(self.gamma1(self.reduce(f_t)))))


class MSSE(nn.Module):
    """Local (3x3) and global (5x5) score branches over concatenated features."""

    def __init__(self, channels: int, reduction: int = 4, gamma_order: str = "paper",
                 bias: bool = True, weight_granularity: str = "per_channel"):
        super().__init__()
        out = 2 * channels if weight_granularity == "per_channel" else 2
        self.local = ScoreBranch(2 * channels, out, 3, reduction, gamma_order, bias)
        self.glob = ScoreBranch(2 * channels, out, 5, reduction, gamma_order, bias)

    def forward(self, f_t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.local(f_t), self.glob(f_t)


def msse_scores(f_t: torch.Tensor, msse: MSSE) -> tuple[torch.Tensor, torch.Tensor]:
    return msse(f_t)


def m_atf(l_s: torch.Tensor, g_s: torch.Tensor) -> torch.Tensor:
    """Softmax weights over the modality pair.

    The summed score channels are read as (2 modalities x C); the result has
    shape (N, 2, C, T, H, W). A 2-channel score map gives C = 1, which
    broadcasts over feature channels.
    """
    s = l_s + g_s
    n, ch = s.shape[:2]
    if ch % 2:
        raise ConfigError(f"score channels must be even, got {ch}")
    return softmax_axis(s.reshape(n, 2, ch // 2, *s.shape[2:]), axis=1)


def weighted_fuse(f_s: torch.Tensor, f_d: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    x = f_s * w[:, 0] + f_d * w[:, 1]
    # where both modalities agree the blend must return them unchanged; the
    # correction is detached so gradients stay those of the formula above
    agree = f_s == f_d
    if bool(agree.any()):
        x = x + torch.where(agree, f_s - x, torch.zeros_like(x)).detach()
    return x


def unified_features(f_s: torch.Tensor, f_d: torch.Tensor, rule: str = "mean") -> torch.Tensor:
    if rule == "mean":
        return (f_s + f_d) * 0.5
    if rule == "sum":
        return f_s + f_d
    if rule == "zero":
        return torch.zeros_like(f_s)
    raise ConfigError(f"unknown fsd_rule {rule!r}")


def cross_level(x_f: torch.Tensor, f_s: torch.Tensor, f_d: torch.Tensor, stage: int,
                rule: str = "mean") -> torch.Tensor:
    """Residual with the unified encoder features; stage 1 has none to add."""
    if stage <= 1 or rule == "zero":
        return x_f
    return x_f + unified_features(f_s, f_d, rule)


class MCFusion(nn.Module):
    def __init__(self, channels: int, variant: FusionVariant, gamma_order: str = "paper",
                 bias: bool = True):
        super().__init__()
        self.variant = variant
        self.msse = MSSE(channels, variant.reduction, gamma_order, bias,
                         variant.weight_granularity)

    def forward(self, f_s, f_d, stage: int):
        f_t = concat_modalities(f_s, f_d)
        l_s, g_s = self.msse(f_t)
        w = m_atf(l_s, g_s)
        x_f = weighted_fuse(f_s, f_d, w)
        y_f = cross_level(x_f, f_s, f_d, stage, self.variant.fsd_rule)
        return y_f, {"F_t": f_t, "L_S": l_s, "G_S": g_s, "W_S": w, "X_f": x_f, "Y_f": y_f}


class PlusFusion(nn.Module):
    def forward(self, f_s, f_d, stage: int):
        x_f = plus_fusion(f_s, f_d)
        return x_f, {"X_f": x_f, "Y_f": x_f}


def plus_fusion(f_s: torch.Tensor, f_d: torch.Tensor) -> torch.Tensor:
    if f_s.shape != f_d.shape:
        raise ConfigError("modality shapes differ")
    return f_s + f_d


class CatFusion(nn.Module):
    def __init__(self, channels: int, bias: bool = True):
        super().__init__()
        self.proj = SpatialConv(2 * channels, channels, 1, bias=bias)

    def forward(self, f_s, f_d, stage: int):
        f_t = concat_modalities(f_s, f_d)
        x_f = self.proj(f_t)
        return x_f, {"F_t": f_t, "X_f": x_f, "Y_f": x_f}


class AttentionFusion(nn.Module):
    """Single-scale attention: the 3x3 score branch only, no cross-level term."""

    def __init__(self, channels: int, variant: FusionVariant, gamma_order: str = "paper",
                 bias: bool = True):
        super().__init__()
        out = 2 * channels if variant.weight_granularity == "per_channel" else 2
        self.local = ScoreBranch(2 * channels, out, 3, variant.reduction, gamma_order, bias)

    def forward(self, f_s, f_d, stage: int):
        f_t = concat_modalities(f_s, f_d)
        l_s = self.local(f_t)
        w = m_atf(l_s, torch.zeros_like(l_s))
        x_f = weighted_fuse(f_s, f_d, w)
        return x_f, {"F_t": f_t, "L_S": l_s, "W_S": w, "X_f": x_f, "Y_f": x_f}


def build_fusion(channels: int, variant: FusionVariant, gamma_order: str = "paper",
                 bias: bool = True) -> nn.Module:
    if variant.kind == "mcf":
        return MCFusion(channels, variant, gamma_order, bias)
    if variant.kind == "plus":
        return PlusFusion()
    if variant.kind == "cat":
        return CatFusion(channels, bias)
    return AttentionFusion(channels, variant, gamma_order, bias)
