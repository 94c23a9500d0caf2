"""Embedding head and metric-learning losses."""
from __future__ import annotations

import logging
import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError

log = logging.getLogger(__name__)


def temporal_pool(x: torch.Tensor, mode: str = "max") -> torch.Tensor:
    """(N, C, T, H, W) -> (N, C, H, W)."""
    if mode == "max":
        return x.amax(dim=2)
    if mode == "mean":
        return x.mean(dim=2)
    raise ConfigError(f"tp_mode must be 'max' or 'mean', got {mode!r}")


def horizontal_pool(x: torch.Tensor, parts: int) -> torch.Tensor:
    """(N, C, H, W) -> (N, C, P): per horizontal band, max + mean over (rows x W).

    When H is not a multiple of P the rows are right-padded; padding never
    wins the max and is left out of the mean.
    """
    n, c, h, w = x.shape
    if parts < 1 or parts > h:
        raise ConfigError(f"cannot split {h} rows into {parts} parts")
    band = math.ceil(h / parts)
    pad = band * parts - h
    if pad >= band:
        raise ConfigError(f"{parts} parts over {h} rows leaves an empty band")
    if pad:
        x_max = F.pad(x, (0, 0, 0, pad), value=float("-inf"))
        x_sum = F.pad(x, (0, 0, 0, pad), value=0.0)
        counts = torch.full((parts,), band * w, dtype=x.dtype, device=x.device)
        counts[-1] = (band - pad) * w
    else:
        x_max = x_sum = x
        counts = torch.full((parts,), band * w, dtype=x.dtype, device=x.device)
    mx = x_max.reshape(n, c, parts, band * w).amax(dim=-1)
    mean = x_sum.reshape(n, c, parts, band * w).sum(dim=-1) / counts
    return mx + mean


class SeparateFC(nn.Module):
    """One bias-free C -> E linear map per part: (N, C, P) -> (N, E, P)."""

    def __init__(self, parts: int, in_channels: int, out_channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(parts, in_channels, out_channels))
        nn.init.xavier_uniform_(self.weight)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.einsum("ncp,pce->nep", x, self.weight)


class BNNeck(nn.Module):
    """Per-part batch norm on f followed by a bias-free per-part classifier.

    Returns logits of shape (N, num_classes, P).
    """

    def __init__(self, parts: int, channels: int, num_classes: int):
        super().__init__()
        self.bn = nn.BatchNorm1d(channels * parts)
        self.classifier = nn.Parameter(torch.empty(parts, channels, num_classes))
        nn.init.normal_(self.classifier, std=0.001)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        n, e, p = f.shape
        flat = f.reshape(n, e * p)
        # one sample has no batch variance; fall back to stored statistics
        training = self.training and n > 1
        z = F.batch_norm(flat, self.bn.running_mean, self.bn.running_var, self.bn.weight,
                         self.bn.bias, training=training, momentum=self.bn.momentum,
                         eps=self.bn.eps)
        return torch.einsum("nep,pek->nkp", z.reshape(n, e, p), self.classifier)


def _pairwise_distance(f: torch.Tensor) -> torch.Tensor:
    """(N, E, P) -> (P, N, N) Euclidean distances per part."""
    x = f.permute(2, 0, 1)
    diff = x.unsqueeze(2) - x.unsqueeze(1)
    # clamp keeps sqrt differentiable at coincident embeddings
    return torch.sqrt(torch.clamp((diff * diff).sum(-1), min=1e-12))


def triplet_loss(f: torch.Tensor, labels: torch.Tensor, margin: float = 0.2) -> torch.Tensor:
    """Batch-all triplet loss, averaged over violating triplets then over parts."""
    if f.dim() == 2:
        f = f.unsqueeze(-1)
    labels = labels.reshape(-1)
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(len(labels), dtype=torch.bool, device=labels.device)
    pos = same & ~eye
    neg = ~same
    if not bool(neg.any()) or not bool(pos.any()):
        log.warning("batch has no valid triplets (single class or no positives)")
        return f.sum() * 0.0
    d = _pairwise_distance(f)
    # (P, anchor, positive, negative)
    terms = d.unsqueeze(3) - d.unsqueeze(2) + margin
    valid = (pos.unsqueeze(2) & neg.unsqueeze(1)).unsqueeze(0)
    losses = torch.where(valid, F.relu(terms), torch.zeros_like(terms))
    active = (losses > 0).sum(dim=(1, 2, 3))
    per_part = losses.sum(dim=(1, 2, 3)) / active.clamp(min=1)
    return per_part.mean()


def ce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Cross-entropy over (N, K, P) logits, averaged over batch and parts."""
    if logits.dim() == 2:
        logits = logits.unsqueeze(-1)
    k = logits.shape[1]
    if bool((labels < 0).any()) or bool((labels >= k).any()):
        raise ValueError(f"labels must lie in [0, {k})")
    target = labels.reshape(-1, 1).expand(-1, logits.shape[2])
    return F.cross_entropy(logits, target)


def combined_loss(f: torch.Tensor, logits: torch.Tensor, labels: torch.Tensor,
                  alpha: float = 1.0, beta: float = 1.0, margin: float = 0.2):
    """alpha * triplet + beta * cross-entropy; returns (total, l_tri, l_ce)."""
    if alpha < 0 or beta < 0 or alpha + beta <= 0:
        raise ConfigError("loss weights must be non-negative and not both zero")
    l_tri = triplet_loss(f, labels, margin)
    l_ce = ce_loss(logits, labels)
    return alpha * l_tri + beta * l_ce, l_tri, l_ce


class Head(nn.Module):
    def __init__(self, channels: int, parts: int, embed_dim: int, num_classes: int,
                 tp_mode: str = "max"):
        super().__init__()
        self.parts = parts
        self.tp_mode = tp_mode
        self.fc = SeparateFC(parts, channels, embed_dim)
        self.bnneck = BNNeck(parts, embed_dim, num_classes)

    def forward(self, y: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        pooled = horizontal_pool(temporal_pool(y, self.tp_mode), self.parts)
        f = self.fc(pooled)
        return f, self.bnneck(f)
