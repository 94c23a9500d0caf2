"""Differentiable building blocks and a finite-difference gradient checker.

Feature maps are 5-D tensors laid out as (N, C, T, H, W). All spatial
convolutions act per frame: the kernel extent on the time axis is 1 unless a
caller asks for a temporal kernel explicitly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError

ALLOWED_KERNELS = (1, 3, 5)


def conv_spatial(x: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor | None = None,
                 stride: int = 1) -> torch.Tensor:
    """Per-frame 2-D convolution of a (N, C, T, H, W) tensor.

    ``kernel`` is (out, in, k, k) or (out, in, kt, k, k). Odd kernels are
    zero-padded by (k - 1) // 2 so ``stride=1`` keeps H and W.
    """
    if x.dim() != 5:
        raise ConfigError(f"expected a 5-D tensor, got shape {tuple(x.shape)}")
    if kernel.dim() == 4:
        kernel = kernel.unsqueeze(2)
    if kernel.shape[1] != x.shape[1]:
        raise ConfigError(
            f"kernel expects {kernel.shape[1]} input channels, input has {x.shape[1]}")
    kt, kh, kw = kernel.shape[2:]
    if kh != kw or kh not in ALLOWED_KERNELS:
        raise ConfigError(f"unsupported spatial kernel {kh}x{kw}")
    if kt % 2 == 0:
        raise ConfigError(f"temporal kernel extent must be odd, got {kt}")
    padding = ((kt - 1) // 2, (kh - 1) // 2, (kw - 1) // 2)
    # channels-last is several times faster on CPU for the narrow layers used here
    x = x.contiguous(memory_format=torch.channels_last_3d)
    kernel = kernel.contiguous(memory_format=torch.channels_last_3d)
    out = F.conv3d(x, kernel, bias, stride=(1, stride, stride), padding=padding)
    return out.contiguous()


class SpatialConv(nn.Module):
    """Module wrapper around :func:`conv_spatial` with its own parameters."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 stride: int = 1, bias: bool = True, temporal_kernel: int = 1):
        super().__init__()
        if kernel_size not in ALLOWED_KERNELS:
            raise ConfigError(f"kernel size must be one of {ALLOWED_KERNELS}")
        if temporal_kernel not in (1, 3):
            raise ConfigError("temporal kernel must be 1 or 3")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.weight = nn.Parameter(
            torch.empty(out_channels, in_channels, temporal_kernel, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        if self.bias is not None:
            fan_in = in_channels * temporal_kernel * kernel_size * kernel_size
            bound = 1.0 / math.sqrt(fan_in)
            nn.init.uniform_(self.bias, -bound, bound)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return conv_spatial(x, self.weight, self.bias, self.stride)


def batch_norm(x: torch.Tensor, bn: nn.BatchNorm3d, mode: str = "train") -> torch.Tensor:
    """Apply ``bn`` in the requested mode without changing the module's flag."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    return F.batch_norm(x, bn.running_mean, bn.running_var, bn.weight, bn.bias,
                        training=(mode == "train"), momentum=bn.momentum, eps=bn.eps)


class Gamma(nn.Module):
    """ReLU and batch normalization composed in the configured order.

    ``order="paper"`` computes BN(ReLU(x)); ``"conventional"`` computes
    ReLU(BN(x)).
    """

    def __init__(self, channels: int, order: str = "paper"):
        super().__init__()
        if order not in ("paper", "conventional"):
            raise ConfigError(f"gamma_order must be 'paper' or 'conventional', got {order!r}")
        self.order = order
        self.bn = nn.BatchNorm3d(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.order == "paper":
            return self.bn(F.relu(x))
        return F.relu(self.bn(x))


def softmax_axis(x: torch.Tensor, axis: int) -> torch.Tensor:
    # max-subtraction keeps exp() finite for logits of any magnitude
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


class ParamStore:
    """Named view over every trainable parameter reachable from a module.

    Tied parameters appear once, under the first name torch reports.
    """

    def __init__(self, module: nn.Module):
        self._params = dict(module.named_parameters())

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self):
        return iter(self._params.items())

    def __getitem__(self, name: str) -> nn.Parameter:
        return self._params[name]

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def grads(self) -> dict[str, torch.Tensor | None]:
        return {k: p.grad for k, p in self._params.items()}


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4
    aborted: str | None = None

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.aborted is None and self.max_error < self.tolerance

    def __str__(self) -> str:
        if self.aborted:
            return f"grad_check aborted: {self.aborted}"
        worst = max(self.errors, key=self.errors.get) if self.errors else "-"
        return (f"grad_check {'PASS' if self.passed else 'FAIL'}: max rel err "
                f"{self.max_error:.3e} ({worst}) tol {self.tolerance:.0e}")


def _relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float) -> float:
    diff = (analytic - numeric).abs()
    denom = torch.maximum(analytic.abs(), numeric.abs()) + floor
    return float((diff / denom).max()) if diff.numel() else 0.0


def grad_check(fn: Callable[[], torch.Tensor], tensors: dict[str, torch.Tensor] | Sequence[torch.Tensor],
               epsilon: float = 1e-5, tolerance: float = 1e-4,
               abs_floor: float = 1e-6) -> GradCheckReport:
    """Compare autograd gradients of the scalar ``fn()`` against central differences.

    ``tensors`` are leaf tensors (inputs or parameters) that ``fn`` closes over;
    they are perturbed in place one element at a time. Elementwise relative
    error is ``|a - n| / (max(|a|, |n|) + abs_floor)``; the report keeps the
    maximum per tensor.
    """
    if not isinstance(tensors, dict):
        tensors = {f"input{i}": t for i, t in enumerate(tensors)}
    report = GradCheckReport(tolerance=tolerance)
    for t in tensors.values():
        if t.dtype != torch.float64:
            raise ConfigError("grad_check requires double precision tensors")
        t.grad = None
        t.requires_grad_(True)

    loss = fn()
    if not torch.isfinite(loss).all():
        report.aborted = "non-finite loss"
        return report
    analytic = torch.autograd.grad(loss, list(tensors.values()), allow_unused=True)

    with torch.no_grad():
        for (name, t), a in zip(tensors.items(), analytic):
            if a is None:
                a = torch.zeros_like(t)
            numeric = torch.zeros_like(t)
            flat = t.view(-1)
            nflat = numeric.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + epsilon
                plus = fn()
                flat[i] = orig - epsilon
                minus = fn()
                flat[i] = orig
                if not (torch.isfinite(plus) and torch.isfinite(minus)):
                    report.aborted = f"non-finite loss while perturbing {name}[{i}]"
                    return report
                nflat[i] = (plus - minus) / (2 * epsilon)
            report.errors[name] = _relative_error(a, numeric, abs_floor)
    return report


def module_tensors(module: nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    """Parameters of ``module`` keyed for :func:`grad_check`."""
    return {prefix + name: p for name, p in module.named_parameters()}


def finite(tensors: Iterable[torch.Tensor]) -> bool:
    return all(bool(torch.isfinite(t).all()) for t in tensors)
