"""Run configuration: flat ``section.key = value`` text, validated and frozen.

Resolution order, later wins: built-in defaults, the profile named by
``run.profile``, the config file, ``GAIT_<SECTION>_<KEY>`` environment
variables, explicit overrides.
"""
from __future__ import annotations

import os
from pathlib import Path
from types import MappingProxyType
from typing import Any, Callable, Mapping

from .errors import ConfigError


def _bool(s: str) -> bool:
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s) -> tuple[int, ...]:
    if isinstance(s, (tuple, list)):
        return tuple(int(v) for v in s)
    s = str(s).strip()
    return tuple(int(v) for v in s.split(",") if v.strip()) if s else ()


def _strs(s) -> tuple[str, ...]:
    if isinstance(s, (tuple, list)):
        return tuple(str(v) for v in s)
    return tuple(v.strip() for v in str(s).split(",") if v.strip())


def _stages(s) -> str:
    v = str(s).strip().lower()
    if v in ("default", "all"):
        return v
    if isinstance(s, (tuple, list)):
        return ",".join(str(int(x)) for x in s)
    return ",".join(str(i) for i in _ints(v))


def _choice(*options: str) -> Callable[[Any], str]:
    def parse(s) -> str:
        v = str(s).strip()
        if v not in options:
            raise ValueError(f"{v!r} not in {options}")
        return v
    return parse


SCHEMA: dict[str, tuple[Callable[[Any], Any], Any]] = {
    "run.profile": (_choice("desk", "paper-ccpg"), "desk"),
    "run.seed": (int, 0),
    "run.out_dir": (str, "runs/default"),
    "run.threads": (int, 1),
    "model.channels": (_ints, (4, 8, 16, 32)),
    "model.strides": (_ints, (1, 2, 2, 1)),
    "model.blocks": (_ints, (1, 1, 1, 1)),
    "model.temporal_kernel": (_ints, (1, 1, 1, 1)),
    "model.gamma_order": (_choice("paper", "conventional"), "paper"),
    "model.conv_bias": (_bool, True),
    "model.modality": (_choice("both", "silhouette", "depth"), "both"),
    "model.tie_branches": (_bool, False),
    "fusion.kind": (_choice("mcf", "plus", "cat", "attention"), "mcf"),
    "fusion.stages": (_stages, "default"),
    "fusion.reduction": (int, 4),
    "fusion.fsd_rule": (_choice("mean", "sum", "zero"), "mean"),
    "fusion.weight_granularity": (_choice("per_channel", "per_pixel"), "per_channel"),
    "head.parts": (int, 16),
    "head.embed_dim": (int, 64),
    "head.tp_mode": (_choice("max", "mean"), "max"),
    "head.margin": (float, 0.2),
    "head.alpha": (float, 1.0),
    "head.beta": (float, 1.0),
    "data.root": (str, ""),
    "data.p": (int, 4),
    "data.k": (int, 4),
    "data.clip_len": (int, 10),
    "data.short_clip_policy": (_choice("wrap", "discard"), "wrap"),
    "preprocess.final_width": (int, 44),
    "preprocess.normalization_scope": (_choice("frame", "sequence"), "frame"),
    "train.lr": (float, 0.1),
    "train.momentum": (float, 0.9),
    "train.weight_decay": (float, 0.0005),
    "train.milestones": (_ints, (800, 1400)),
    "train.total_steps": (int, 2000),
    "train.checkpoint_every": (int, 500),
    "eval.protocol": (str, ""),
    "ablate.methods": (_strs, ("plus", "cat", "attention", "mcf")),
    "ablate.channels": (_ints, (32, 64)),
    "ablate.stages": (_strs, ("2", "3", "4", "all")),
    "ablate.seeds": (_ints, (0,)),
}

PROFILES: dict[str, dict[str, Any]] = {
    "desk": {},
    "paper-ccpg": {
        "model.channels": (64, 128, 256, 512),
        "head.embed_dim": 256,
        "data.p": 8,
        "data.k": 16,
        "data.clip_len": 30,
        "train.milestones": (20000, 30000, 40000),
        "train.total_steps": 60000,
        "train.checkpoint_every": 10000,
    },
}


def _format(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


class RunConfig(Mapping):
    """Immutable, validated mapping of every known key."""

    def __init__(self, values: Mapping[str, Any]):
        self._values = MappingProxyType(dict(values))

    def __getitem__(self, key: str) -> Any:
        return self._values[key]

    def __iter__(self):
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def with_values(self, updates: Mapping[str, Any]) -> "RunConfig":
        raw = {k: _format(v) for k, v in self._values.items()}
        raw.update({k: _format(v) for k, v in updates.items()})
        return resolve(raw, apply_profile=False)

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(self._values[k])}\n" for k in sorted(self._values))

    def section(self, name: str) -> dict[str, Any]:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self._values.items() if k.startswith(prefix)}


def parse_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``[section]`` headers prefix following keys."""
    out: dict[str, str] = {}
    section = ""
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        key = key.lower()
        if section and "." not in key:
            key = f"{section}.{key}"
        out[key] = value
    return out


def _env_overrides(env: Mapping[str, str]) -> dict[str, str]:
    out = {}
    for key in SCHEMA:
        name = "GAIT_" + key.replace(".", "_").upper()
        if name in env:
            out[key] = env[name]
    return out


def resolve(raw: Mapping[str, Any], apply_profile: bool = True) -> RunConfig:
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    values = {k: default for k, (_, default) in SCHEMA.items()}
    if apply_profile:
        profile = raw.get("run.profile", values["run.profile"])
        try:
            values.update(PROFILES[str(profile).strip()])
        except KeyError:
            raise ConfigError(f"unknown profile {profile!r}") from None
    values.update(raw)
    parsed = {}
    for key, (conv, _) in SCHEMA.items():
        try:
            parsed[key] = conv(values[key])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: {exc}") from None
    _validate(parsed)
    return RunConfig(parsed)


def _validate(c: dict[str, Any]) -> None:
    n = len(c["model.channels"])
    if n < 1:
        raise ConfigError("model.channels must list at least one stage")
    for key in ("model.strides", "model.blocks", "model.temporal_kernel"):
        if len(c[key]) != n:
            raise ConfigError(f"{key} must have {n} entries (one per stage)")
    if c["data.p"] < 2 or c["data.k"] < 2:
        raise ConfigError("data.p and data.k must be >= 2 for triplet mining")
    if c["data.clip_len"] < 1:
        raise ConfigError("data.clip_len must be >= 1")
    if c["head.alpha"] < 0 or c["head.beta"] < 0 or c["head.alpha"] + c["head.beta"] <= 0:
        raise ConfigError("head.alpha/head.beta must be non-negative with a positive sum")
    if c["head.margin"] < 0:
        raise ConfigError("head.margin must be non-negative")
    if list(c["train.milestones"]) != sorted(c["train.milestones"]):
        raise ConfigError("train.milestones must be increasing")
    if c["train.total_steps"] < 0:
        raise ConfigError("train.total_steps must be >= 0")
    if c["fusion.stages"] not in ("default", "all"):
        stages = _ints(c["fusion.stages"])
        if not stages or min(stages) < 1 or max(stages) > n:
            raise ConfigError(f"fusion.stages must lie within 1..{n}")


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None,
                env: Mapping[str, str] | None = None) -> RunConfig:
    raw: dict[str, Any] = {}
    if path is not None:
        raw.update(parse_text(Path(path).read_text()))
    raw.update(_env_overrides(os.environ if env is None else env))
    if overrides:
        raw.update({k: _format(v) for k, v in overrides.items()})
    return resolve(raw)


def loads(text: str) -> RunConfig:
    """Parse a frozen config dump back without applying env overrides."""
    return resolve(parse_text(text), apply_profile=False)
