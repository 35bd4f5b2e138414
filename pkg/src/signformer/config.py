"""Flat ``key=value`` run configuration and the shipped lineup presets.

A run config covers every :class:`ModelConfig` and :class:`TrainConfig`
field. Files are UTF-8, one ``key=value`` per line, ``#`` starts a comment.
Unknown keys are rejected by name.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from typing import Dict, Iterable, List, Optional, Tuple

from .checkpoint import field_types, parse_value
from .model import ModelConfig
from .training import TrainConfig

PRESETS = ("feather", "feather-cope", "mid", "mid-cope", "full", "full-cope")
LINEUP_LABELS = ("Feather", "Feather+CoPE", "Mid", "Mid+CoPE", "Full", "Full+CoPE")
# Reported parameter totals (millions) of the six lineup models.
LINEUP_TARGETS_M = (0.57, 1.22, 1.41, 2.70, 3.88, 6.44)

MODEL_KEYS = field_types(ModelConfig)
TRAIN_KEYS = field_types(TrainConfig)


class RunConfigError(ValueError):
    """Bad run configuration; the message names the key (and line if known)."""


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_text(self) -> str:
        """Fully resolved config; feeding it back reproduces this object."""
        lines = ["# model"]
        lines += [f"{k}={_fmt(v)}" for k, v in self.model.to_dict().items()]
        lines.append("# training and decoding")
        lines += [f"{k}={_fmt(v)}" for k, v in self.train.to_dict().items()]
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def parse_pairs(text: str, source: str = "<config>") -> List[Tuple[str, str, int]]:
    """``(key, raw value, line number)`` for every assignment in ``text``."""
    out = []
    for num, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise RunConfigError(f"{source}:{num}: expected key=value, got {raw.strip()!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        out.append((key, val, num))
    return out


def build(pairs: Iterable[Tuple[str, str, Optional[int]]], source: str = "<config>") -> RunConfig:
    """Apply assignments in order (later ones win) on top of the defaults."""
    model_vals: Dict[str, object] = {}
    train_vals: Dict[str, object] = {}
    for key, val, num in pairs:
        where = f"{source}:{num}: " if num else ""
        if key in MODEL_KEYS:
            target, typ = model_vals, MODEL_KEYS[key]
        elif key in TRAIN_KEYS:
            target, typ = train_vals, TRAIN_KEYS[key]
        else:
            raise RunConfigError(f"{where}unknown config key {key!r}")
        try:
            target[key] = parse_value(val, typ, key)
        except ValueError as exc:
            raise RunConfigError(f"{where}{exc}") from None
    try:
        model = ModelConfig(**model_vals)
        train = TrainConfig(**train_vals)
        train.validate()
    except ValueError as exc:
        raise RunConfigError(str(exc)) from None
    return RunConfig(model, train)


def parse_overrides(items: Iterable[str]) -> List[Tuple[str, str, None]]:
    out = []
    for item in items:
        if "=" not in item:
            raise RunConfigError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        out.append((key.strip(), val.strip(), None))
    return out


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise RunConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return resources.files("signformer.presets").joinpath(f"{name}.cfg").read_text(encoding="utf-8")


def load(path=None, preset: Optional[str] = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Preset, then file, then ``key=value`` overrides."""
    pairs: List[Tuple[str, str, Optional[int]]] = []
    sources = []
    if preset is not None:
        pairs += parse_pairs(preset_text(preset), f"preset {preset}")
        sources.append(f"preset {preset}")
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            pairs += parse_pairs(fh.read(), str(path))
        sources.append(str(path))
    pairs += parse_overrides(overrides)
    return build(pairs, " + ".join(sources) or "<defaults>")


def load_preset(name: str) -> RunConfig:
    return load(preset=name)

