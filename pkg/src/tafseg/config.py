"""Flat ``key = value`` experiment configs.

Values are parsed per key; unknown keys are errors so a typo never silently
falls back to a default. ``taf.rates`` takes a comma list with ``inf``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import replace

from .data import AugmentOptions
from .engine import TrainConfig
from .taf import ChangeRateSchedule, TAFConfig

__all__ = ["ConfigError", "parse_config", "load_config", "build_train_config", "format_config", "KEYS"]


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _rates(text: str) -> tuple[float, ...]:
    return ChangeRateSchedule.parse(text).rates


KEYS = {
    "arch": str,
    "width": int,
    "num_classes": int,
    "init_lr": float,
    "momentum": float,
    "weight_decay": float,
    "power": float,
    "max_epoch": int,
    "batch_size": int,
    "seed": int,
    "mode": str,
    "protocol": str,
    "taf.lambda": float,
    "taf.n_h": int,
    "taf.delta0": float,
    "taf.rates": _rates,
    "taf.exclude_zero_offset": _bool,
    "aug.flip": _bool,
    "aug.scale_min": float,
    "aug.scale_max": float,
    "aug.crop": int,
}

DEFAULT_RATES = {"MicroFCN": (1e-4, math.inf, math.inf), "MicroASPP": (1e-6, 1e-6, 1e-4, 1e-3, 1e-2)}


def parse_config(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            out[key] = KEYS[key](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return out


def load_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), str(path))


def build_train_config(values: dict) -> TrainConfig:
    """Turn parsed values into a :class:`TrainConfig`.

    In baseline mode any ``taf.*`` keys are dropped with a warning.
    """
    values = dict(values)
    mode = values.get("mode", "taf")
    taf_keys = sorted(k for k in values if k.startswith("taf."))
    if mode == "baseline" and taf_keys:
        warnings.warn(f"baseline mode ignores {', '.join(taf_keys)}", stacklevel=2)
        for k in taf_keys:
            del values[k]
    arch = values.get("arch", "MicroFCN")
    if arch not in DEFAULT_RATES:
        raise ConfigError(f"unknown arch {arch!r}")
    try:
        taf = TAFConfig(
            lam=values.get("taf.lambda", 0.0 if mode == "baseline" else 1.0),
            n_h=values.get("taf.n_h", 15),
            delta0=values.get("taf.delta0", 1.0),
            schedule=ChangeRateSchedule(values.get("taf.rates", DEFAULT_RATES[arch])),
            exclude_zero_offset=values.get("taf.exclude_zero_offset", True),
        )
        aug = AugmentOptions(
            flip=values.get("aug.flip", True),
            scale_range=(values.get("aug.scale_min", 1.0), values.get("aug.scale_max", 1.0)),
            crop=values.get("aug.crop"),
        )
        plain = {k: values[k] for k in KEYS if "." not in k and k in values}
        return TrainConfig(**plain, taf=taf, aug=aug)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def format_config(cfg: TrainConfig) -> str:
    """Inverse of :func:`build_train_config`; every key is written out."""
    lines = [
        f"arch = {cfg.arch}",
        f"width = {cfg.width}",
        f"num_classes = {cfg.num_classes}",
        f"init_lr = {cfg.init_lr!r}",
        f"momentum = {cfg.momentum!r}",
        f"weight_decay = {cfg.weight_decay!r}",
        f"power = {cfg.power!r}",
        f"max_epoch = {cfg.max_epoch}",
        f"batch_size = {cfg.batch_size}",
        f"seed = {cfg.seed}",
        f"mode = {cfg.mode}",
        f"taf.lambda = {cfg.taf.lam!r}",
        f"taf.n_h = {cfg.taf.n_h}",
        f"taf.delta0 = {cfg.taf.delta0!r}",
        f"taf.rates = {cfg.taf.schedule.format()}",
        f"taf.exclude_zero_offset = {str(cfg.taf.exclude_zero_offset).lower()}",
        f"aug.flip = {str(cfg.aug.flip).lower()}",
        f"aug.scale_min = {cfg.aug.scale_range[0]!r}",
        f"aug.scale_max = {cfg.aug.scale_range[1]!r}",
    ]
    if cfg.protocol != "matched_epochs":
        lines.append(f"protocol = {cfg.protocol}")
    if cfg.aug.crop is not None:
        lines.append(f"aug.crop = {cfg.aug.crop}")
    return "\n".join(lines) + "\n"


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    """Copy of ``cfg`` with top-level or ``taf_*`` fields replaced."""
    taf_kw = {k[4:]: v for k, v in kw.items() if k.startswith("taf_")}
    top = {k: v for k, v in kw.items() if not k.startswith("taf_")}
    if "schedule" in taf_kw and not isinstance(taf_kw["schedule"], ChangeRateSchedule):
        taf_kw["schedule"] = ChangeRateSchedule(taf_kw["schedule"])
    taf = replace(cfg.taf, **taf_kw) if taf_kw else cfg.taf
    return replace(cfg, taf=taf, **top)
