"""Run configuration: defaults < ``key = value`` file < command-line overrides."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

from .data import TRANSFORMS, AugmentConfig, SSRLimits
from .errors import ConfigError
from .imaging import BaselineParams
from .train import TrainConfig
from .unet import UNetConfig


@dataclass
class RunConfig:
    model: UNetConfig = field(default_factory=UNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    baseline: BaselineParams = field(default_factory=BaselineParams)
    data: dict = field(default_factory=lambda: {"size": 256, "ratios": (0.8, 0.1, 0.1)})
    predict: dict = field(default_factory=lambda: {"threshold": 0.5, "post_blur": False, "blur_sigma": 1.0})
    seed: int = 0


def defaults() -> dict[str, object]:
    """Flat dotted-key view of every configurable value."""
    flat: dict[str, object] = {"seed": 0, "device": "cpu"}
    for section, obj in (("model", UNetConfig()), ("train", TrainConfig()), ("baseline", BaselineParams())):
        for f in dataclasses.fields(obj):
            if f.name == "seed":
                continue
            flat[f"{section}.{f.name}"] = getattr(obj, f.name)
    aug = AugmentConfig()
    flat.update({
        "augment.enabled": aug.enabled,
        "augment.multiplier": aug.multiplier,
        "augment.image_interpolation": aug.image_interpolation,
        "augment.shift_limit": aug.ssr_limits.shift,
        "augment.scale_limit": aug.ssr_limits.scale,
        "augment.rotate_limit": aug.ssr_limits.angle,
        "augment.brightness_limit": aug.brightness_limit,
        "augment.contrast_limit": aug.contrast_limit,
        "augment.clahe_clip": aug.clahe_clip,
        "augment.clahe_tiles": aug.clahe_tiles,
    })
    for t in TRANSFORMS:
        flat[f"augment.p_{t}"] = 0.5
    flat.update({"data.size": 256, "data.ratios": (0.8, 0.1, 0.1)})
    flat.update({"predict.threshold": 0.5, "predict.post_blur": False, "predict.blur_sigma": 1.0})
    return flat


def _coerce(key: str, raw: str, like):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            if like and isinstance(like[0], str):
                return tuple(p.strip() for p in raw.split(",") if p.strip())
            conv = int if all(isinstance(v, int) for v in like) else float
            return tuple(conv(p) for p in raw.replace("x", ",").split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"config key '{key}': cannot parse {raw!r} as {type(like).__name__}") from None
    return raw


def parse_assignments(lines, source: str, base: dict[str, object]) -> dict[str, object]:
    out = dict(base)
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in out:
            raise ConfigError(f"{source}:{lineno}: unknown config key '{key}'")
        out[key] = _coerce(key, value, out[key])
    return out


def resolve(config_path: str | os.PathLike | None = None, overrides: dict[str, str] | None = None) -> dict[str, object]:
    flat = defaults()
    if config_path is not None:
        try:
            with open(config_path) as fh:
                flat = parse_assignments(fh, str(config_path), flat)
        except OSError as exc:
            raise ConfigError(f"cannot read config file '{config_path}': {exc}") from exc
    if overrides:
        flat = parse_assignments([f"{k} = {v}" for k, v in overrides.items()], "command line", flat)
    if flat["device"] != "cpu":
        raise ConfigError(f"device must be 'cpu', got {flat['device']!r}")
    return flat


def build_run_config(flat: dict[str, object]) -> RunConfig:
    def section(prefix: str) -> dict:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in flat.items() if k.startswith(prefix + ".")}

    seed = int(flat["seed"])
    model = UNetConfig(**section("model"))
    model.validate()
    train = TrainConfig(**{**section("train"), "seed": seed})
    train.validate()
    a = section("augment")
    augment = AugmentConfig(
        enabled=tuple(a["enabled"]),
        probabilities={t: float(a[f"p_{t}"]) for t in TRANSFORMS},
        ssr_limits=SSRLimits(a["shift_limit"], a["scale_limit"], a["rotate_limit"]),
        brightness_limit=a["brightness_limit"],
        contrast_limit=a["contrast_limit"],
        clahe_clip=a["clahe_clip"],
        clahe_tiles=tuple(a["clahe_tiles"]),
        image_interpolation=a["image_interpolation"],
        multiplier=a["multiplier"],
        seed=seed,
    )
    augment.validate()
    b = section("baseline")
    baseline = BaselineParams(**{**b, "clahe_tiles": tuple(b["clahe_tiles"])})
    return RunConfig(model, train, augment, baseline, section("data"), section("predict"), seed)


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def write_snapshot(flat: dict[str, object], path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        for k in sorted(flat):
            fh.write(f"{k} = {_fmt(flat[k])}\n")
