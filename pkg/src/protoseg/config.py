"""Flat "key = value" config files and run manifests.

Keys mirror the training-config field paths with dots (e.g.
``weights.lambda1 = 0.01``); '#' starts a comment. Manifests are the same
format plus ``manifest.*`` bookkeeping keys, so re-parsing a manifest
reproduces the run's configuration exactly.
"""

from __future__ import annotations

from dataclasses import replace

from .data import DatasetSpec
from .losses import LossWeights
from .network import NetConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Raised for unparseable config files or unknown keys/values."""


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


# key -> (section, field, parser); section "" is the top-level config
_KEYS = {
    "method": ("", "method", str),
    "epochs": ("", "epochs", int),
    "labeled_batch": ("", "labeled_batch", int),
    "unlabeled_batch": ("", "unlabeled_batch", int),
    "lr": ("", "lr", float),
    "momentum": ("", "momentum", float),
    "num_labeled": ("", "num_labeled", int),
    "seed": ("", "seed", int),
    "mi_on_labeled": ("", "mi_on_labeled", _parse_bool),
    "weights.lambda1": ("weights", "lambda1", float),
    "weights.lambda2": ("weights", "lambda2", float),
    "weights.ramp_fraction": ("weights", "ramp_fraction", float),
    "weights.baseline_weight": ("weights", "baseline_weight", float),
    "weights.pseudo_label_threshold": ("weights", "pseudo_label_threshold", float),
    "weights.ema_decay": ("weights", "ema_decay", float),
    "net.base_channels": ("net", "base_channels", int),
    "net.prototypes_per_class": ("net", "prototypes_per_class", int),
    "data.image_size": ("data", "image_size", int),
    "data.num_images": ("data", "num_images", int),
    "data.num_classes": ("data", "num_classes", int),
    "data.modes_per_class": ("data", "modes_per_class", int),
    "data.noise_sigma": ("data", "noise_sigma", float),
    "data.seed": ("data", "seed", int),
    "data.val_images": ("data", "val_images", int),
    "data.test_images": ("data", "test_images", int),
}


def default_config() -> TrainConfig:
    return TrainConfig(
        method="ours",
        data=DatasetSpec(num_images=200),
        net=NetConfig(num_classes=2),
        num_labeled=4,
    )


def parse_config_file(path) -> dict[str, str]:
    """Read "key = value" lines; errors name the line and key."""
    pairs: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            pairs[key] = value
    return pairs


def apply_pairs(config: TrainConfig, pairs: dict[str, str],
                origin: str = "config") -> TrainConfig:
    """Overlay parsed key/value pairs onto a config; unknown keys are errors."""
    sections = {"": {}, "weights": {}, "net": {}, "data": {}}
    for key, value in pairs.items():
        if key.startswith("manifest."):
            continue
        if key not in _KEYS:
            raise ConfigError(f"{origin}: unknown key {key!r}")
        section, fname, parse = _KEYS[key]
        try:
            sections[section][fname] = parse(value)
        except ValueError as exc:
            raise ConfigError(f"{origin}: key {key!r}: {exc}") from exc
    try:
        if sections["weights"]:
            config = replace(config, weights=replace(config.weights, **sections["weights"]))
        if sections["net"]:
            config = replace(config, net=replace(config.net, **sections["net"]))
        if sections["data"]:
            config = replace(config, data=replace(config.data, **sections["data"]))
        if sections[""]:
            config = replace(config, **sections[""])
    except ValueError as exc:
        raise ConfigError(f"{origin}: {exc}") from exc
    return config


def config_to_pairs(config: TrainConfig) -> dict[str, str]:
    """Full key/value dump; parsing it back reproduces the config exactly."""
    out: dict[str, str] = {}
    for key, (section, fname, parse) in _KEYS.items():
        obj = {"": config, "weights": config.weights, "net": config.net,
               "data": config.data}[section]
        value = getattr(obj, fname)
        if parse is _parse_bool:
            out[key] = "true" if value else "false"
        elif parse is float:
            out[key] = repr(float(value))
        else:
            out[key] = str(value)
    return out


def config_from_pairs(pairs: dict[str, str], origin: str = "config") -> TrainConfig:
    return apply_pairs(default_config(), pairs, origin=origin)


def write_manifest(path, config: TrainConfig, extras: dict[str, str]) -> None:
    """Config snapshot plus manifest.* bookkeeping (paths, duration, version)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# run manifest: config snapshot + artifact bookkeeping\n")
        for key, value in extras.items():
            fh.write(f"manifest.{key} = {value}\n")
        for key, value in config_to_pairs(config).items():
            fh.write(f"{key} = {value}\n")


def read_manifest(path) -> tuple[TrainConfig, dict[str, str]]:
    pairs = parse_config_file(path)
    extras = {k[len("manifest."):]: v for k, v in pairs.items()
              if k.startswith("manifest.")}
    return config_from_pairs(pairs, origin=str(path)), extras
