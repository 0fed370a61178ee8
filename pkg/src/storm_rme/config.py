"""Run configuration: INI-style key-value files with a strict schema.

Unknown sections or keys are hard errors; every run logs the canonical
configuration and its hash so outputs are traceable to their inputs.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    pass


def _parse_bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _parse_int_list(v: str) -> list[int]:
    return [int(x) for x in v.split(",") if x.strip()]


def _parse_str_list(v: str) -> list[str]:
    return [x.strip() for x in v.split(",") if x.strip()]


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {
        "seed": (int, 0),
    },
    "map": {
        "train_sets": (int, 20),
        "test_sets": (int, 5),
        "extent_x": (float, 700.0),
        "extent_y": (float, 700.0),
        "grid_spacing": (float, 4.0),
        "shadow_resolution": (float, 4.0),
        "p0_db": (float, -30.0),
        "d0_m": (float, 1.0),
        "gamma": (float, 3.0),
        "shadow_std_db": (float, 6.0),
        "shadow_corr_m": (float, 50.0),
        "noise_std_db": (float, 1.0),
    },
    "model": {
        "dim": (int, 48),
        "heads": (int, 2),
        "blocks": (int, 4),
        "mlp_mult": (int, 2),
        "activation": (str, "gelu"),
        "mask": (str, "causal"),
        "polar": (_parse_bool, True),
        "length_scale": (float, 32.0),
        "dropout": (float, 0.0),
    },
    "train": {
        "mode": (str, "storm"),          # or "active"
        "steps": (int, 6000),
        "batch_size": (int, 16),
        "learning_rate": (float, 1e-3),
        "grad_clip": (float, 1.0),
        "loss": (str, "causal"),
        "n_min": (int, 20),
        "n_max": (int, 100),
        "patch_side": (float, 64.0),
        "candidates": (int, 10),         # Q for active training
    },
    "eval": {
        "estimators": (_parse_str_list, ["storm", "knn", "krr", "kriging"]),
        "n_values": (_parse_int_list, [20, 50, 100]),
        "iterations": (int, 100),
        "patch_side": (float, 64.0),
        "tuning_scenes": (int, 30),
    },
    "active": {
        "n_values": (_parse_int_list, [10, 20, 40]),
        "scenes": (int, 500),
        "patch_side": (float, 64.0),
        "max_candidates": (int, 0),      # 0 = all remaining points
    },
    "paths": {
        "data_dir": (str, "data"),
        "checkpoint": (str, "storm.ckpt"),
        "report_dir": (str, "reports"),
    },
}

KNOWN_ESTIMATORS = ("storm", "knn", "krr", "kriging")


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]]
    seed: int
    base_dir: Path

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.values[section]

    def path(self, key: str) -> Path:
        return self.base_dir / str(self.values["paths"][key])

    def canonical(self) -> str:
        lines = [f"seed={self.seed}"]
        for section in sorted(self.values):
            for key in sorted(self.values[section]):
                lines.append(f"{section}.{key}={self.values[section][key]}")
        return "\n".join(lines)

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


def load_config(
    path: str | Path | None = None,
    overrides: list[str] | None = None,
    seed: int | None = None,
    base_dir: str | Path = ".",
) -> RunConfig:
    """Load defaults, then the file, then --set overrides, then --seed."""
    values = {
        section: {key: default for key, (_, default) in keys.items()}
        for section, keys in SCHEMA.items()
    }
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                _apply(values, section, key, raw)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set needs KEY=VALUE, got {item!r}")
        dotted, raw = item.split("=", 1)
        if "." not in dotted:
            raise ConfigError(f"--set key must be section.key, got {dotted!r}")
        section, key = dotted.split(".", 1)
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        _apply(values, section, key, raw)
    cfg_seed = int(values["run"]["seed"]) if seed is None else int(seed)
    for name in values["eval"]["estimators"]:
        if name not in KNOWN_ESTIMATORS:
            raise ConfigError(
                f"unknown estimator {name!r} in eval.estimators "
                f"(known: {', '.join(KNOWN_ESTIMATORS)})"
            )
    return RunConfig(values, cfg_seed, Path(base_dir))


def _apply(values, section: str, key: str, raw: str) -> None:
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown config key {section}.{key}")
    parse = SCHEMA[section][key][0]
    try:
        values[section][key] = parse(raw)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({e})") from None
