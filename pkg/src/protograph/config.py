"""Run configuration: INI-style files, presets, and strict validation.

A config file is flat ``key = value`` text grouped into sections; every
key must belong to the schema below, and values are type-checked before
any compute starts.  Precedence: preset defaults < file < explicit
overrides (CLI flags / request fields).
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass

__all__ = ["ConfigError", "RunConfig", "load_config", "PRESET_NAMES", "CONFIG_SCHEMA"]

PRESET_NAMES = ("paper", "tiny")


class ConfigError(Exception):
    """Raised for unknown keys, bad types, or invalid values."""


@dataclass(frozen=True)
class RunConfig:
    # run
    preset: str = "tiny"
    seed: int = 42
    out_dir: str = "runs/out"
    # data
    images_dir: str = ""
    embeddings_csv: str = ""
    synthetic: str = ""            # "CxI", e.g. "20x30"
    synthetic_noise: float = 0.06
    synthetic_shift: int = 2
    split_train: float = 0.70
    split_val: float = 0.15
    split_test: float = 0.15
    # episode
    ways: int = 5
    graphs_per_class: int = 2
    images_per_graph: int = 3
    query_graphs: int = 1
    # model
    align_strength: float = 1.0
    projection_head: bool = True
    lambda_loss: float = 0.4
    registry_momentum: float = 0.9
    # train
    epochs: int = 15
    episodes_per_epoch: int = 50
    lr: float = 0.001
    val_episodes: int = 20
    augment: bool = False
    # eval
    eval_episodes: int = 50
    pairs_per_kind: int = 100
    backfill_sigma: float = 0.01

    def validate(self) -> None:
        if self.preset not in PRESET_NAMES:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {PRESET_NAMES}")
        if not 0.0 <= self.lambda_loss <= 1.0:
            raise ConfigError(f"lambda_loss must be in [0, 1], got {self.lambda_loss}")
        if not 0.0 <= self.registry_momentum < 1.0:
            raise ConfigError(
                f"registry_momentum must be in [0, 1), got {self.registry_momentum}")
        if self.align_strength < 0:
            raise ConfigError(f"align_strength must be >= 0, got {self.align_strength}")
        if self.ways < 2:
            raise ConfigError(f"ways must be >= 2, got {self.ways}")
        for name in ("graphs_per_class", "images_per_graph", "query_graphs", "epochs",
                     "episodes_per_epoch", "eval_episodes", "pairs_per_kind"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        fr = (self.split_train, self.split_val, self.split_test)
        if any(f <= 0 for f in fr) or sum(fr) > 1.0 + 1e-9:
            raise ConfigError(f"split fractions must be positive and sum <= 1, got {fr}")
        if self.synthetic:
            self.synthetic_shape()
        sources = [bool(self.images_dir), bool(self.embeddings_csv), bool(self.synthetic)]
        if sum(sources) > 1:
            raise ConfigError(
                "images_dir, embeddings_csv and synthetic are mutually exclusive")

    def synthetic_shape(self) -> tuple[int, int]:
        parts = self.synthetic.lower().split("x")
        try:
            c, i = (int(p) for p in parts)
        except ValueError:
            raise ConfigError(
                f"synthetic must look like CxI (e.g. 20x30), got {self.synthetic!r}")
        if c < 3 or i < 2:
            raise ConfigError(f"synthetic needs >= 3 classes and >= 2 impressions, got {self.synthetic!r}")
        return c, i


# section -> key -> (field name, type)
CONFIG_SCHEMA: dict[str, dict[str, tuple[str, type]]] = {
    "run": {
        "preset": ("preset", str),
        "seed": ("seed", int),
        "out_dir": ("out_dir", str),
    },
    "data": {
        "images_dir": ("images_dir", str),
        "embeddings_csv": ("embeddings_csv", str),
        "synthetic": ("synthetic", str),
        "synthetic_noise": ("synthetic_noise", float),
        "synthetic_shift": ("synthetic_shift", int),
        "split_train": ("split_train", float),
        "split_val": ("split_val", float),
        "split_test": ("split_test", float),
    },
    "episode": {
        "ways": ("ways", int),
        "graphs_per_class": ("graphs_per_class", int),
        "images_per_graph": ("images_per_graph", int),
        "query_graphs": ("query_graphs", int),
    },
    "model": {
        "align_strength": ("align_strength", float),
        "projection_head": ("projection_head", bool),
        "lambda_loss": ("lambda_loss", float),
        "registry_momentum": ("registry_momentum", float),
    },
    "train": {
        "epochs": ("epochs", int),
        "episodes_per_epoch": ("episodes_per_epoch", int),
        "lr": ("lr", float),
        "val_episodes": ("val_episodes", int),
        "augment": ("augment", bool),
    },
    "eval": {
        "episodes": ("eval_episodes", int),
        "pairs_per_kind": ("pairs_per_kind", int),
        "backfill_sigma": ("backfill_sigma", float),
    },
}

_PRESET_DEFAULTS: dict[str, dict[str, object]] = {
    "tiny": {},
    "paper": {
        "graphs_per_class": 4,
        "images_per_graph": 5,
        "epochs": 1000,
        "episodes_per_epoch": 200,
        "eval_episodes": 100,
        "val_episodes": 100,
    },
}


def _parse_value(raw: str, typ: type, where: str):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {typ.__name__}")


def load_config(path: str | None = None, preset: str | None = None,
                overrides: dict[str, object] | None = None) -> RunConfig:
    """Assemble a validated RunConfig from preset + optional file + overrides."""
    values: dict[str, object] = {}
    file_preset = None
    file_values: dict[str, object] = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        read = parser.read(path, encoding="utf-8")
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            if section not in CONFIG_SCHEMA:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in CONFIG_SCHEMA[section]:
                    raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
                fieldname, typ = CONFIG_SCHEMA[section][key]
                file_values[fieldname] = _parse_value(raw, typ, f"{path} [{section}] {key}")
        file_preset = file_values.get("preset")

    chosen_preset = preset or file_preset or "tiny"
    if chosen_preset not in PRESET_NAMES:
        raise ConfigError(f"unknown preset {chosen_preset!r}; choose from {PRESET_NAMES}")
    values["preset"] = chosen_preset
    values.update(_PRESET_DEFAULTS[chosen_preset])
    values.update(file_values)
    if preset is not None:
        values["preset"] = preset
    if overrides:
        fields = {f.name: f.type for f in dataclasses.fields(RunConfig)}
        for key, val in overrides.items():
            if key not in fields:
                raise ConfigError(f"unknown config field {key!r}")
            if val is not None:
                values[key] = val
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def config_to_dict(cfg: RunConfig) -> dict[str, object]:
    return dataclasses.asdict(cfg)
