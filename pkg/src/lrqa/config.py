"""JSON run configuration.

Precedence is command-line flag, then config file, then built-in default.
Relative data paths inside a config file resolve against the file's
directory; a relative ``out`` resolves against the working directory, so a
bundled config never writes next to itself.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .model import ConfigError, EncoderConfig
from .trainer import TrainConfig

ENV_VAR = "LRQA_CONFIG"

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "out": "runs",
    "model": {},
    "tokenizer": {"lowercase": True},
    "train": {},
    "data": {},
    "align": {"threshold": 0.5, "max_char_n": 6, "max_word_n": 2, "beta": 2.0, "len_band": [0.5, 2.0]},
    "hpo": {
        "population_size": 8,
        "generations": 10,
        "steps_per_generation": 1,
        "quantile": 0.25,
        "perturb_factors": [0.8, 1.25],
        "resample_prob": 0.25,
        "include_default": True,
        "space": None,
    },
    "cost": {"power": {"avg_watts": 250.0, "sampler_cmd": None, "interval_s": 1.0},
             "carbon": {"intensity_g_per_kwh": 294.32}},
}

_PATH_KEYS = ("train", "dev", "augment", "corpus", "source", "translations", "predictions", "dataset",
              "checkpoint", "tokenizer")


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class RunConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    base_dir: Path = Path(".")

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def out(self) -> Path:
        return Path(self.raw["out"]).resolve()

    def _resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def model_config(self) -> EncoderConfig:
        try:
            return EncoderConfig.from_dict(self.raw["model"]).validate()
        except TypeError as exc:
            raise ConfigError(f"model: {exc}") from exc

    def train_config(self) -> TrainConfig:
        d = dict(self.raw["train"])
        d.setdefault("seed", self.seed)
        try:
            return TrainConfig.from_dict(d).validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train: {exc}") from exc

    def path(self, key: str, required: bool = True) -> Path | None:
        value = self.raw["data"].get(key)
        if value is None:
            if required:
                raise ConfigError(f"data.{key} is not set")
            return None
        p = self._resolve(value)
        if required and not p.exists():
            raise ConfigError(f"data.{key}: path {p} does not exist")
        return p

    def section(self, name: str) -> dict:
        return self.raw[name]

    def override(self, dotted: str, value) -> None:
        if value is None:
            return
        node = self.raw
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value


def load_config(path: str | os.PathLike | None = None) -> RunConfig:
    """Load ``path``, falling back to ``$LRQA_CONFIG``, then to pure defaults."""
    if path is None:
        path = os.environ.get(ENV_VAR)
    if path is None:
        return RunConfig(base_dir=Path.cwd())
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    try:
        user = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = set(user) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    unknown_data = set(user.get("data", {})) - set(_PATH_KEYS)
    if unknown_data:
        raise ConfigError(f"unknown data fields: {sorted(unknown_data)}")
    return RunConfig(_merge(DEFAULTS, user), p.resolve().parent)
