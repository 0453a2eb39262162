"""Run configuration files and layering.

A config file is an INI-style key/value document with up to three
sections mirroring the dataclasses::

    [model]
    block_channels = [8, 16, 32, 64, 64]

    [ablation]
    use_bpm = false

    [train]
    lr = 0.01

Values are JSON literals; anything that fails to parse as JSON is kept as
a string.  Precedence is preset defaults < config file < explicit flags.
"""
from __future__ import annotations

import configparser
import json
from dataclasses import fields, replace
from pathlib import Path
from typing import Any, Mapping

from .model import ABLATIONS, Ablation, ConfigError, OLBPConfig
from .trainer import TrainConfig

SECTIONS = ("model", "ablation", "train")


def parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw.strip()


def read_config_file(path) -> dict[str, dict[str, Any]]:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    if not cp.read(path):
        raise FileNotFoundError(f"config file {path} not found")
    unknown = set(cp.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"{path}: unknown section(s) {sorted(unknown)}")
    return {s: {k: parse_value(v) for k, v in cp[s].items()} for s in cp.sections()}


def _apply(obj, values: Mapping[str, Any], what: str, skip=()):
    names = {f.name for f in fields(obj)} - set(skip)
    bad = set(values) - names
    if bad:
        raise ConfigError(f"unknown {what} key(s): {sorted(bad)}")
    conv = {}
    for k, v in values.items():
        if k == "input_size" or k == "olm_2conv":
            v = tuple(v) if k == "input_size" else [tuple(x) for x in v]
        conv[k] = v
    return replace(obj, **conv)


def build_configs(preset: str = "toy", ablation: str | None = None,
                  file_values: Mapping[str, Mapping[str, Any]] | None = None,
                  train_overrides: Mapping[str, Any] | None = None,
                  model_overrides: Mapping[str, Any] | None = None) -> tuple[OLBPConfig, TrainConfig]:
    file_values = file_values or {}
    model = OLBPConfig.preset(preset)
    train = TrainConfig.preset(preset)
    model = _apply(model, file_values.get("model", {}), "model", skip=("ablation",))
    model.ablation = _apply(model.ablation, file_values.get("ablation", {}), "ablation")
    train = _apply(train, file_values.get("train", {}), "train")
    if ablation is not None:
        if ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {ablation!r}; choose from {sorted(ABLATIONS)}")
        model.ablation = Ablation(**vars(ABLATIONS[ablation]))
    model = _apply(model, {k: v for k, v in (model_overrides or {}).items() if v is not None}, "model")
    train = _apply(train, {k: v for k, v in (train_overrides or {}).items() if v is not None}, "train")
    model.dropout = train.dropout
    model.validate()
    train.validate()
    return model, train


def write_config_file(path, model: OLBPConfig, train: TrainConfig) -> None:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    md = model.to_dict()
    cp["model"] = {k: json.dumps(v) for k, v in md.items() if k != "ablation"}
    cp["ablation"] = {k: json.dumps(v) for k, v in md["ablation"].items()}
    cp["train"] = {k: json.dumps(v) for k, v in train.to_dict().items()}
    with open(Path(path), "w") as fh:
        cp.write(fh)
