"""Run configuration: INI files whose ``[section] key`` pairs become flat dotted keys.

    [train]
    batch_size = 8

is the key ``train.batch_size``.  ``--set train.batch_size=8`` on the
command line overrides file values.
"""
from __future__ import annotations

import ast
import configparser
from dataclasses import dataclass, field, fields

from .errors import InvalidConfig

DEFAULTS = {
    "model.name": "meshnet-68",
    "model.features": 0,  # 0: the architecture's own width
    "model.in_channels": 1,
    "model.num_classes": 3,
    "model.dropout": 0.0,
    "sampler.side": 0,  # 0: the model's subvolume side
    "sampler.sigma": 50.0,
    "train.batch_size": 64,
    "train.batches": 2000,
    "train.lr": 1e-3,
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.eps": 1e-8,
    "train.val_every": 0,
    "train.val_subvolumes": 8,
    "train.normalize": "minmax",
    "data.train": "",  # comma-separated pair indices; empty: all not in data.validation
    "data.validation": "",
    "infer.subvolumes": 1000,
    "infer.batch_size": 8,
    "infer.workers": 1,
    "seed": None,
}


def _parse_value(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def read_config_file(path) -> dict:
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keep key case
    with open(path) as f:
        cp.read_string("[__top__]\n" + f.read())
    out = {}
    for section in cp.sections():
        for key, value in cp.items(section):
            out[key if section == "__top__" else f"{section}.{key}"] = _parse_value(value)
    return out


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise InvalidConfig(f"override {item!r} is not of the form key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = _parse_value(v.strip())
    return out


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))

    @classmethod
    def load(cls, path=None, overrides=None) -> "RunConfig":
        values = dict(DEFAULTS)
        layers = [read_config_file(path)] if path else []
        layers.append(overrides or {})
        for layer in layers:
            unknown = set(layer) - set(DEFAULTS)
            if unknown:
                raise InvalidConfig(f"unknown config keys: {', '.join(sorted(unknown))}")
            values.update(layer)
        cfg = cls(values)
        cfg.validate()
        return cfg

    def __getitem__(self, key):
        return self.values[key]

    def validate(self) -> None:
        v = self.values
        checks = [
            ("model.in_channels", v["model.in_channels"] >= 1, "must be >= 1"),
            ("model.num_classes", 2 <= v["model.num_classes"] <= 256, "must be in [2, 256]"),
            ("model.dropout", 0 <= v["model.dropout"] < 1, "must be in [0, 1)"),
            ("sampler.side", v["sampler.side"] >= 0, "must be >= 0"),
            ("sampler.sigma", _positive(v["sampler.sigma"]), "must be positive"),
            ("train.batch_size", v["train.batch_size"] >= 1, "must be >= 1"),
            ("train.batches", v["train.batches"] >= 0, "must be >= 0"),
            ("train.lr", v["train.lr"] > 0, "must be > 0"),
            ("train.beta1", 0 <= v["train.beta1"] < 1, "must be in [0, 1)"),
            ("train.beta2", 0 <= v["train.beta2"] < 1, "must be in [0, 1)"),
            ("train.normalize", v["train.normalize"] in ("minmax", "constant"), "must be minmax or constant"),
            ("infer.subvolumes", v["infer.subvolumes"] >= 0, "must be >= 0"),
            ("infer.workers", v["infer.workers"] >= 1, "must be >= 1"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise InvalidConfig(f"{key}: {msg} (got {v[key]!r})")

    def indices(self, key: str) -> list[int]:
        raw = self.values[key]
        if raw in ("", None):
            return []
        if isinstance(raw, int):
            return [raw]
        return [int(s) for s in str(raw).replace("(", "").replace(")", "").split(",") if s.strip()]


def _positive(sigma) -> bool:
    if isinstance(sigma, (int, float)):
        return sigma > 0
    return all(s > 0 for s in sigma)


def dataclass_kwargs(cls, cfg: RunConfig, prefix: str) -> dict:
    names = {f.name for f in fields(cls)}
    return {k.split(".", 1)[1]: v for k, v in cfg.values.items()
            if k.startswith(prefix + ".") and k.split(".", 1)[1] in names}
