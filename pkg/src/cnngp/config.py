"""Run configuration: a YAML document of nested sections with strict keys.

Every leaf is addressable by a dotted name (``arch.depth``,
``arch.readout.kind``) so command-line flags can override file values.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Any, Optional

import yaml

from .data_model import ArchConfig, LinearPostOp, ReadoutSpec
from .datasets import SynthSpec
from .kernel_ops import sigma_b2_for_q_star
from .regress import LadderSpec


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "arch": {
        "depth": 1,
        "filter_half_width": 1,
        "sigma_w2": 1.0,
        "sigma_b2": 0.0,
        "q_star": None,
        "nonlinearity": "relu",
        "padding": "circular",
        "connectivity": "cnn",
        "v": None,
        "post_ops": [],
        "readout": {"kind": "vectorize", "pixel_index": None, "h": None,
                    "sigma_w2": None, "sigma_b2": None},
    },
    "kernel": {"track": "auto", "payload": "class_kernel", "blocks": "joint",
               "block_size": 256},
    "data": {
        "source": "synth",
        "paths": [],
        "test_paths": [],
        "idx_images": None,
        "idx_labels": None,
        "idx_test_images": None,
        "idx_test_labels": None,
        "npz": None,
        "num_classes": 10,
        "train_per_class": None,
        "test_per_class": None,
        "seed": 0,
        "downsample": None,
        "downsample_method": "bilinear",
        "normalize": True,
        "normalize_first": False,
        "synth": {"kind": "blobs", "num_classes": 2, "per_class": 4, "channels": 1,
                  "height": 1, "width": 8, "noise": 0.5, "orbits": 2, "shifts": 0,
                  "test_fraction": 0.0},
    },
    "mc": {"n": 64, "M": 16, "seed": 0},
    "regress": {"noise": 0.0, "noisy_variance": True,
                "ladder": {"start": -10, "stop": 5, "scale_by_diag_mean": False}},
    "phase": {"nonlinearity": "erf", "w_range": [0.1, 5.0], "b_range": [0.0, 2.0],
              "size": [50, 50], "max_depth": 1000, "c0": 0.5},
    "output": {"path": None, "report": None},
}

# leaves whose values are free-form mappings or lists, not sections
_OPAQUE = {("arch", "post_ops"), ("arch", "v"), ("arch", "readout", "h")}


def _merge(base: dict, update: dict, path=()) -> dict:
    for key, value in update.items():
        where = ".".join(path + (key,))
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and path + (key,) not in _OPAQUE:
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} is a section, got {value!r}")
            _merge(base[key], value, path + (key,))
        else:
            base[key] = value
    return base


def set_dotted(cfg: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = cfg
    for i, part in enumerate(parts[:-1]):
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config key {'.'.join(parts[:i + 1])!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    if isinstance(node[parts[-1]], dict) and tuple(parts) not in _OPAQUE:
        raise ConfigError(f"{dotted!r} is a section; override its keys instead")
    node[parts[-1]] = value


def parse_value(text: str) -> Any:
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


@dataclass
class RunConfig:
    raw: dict

    @classmethod
    def load(cls, path: Optional[str] = None, overrides=()) -> "RunConfig":
        cfg = copy.deepcopy(DEFAULTS)
        if path:
            with open(path) as f:
                try:
                    doc = yaml.safe_load(f) or {}
                except yaml.YAMLError as exc:
                    raise ConfigError(f"{path}: {exc}") from exc
            if not isinstance(doc, dict):
                raise ConfigError(f"{path}: top level must be a mapping")
            _merge(cfg, doc)
        for dotted, value in overrides:
            set_dotted(cfg, dotted, value)
        out = cls(cfg)
        out.validate()
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        cfg = copy.deepcopy(DEFAULTS)
        _merge(cfg, copy.deepcopy(doc))
        out = cls(cfg)
        out.validate()
        return out

    def validate(self) -> None:
        try:
            self.arch()
            self.ladder()
            self.synth()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        for key, allowed in (("track", ("auto", "full", "diag")),
                             ("payload", ("class_kernel", "cov_full", "cov_diag")),
                             ("blocks", ("joint", "split"))):
            if self.raw["kernel"][key] not in allowed:
                raise ConfigError(f"kernel.{key} must be one of {allowed}")
        if self.raw["data"]["source"] not in ("synth", "cifar", "idx", "npz"):
            raise ConfigError("data.source must be synth, cifar, idx or npz")
        mc = self.raw["mc"]
        if not (isinstance(mc["n"], int) and isinstance(mc["M"], int)) or mc["n"] < 1 or mc["M"] < 1:
            raise ConfigError("mc.n and mc.M must be integers >= 1")
        for section, key in (("data", "seed"), ("mc", "seed")):
            if not isinstance(self.raw[section][key], int):
                raise ConfigError(f"{section}.{key} must be an explicit integer")

    def arch(self) -> ArchConfig:
        a = dict(self.raw["arch"])
        q_star = a.pop("q_star")
        if q_star is not None:
            a["sigma_b2"] = sigma_b2_for_q_star(float(a["sigma_w2"]), float(q_star), a["nonlinearity"])
        readout = ReadoutSpec(**a.pop("readout"))
        post_ops = tuple((int(layer), LinearPostOp(**op)) for layer, op in a.pop("post_ops") or ())
        v = a.pop("v")
        return ArchConfig(
            depth=int(a["depth"]),
            filter_half_width=int(a["filter_half_width"]),
            sigma_w2=float(a["sigma_w2"]),
            sigma_b2=float(a["sigma_b2"]),
            nonlinearity=a["nonlinearity"],
            padding=a["padding"],
            connectivity=a["connectivity"],
            v=v,
            post_ops=post_ops,
            readout=readout,
        )

    def track(self) -> Optional[str]:
        t = self.raw["kernel"]["track"]
        return None if t == "auto" else t

    def ladder(self) -> LadderSpec:
        return LadderSpec(**self.raw["regress"]["ladder"])

    def synth(self) -> SynthSpec:
        return SynthSpec(**self.raw["data"]["synth"])

    def dump(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True)
