"""Flat ``key = value`` experiment configs with dotted sections.

Example::

    dataset = toy-subset(5000)
    architecture = small-cnn
    method = wss-cl
    split.mode = random
    split.fraction = 0.1
    train.epochs = 25
    unlearn.tau = 1.4
"""
from __future__ import annotations

import os
import re
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import CIFAR10_CLASSES
from .errors import ConfigError
from .unlearn import METHODS, TrainConfig, UnlearnConfig

DATA_ENV = "UNLEARN_DATA_DIR"
_TOY = re.compile(r"^toy-subset\((\d+)\)$")
_TOP_LEVEL = ("dataset", "data_dir", "architecture", "method", "output_dir", "run_seed")


@dataclass
class ExperimentConfig:
    dataset: str = "cifar10"
    data_dir: str | None = None
    architecture: str = "small-cnn"
    method: str = "wss-cl"
    output_dir: str = "runs/default"
    run_seed: int = 0
    split_mode: str = "random"
    split_fraction: float | None = 0.1
    split_class: int | None = None
    split_seed: int | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    unlearn: UnlearnConfig = field(default_factory=UnlearnConfig)
    # keys given explicitly in the file; seeds not listed here follow run_seed
    explicit: set = field(default_factory=set, repr=False)

    @property
    def toy_size(self) -> int | None:
        m = _TOY.match(self.dataset)
        return int(m.group(1)) if m else None

    @property
    def num_classes(self) -> int:
        return 100 if self.dataset == "cifar100" else 10

    def resolved_data_dir(self) -> Path:
        d = self.data_dir or os.environ.get(DATA_ENV)
        if not d:
            raise ConfigError(f"no data_dir in config and ${DATA_ENV} is not set")
        return Path(d)

    def set_run_seed(self, seed: int):
        self.run_seed = int(seed)
        self._sync_seeds()

    def _sync_seeds(self):
        if "train.seed" not in self.explicit:
            self.train.seed = self.run_seed
        if "unlearn.seed" not in self.explicit:
            self.unlearn.seed = self.run_seed
        if "split.seed" not in self.explicit:
            self.split_seed = self.run_seed

    def validate(self) -> "ExperimentConfig":
        if self.dataset not in ("cifar10", "cifar100") and self.toy_size is None:
            raise ConfigError(f"unknown dataset {self.dataset!r}; use cifar10, cifar100 or toy-subset(n)")
        if self.architecture not in ("small-cnn", "resnet18-cifar"):
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.split_mode == "random":
            if self.split_fraction is None or not 0.0 <= self.split_fraction <= 1.0:
                raise ConfigError("split.fraction must lie in [0, 1]")
        elif self.split_mode == "class":
            if self.split_class is None or not 0 <= self.split_class < self.num_classes:
                raise ConfigError(f"split.class must lie in [0, {self.num_classes})")
        else:
            raise ConfigError(f"unknown split.mode {self.split_mode!r}")
        if self.run_seed < 0:
            raise ConfigError("run_seed must be >= 0")
        self.train.validate()
        self.unlearn.validate()
        return self

    def lock_items(self) -> list[tuple[str, object]]:
        """Settings that cached artifacts (split, original checkpoint) depend on."""
        items = [
            ("dataset", self.dataset),
            ("architecture", self.architecture),
            ("run_seed", self.run_seed),
            ("split.mode", self.split_mode),
            ("split.fraction", self.split_fraction),
            ("split.class", self.split_class),
            ("split.seed", self.split_seed),
        ]
        items += [(f"train.{f.name}", getattr(self.train, f.name)) for f in fields(self.train)]
        return items

    def lock_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.lock_items())

    def dump(self) -> str:
        lines = [f"{k} = {_fmt(getattr(self, k))}" for k in _TOP_LEVEL if getattr(self, k) is not None]
        lines += [f"{k} = {_fmt(v)}" for k, v in self.lock_items() if not k.startswith(("dataset", "architecture", "run_seed"))]
        lines += [f"unlearn.{f.name} = {_fmt(getattr(self.unlearn, f.name))}" for f in fields(self.unlearn)]
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(raw: str, typ, key: str):
    text = raw.strip()
    args = [a for a in typing.get_args(typ) if a is not type(None)]
    optional = len(args) < len(typing.get_args(typ))
    base = args[0] if args else typ
    if text.lower() in ("none", "null", ""):
        if optional:
            return None
        raise ConfigError(f"{key} may not be empty")
    t = getattr(base, "__name__", str(base))
    try:
        if t.startswith("bool"):
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if t.startswith("int"):
            return int(text)
        if t.startswith("float"):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {t}") from None
    return text


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def parse_config(text: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    top_types = _field_types(ExperimentConfig)
    section_types = {"train": _field_types(TrainConfig), "unlearn": _field_types(UnlearnConfig)}
    split_keys = {"mode": "split_mode", "fraction": "split_fraction", "class": "split_class", "seed": "split_seed"}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in _TOP_LEVEL:
            setattr(cfg, key, _coerce(value, top_types[key], key))
        elif key.startswith("split.") and key[6:] in split_keys:
            attr = split_keys[key[6:]]
            if attr == "split_class" and not value.strip().lstrip("-").isdigit() and value.strip().lower() != "none":
                if value.strip() not in CIFAR10_CLASSES:
                    raise ConfigError(f"{key}: unknown class {value!r}")
                setattr(cfg, attr, CIFAR10_CLASSES.index(value.strip()))
            else:
                setattr(cfg, attr, _coerce(value, top_types[attr], key))
        elif "." in key and key.split(".", 1)[0] in section_types:
            section, name = key.split(".", 1)
            types = section_types[section]
            if name not in types:
                raise ConfigError(f"unknown key {key!r}")
            setattr(getattr(cfg, section), name, _coerce(value, types[name], key))
        else:
            raise ConfigError(f"unknown key {key!r}")
        cfg.explicit.add(key)
    cfg._sync_seeds()
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
