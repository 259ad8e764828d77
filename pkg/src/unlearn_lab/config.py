"""Sectioned ``key = value`` experiment configuration.

Every key has a type and a default; unknown sections or keys are errors so
that typos never silently fall back to a default. Errors carry the file
name, section, key and line number.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .data import make_dataset
from .evaluation import MIAConfig
from .memorization import MemConfig
from .proxies import CurvatureConfig, HoldoutConfig, checkpoint_interval
from .rum import APPROACHES, SequentialConfig
from .scores import PROXY_KINDS
from .trainer import TrainConfig
from .unlearn import ALGORITHMS, UnlearnConfig


class ConfigError(ValueError):
    pass


def _int_list(s):
    return tuple(int(v) for v in _str_list(s))


def _str_list(s):
    return tuple(v.strip() for v in s.split(",") if v.strip())


def _float_list(s):
    return tuple(float(v) for v in _str_list(s))


def _bool(s):
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# section -> key -> (parser, default)
SCHEMA = {
    "experiment": {
        "seeds": (_int_list, (0,)),
        "output_dir": (str, "results"),
    },
    "dataset": {
        "n_classes": (int, 10),
        "n_train": (int, 2000),
        "n_test": (int, 1000),
        "input_dim": (int, 20),
        "atypical_fraction": (float, 0.05),
        "noise_fraction": (float, 0.1),
        "separation": (float, 3.0),
        "cluster_std": (float, 1.0),
    },
    "train": {
        "epochs": (int, 40),
        "batch_size": (int, 64),
        "base_lr": (float, 0.1),
        "schedule": (str, "cosine"),
        "milestones": (_int_list, ()),
        "factor": (float, 0.2),
        "momentum": (float, 0.9),
        "weight_decay": (float, 5e-4),
        "hidden": (_int_list, (64, 64)),
        "activation": (str, "relu"),
    },
    "mem": {
        "n_models": (int, 100),
        "subset_fraction": (float, 0.7),
    },
    "proxy": {
        "kinds": (_str_list, ("confidence", "binary_accuracy", "holdout_retraining")),
        "holdout_epochs": (int, 2),
        "curvature_probes": (int, 4),
        "curvature_h": (float, 1e-2),
    },
    "unlearn": {
        "algorithms": (_str_list, ("neggrad_plus",)),
        "epochs": (int, 5),
        "lr": (float, 0.01),
        "beta": (float, 0.95),
        "gamma": (float, 1e-4),
        "sparsity_ratio": (float, 0.5),
        "batch_size": (int, 128),
        "momentum": (float, 0.9),
        "weight_decay": (float, 5e-4),
    },
    "rum": {
        "K": (int, 3),
        "approaches": (_str_list, ("rum_f", "vanilla", "shuffle")),
        "band_size": (int, 100),
    },
    "eval": {
        "n_samples": (int, 1000),
        "iterations": (int, 500),
        "l2": (float, 1e-3),
        "lr": (float, 0.5),
    },
    "sequential": {
        "n_steps": (int, 3),
        "proxy": (str, "holdout_retraining"),
        "tracks": (_str_list, ("rum_f", "vanilla")),
    },
}

# blocks each subcommand needs (besides [experiment], which is always required)
REQUIRED = {
    "gen-data": ("dataset",),
    "train": ("dataset", "train"),
    "mem": ("dataset", "train", "mem"),
    "proxy": ("dataset", "train", "proxy"),
    "fidelity": ("dataset", "train", "mem", "proxy"),
    "rum": ("dataset", "train", "proxy", "unlearn", "rum", "eval"),
    "sequential": ("dataset", "train", "unlearn", "rum", "eval", "sequential"),
}


def _line_index(text: str) -> dict:
    """(section, key) -> 1-based line number, plus (section, None) for headers."""
    where, section = {}, None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"^\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
            where[(section, None)] = no
        elif section and s and s[0] not in "#;":
            key = re.split(r"[=:]", s, maxsplit=1)[0].strip().lower()
            where.setdefault((section, key), no)
    return where


@dataclass
class ExperimentConfig:
    sections: dict
    present: frozenset
    source: str = "<config>"
    seeds: tuple = field(init=False)

    def __post_init__(self):
        self.seeds = tuple(self.sections["experiment"]["seeds"])

    def __getitem__(self, section):
        return self.sections[section]

    @property
    def output_dir(self) -> str:
        return self.sections["experiment"]["output_dir"]

    def with_seeds(self, seeds) -> "ExperimentConfig":
        sections = {k: dict(v) for k, v in self.sections.items()}
        sections["experiment"]["seeds"] = tuple(int(s) for s in seeds)
        return ExperimentConfig(sections, self.present, self.source)

    # per-seed component configs

    def dataset(self, seed: int):
        return make_dataset(seed=seed, **self["dataset"])

    def train_cfg(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **self["train"])

    def mem_cfg(self, seed: int) -> MemConfig:
        return MemConfig(seed=seed, **self["mem"])

    def holdout_cfg(self, seed: int) -> HoldoutConfig:
        return HoldoutConfig.from_train(self.train_cfg(seed), self["proxy"]["holdout_epochs"])

    def curvature_cfg(self, seed: int) -> CurvatureConfig:
        p = self["proxy"]
        return CurvatureConfig(p["curvature_probes"], p["curvature_h"], seed)

    def checkpoint_every(self) -> int:
        return checkpoint_interval(self["train"]["epochs"])

    def unlearn_cfg(self, algorithm: str, seed: int) -> UnlearnConfig:
        u = {k: v for k, v in self["unlearn"].items() if k != "algorithms"}
        return UnlearnConfig(algorithm=algorithm, seed=seed, **u)

    def mia_cfg(self, seed: int) -> MIAConfig:
        return MIAConfig(seed=seed, **self["eval"])

    def sequential_cfg(self, algorithm: str, seed: int) -> SequentialConfig:
        return SequentialConfig(
            train=self.train_cfg(seed), unlearn=self.unlearn_cfg(algorithm, seed),
            mia=self.mia_cfg(seed), K=self["rum"]["K"],
            tracks=tuple(self["sequential"]["tracks"]), proxy_seed=seed,
            holdout=self.holdout_cfg(seed), curvature=self.curvature_cfg(seed),
        )

    def digest(self, blocks) -> str:
        """Hash of the resolved values of ``blocks``; output paths excluded."""
        payload = {b: self.sections[b] for b in sorted(blocks)}
        blob = json.dumps(payload, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def require(self, command: str) -> None:
        missing = [b for b in ("experiment",) + REQUIRED[command] if b not in self.present]
        if missing:
            raise ConfigError(f"{self.source}: subcommand {command!r} needs section(s) "
                              + ", ".join(f"[{m}]" for m in missing))


def _check(cfg: ExperimentConfig, where: dict) -> None:
    """Cross-field checks that the component dataclasses do not cover."""

    def fail(section, key, msg):
        line = where.get((section, key)) or where.get((section, None))
        loc = f"line {line}: " if line else ""
        raise ConfigError(f"{cfg.source}: {loc}[{section}] {key}: {msg}")

    if not cfg.seeds:
        fail("experiment", "seeds", "at least one seed is required")
    for k in cfg["proxy"]["kinds"]:
        if k not in PROXY_KINDS:
            fail("proxy", "kinds", f"unknown proxy {k!r}; choose from {', '.join(PROXY_KINDS)}")
    if not cfg["proxy"]["kinds"]:
        fail("proxy", "kinds", "empty proxy list")
    for a in cfg["unlearn"]["algorithms"]:
        if a not in ALGORITHMS:
            fail("unlearn", "algorithms", f"unknown algorithm {a!r}")
    for a in cfg["rum"]["approaches"]:
        if a not in APPROACHES:
            fail("rum", "approaches", f"unknown approach {a!r}")
    for a in cfg["sequential"]["tracks"]:
        if a not in APPROACHES:
            fail("sequential", "tracks", f"unknown approach {a!r}")
    if cfg["sequential"]["proxy"] not in PROXY_KINDS:
        fail("sequential", "proxy", f"unknown proxy {cfg['sequential']['proxy']!r}")
    if cfg["rum"]["K"] < 1:
        fail("rum", "k", "K must be >= 1")
    if cfg["rum"]["band_size"] < 1:
        fail("rum", "band_size", "must be >= 1")
    if cfg["sequential"]["n_steps"] < 1:
        fail("sequential", "n_steps", "must be >= 1")

    # let the component dataclasses validate their own fields
    seed = cfg.seeds[0]
    builders = {
        "dataset": lambda: cfg.dataset(seed),
        "train": lambda: cfg.train_cfg(seed),
        "mem": lambda: cfg.mem_cfg(seed),
        "proxy": lambda: (cfg.curvature_cfg(seed), cfg.holdout_cfg(seed)),
        "unlearn": lambda: [cfg.unlearn_cfg(a, seed) for a in cfg["unlearn"]["algorithms"]],
        "eval": lambda: cfg.mia_cfg(seed),
    }
    for section, build in builders.items():
        try:
            build()
        except (ValueError, TypeError) as exc:
            msg = str(exc)
            key = next((k for k in SCHEMA[section] if re.search(rf"\b{k}\b", msg)), None)
            fail(section, key, msg)


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}".replace("\n", " ")) from None
    where = _line_index(text)
    sections, present = {}, set()
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: line {where.get((section, None), '?')}: "
                              f"unknown section [{section}]")
        present.add(section)
    for section, keys in SCHEMA.items():
        resolved = {key: default for key, (_, default) in keys.items()}
        if section in present:
            lower = {k.lower(): k for k in keys}
            for raw_key, raw in parser.items(section):
                line = where.get((section, raw_key), "?")
                if raw_key not in lower:
                    raise ConfigError(f"{source}: line {line}: [{section}] unknown key {raw_key!r}")
                key = lower[raw_key]
                try:
                    resolved[key] = keys[key][0](raw)
                except ValueError as exc:
                    raise ConfigError(f"{source}: line {line}: [{section}] {key}: {exc}") from None
        sections[section] = resolved
    cfg = ExperimentConfig(sections, frozenset(present), source)
    _check(cfg, where)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    return parse_config(text, str(path))
