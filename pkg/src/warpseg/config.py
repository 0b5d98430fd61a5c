"""Versioned run configuration shared by every CLI subcommand.

One YAML file drives the whole toolchain.  Top-level layout::

    version: 1
    data:
      dir: runs/demo/data        # where the dataset lives (synth writes here)
      counts: [400, 100, 100]    # train / val / test case counts
      side: 64                   # plus any other phantom generator field
      seed: 0
    train:                       # any TrainConfig field
      lr0: 0.01
      unet_max_epochs: 80
    experiment:
      modes: [plain, plain+aug, stn1, stn1+stn2]
      seeds: [0, 1, 2]
      overlay_cases: 4

Unknown keys anywhere are rejected so typos cannot silently change a run.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import yaml

from .data import PhantomConfig
from .train import TrainConfig

CONFIG_VERSION = 1
EXPERIMENT_MODES = ("plain", "plain+aug", "stn1", "stn1+stn2")


@dataclass(frozen=True)
class DataConfig:
    dir: str
    counts: tuple = (400, 100, 100)
    phantom: PhantomConfig = PhantomConfig()

    def __post_init__(self):
        if len(self.counts) != 3 or any(int(c) < 0 for c in self.counts):
            raise ValueError(f"counts must be three non-negative ints, got {self.counts}")
        if self.counts[0] < 1:
            raise ValueError("need at least one training case")

    @property
    def total(self) -> int:
        return int(sum(self.counts))

    @property
    def fractions(self) -> dict:
        tr, va, te = (int(c) for c in self.counts)
        n = self.total
        return {"train": tr / n, "val": va / n, "test": te / n}


@dataclass(frozen=True)
class ExperimentConfig:
    modes: tuple = EXPERIMENT_MODES
    seeds: tuple = (0, 1, 2)
    overlay_cases: int = 4

    def __post_init__(self):
        for m in self.modes:
            if m not in EXPERIMENT_MODES:
                raise ValueError(f"unknown experiment mode {m!r}; "
                                 f"choose from {EXPERIMENT_MODES}")
        if not self.modes:
            raise ValueError("experiment needs at least one mode")
        if not self.seeds:
            raise ValueError("experiment needs at least one seed")
        if self.overlay_cases < 0:
            raise ValueError("overlay_cases must be >= 0")


@dataclass(frozen=True)
class Config:
    data: DataConfig
    train: TrainConfig
    experiment: ExperimentConfig

    def to_dict(self) -> dict:
        """Plain-data view used in reports and checksums."""
        return {
            "version": CONFIG_VERSION,
            "data": {"dir": self.data.dir,
                     "counts": list(self.data.counts),
                     **dataclasses.asdict(self.data.phantom)},
            "train": dataclasses.asdict(self.train),
            "experiment": {"modes": list(self.experiment.modes),
                           "seeds": list(self.experiment.seeds),
                           "overlay_cases": self.experiment.overlay_cases},
        }


def _take(section: dict, cls, what: str):
    """Build dataclass `cls` from a dict, rejecting unknown keys."""
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(section) - known)
    if unknown:
        raise ValueError(f"unknown {what} keys: {', '.join(unknown)}")
    fixed = {}
    for key, value in section.items():
        if isinstance(value, list):
            value = tuple(value)
        fixed[key] = value
    return cls(**fixed)


def parse_config(doc: dict, base_dir=".") -> Config:
    if not isinstance(doc, dict):
        raise ValueError("config root must be a mapping")
    if doc.get("version") != CONFIG_VERSION:
        raise ValueError(f"config version must be {CONFIG_VERSION}, "
                         f"got {doc.get('version')!r}")
    unknown = sorted(set(doc) - {"version", "data", "train", "experiment"})
    if unknown:
        raise ValueError(f"unknown config sections: {', '.join(unknown)}")

    data_sec = dict(doc.get("data") or {})
    data_dir = data_sec.pop("dir", "data")
    counts = tuple(data_sec.pop("counts", (400, 100, 100)))
    phantom = _take(data_sec, PhantomConfig, "data")
    if not Path(data_dir).is_absolute():
        data_dir = str(Path(base_dir) / data_dir)
    data = DataConfig(dir=data_dir, counts=counts, phantom=phantom)

    train = _take(dict(doc.get("train") or {}), TrainConfig, "train")
    exp = _take(dict(doc.get("experiment") or {}), ExperimentConfig, "experiment")
    return Config(data=data, train=train, experiment=exp)


def load_config(path) -> Config:
    """Parse a YAML config file; relative data dirs resolve against it."""
    path = Path(path)
    with open(path) as f:
        doc = yaml.safe_load(f)
    return parse_config(doc, base_dir=path.parent)


def with_seed(cfg: Config, seed: int | None, scope: str) -> Config:
    """Apply a --seed override to the part of the config `scope` uses."""
    if seed is None:
        return cfg
    seed = int(seed)
    if scope == "data":
        phantom = dataclasses.replace(cfg.data.phantom, seed=seed)
        return dataclasses.replace(
            cfg, data=dataclasses.replace(cfg.data, phantom=phantom))
    if scope == "train":
        return dataclasses.replace(
            cfg, train=dataclasses.replace(cfg.train, seed=seed))
    if scope == "experiment":
        return dataclasses.replace(
            cfg, experiment=dataclasses.replace(cfg.experiment, seeds=(seed,)))
    raise ValueError(f"unknown seed scope {scope!r}")


DEFAULT_YAML = """\
version: 1
data:
  dir: data
  counts: [400, 100, 100]
  side: 64
  seed: 0
train:
  seed: 0
experiment:
  modes: [plain, plain+aug, stn1, stn1+stn2]
  seeds: [0, 1, 2]
  overlay_cases: 4
"""


def default_config(base_dir=".") -> Config:
    return parse_config(yaml.safe_load(DEFAULT_YAML), base_dir=base_dir)
