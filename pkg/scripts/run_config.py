"""
RunConfig: the JSON document that drives the command line. It is checked
against SCHEMA before any work starts; errors name the dotted path of the
offending key (e.g. `train.batch_size`).

    {
      "preset": "tableI" | "figures" | "massif",
      "grid":     {ParamGrid fields overriding the preset},
      "simulate": {"shape", "frequency", "eps_r", "sigma", "tx", "length", "absorber"},
      "dataset":  {"split", "limit", "crop", "workers"},
      "model":    {PrbpnConfig fields},
      "train":    {TrainConfig fields},
      "paths":    {"data", "models"}
    }
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

from prbpn import PrbpnConfig
from pwe_solver import Material, PweConfig
from rss_dataset import DATA_DIR, PRESETS, SPLITS, ParamGrid, preset_grid
from tunnel_geometry import SHAPE_KINDS
from train_prbpn import LR_SCHEDULES, MODELS_DIR, TrainConfig

# --- CONFIGURATION ---
DEFAULT_PRESET = "tableI"


class ConfigError(ValueError):
    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")


# ==========================================
# SCHEMA
# ==========================================
@dataclass(frozen=True)
class Scalar:
    types: tuple
    choices: tuple = None
    nullable: bool = False

    def check(self, value, path):
        if value is None:
            if not self.nullable:
                raise ConfigError(path, "may not be null")
            return
        # bool is an int subclass; only accept it where bool is asked for
        if isinstance(value, bool) and bool not in self.types:
            raise ConfigError(path, f"expected {self._names()}, got bool")
        if not isinstance(value, self.types):
            raise ConfigError(path, f"expected {self._names()}, got {type(value).__name__}")
        if self.choices is not None and value not in self.choices:
            raise ConfigError(path, f"must be one of {list(self.choices)}, got {value!r}")

    def _names(self):
        return " or ".join(t.__name__ for t in self.types)


@dataclass(frozen=True)
class ListOf:
    item: Scalar
    length: int = None
    nullable: bool = False

    def check(self, value, path):
        if value is None:
            if not self.nullable:
                raise ConfigError(path, "may not be null")
            return
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        if self.length is not None and len(value) != self.length:
            raise ConfigError(path, f"expected {self.length} items, got {len(value)}")
        if not value:
            raise ConfigError(path, "may not be empty")
        for i, item in enumerate(value):
            self.item.check(item, f"{path}[{i}]")


NUM = Scalar((int, float))
INT = Scalar((int,))
BOOL = Scalar((bool,))
OPT_INT = Scalar((int,), nullable=True)
OPT_NUM = Scalar((int, float), nullable=True)
STR = Scalar((str,))
SHAPE = Scalar((str, int))

SCHEMA = {
    "preset": Scalar((str,), choices=tuple(PRESETS)),
    "grid": {
        "shapes": ListOf(SHAPE),
        "frequencies": ListOf(NUM),
        "eps_r": ListOf(NUM),
        "sigma": ListOf(NUM),
        "tx_x": ListOf(NUM),
        "tx_y": ListOf(NUM),
        "length": NUM,
        "width": NUM,
        "height": NUM,
        "arch_spring_height": NUM,
        "top_width": NUM,
    },
    "simulate": {
        "shape": SHAPE,
        "frequency": NUM,
        "eps_r": NUM,
        "sigma": NUM,
        "tx": ListOf(NUM, length=2),
        "length": NUM,
        "absorber": BOOL,
    },
    "dataset": {
        "split": Scalar((str,), choices=SPLITS),
        "limit": OPT_INT,
        "crop": ListOf(INT, length=2, nullable=True),
        "workers": INT,
    },
    "model": {
        "scale": INT,
        "base_channels": INT,
        "resblocks_per_net": INT,
        "refine_iters": INT,
        "context_radius": INT,
        "beta": NUM,
        "dwtf_enabled": BOOL,
    },
    "train": {
        "max_iters": INT,
        "batch_size": INT,
        "seed": INT,
        "lr": NUM,
        "lr_schedule": Scalar((str,), choices=LR_SCHEDULES),
        "lr_step": INT,
        "beta": OPT_NUM,
        "checkpoint_every": INT,
        "eval_every": INT,
        "crop": ListOf(INT, length=2, nullable=True),
        "augment": BOOL,
        "target_loss": OPT_NUM,
        "deterministic": BOOL,
    },
    "paths": {
        "data": STR,
        "models": STR,
    },
}


def validate(doc, schema=SCHEMA, path="config"):
    """Reject unknown keys and mistyped values, naming the dotted path."""
    if not isinstance(doc, dict):
        raise ConfigError(path, f"expected an object, got {type(doc).__name__}")
    for key, value in doc.items():
        sub = f"{key}" if path == "config" else f"{path}.{key}"
        if key not in schema:
            raise ConfigError(sub, f"unknown key (expected one of {sorted(schema)})")
        rule = schema[key]
        if isinstance(rule, dict):
            validate(value, rule, sub)
        else:
            rule.check(value, sub)
    return doc


# ==========================================
# RUN CONFIG
# ==========================================
@dataclass(frozen=True)
class DatasetOptions:
    split: str = "train"
    limit: int = None
    crop: tuple = None
    workers: int = 1


@dataclass(frozen=True)
class RunConfig:
    preset: str
    grid: ParamGrid
    simulate: dict
    dataset: DatasetOptions = field(default_factory=DatasetOptions)
    model: PrbpnConfig = field(default_factory=PrbpnConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data_dir: str = DATA_DIR
    models_dir: str = MODELS_DIR

    def simulate_config(self, **overrides):
        """PweConfig of the single run behind `simulate`; unset keys fall back to each grid axis' first value."""
        s = {**self.simulate, **{k: v for k, v in overrides.items() if v is not None}}
        kind = s.get("shape", self.grid.shapes[0])
        if isinstance(kind, int):
            kind = SHAPE_KINDS[kind - 1]
        sections = replace(self.grid, shapes=(kind,)).sections()
        tx = s.get("tx", (self.grid.tx_x[0], self.grid.tx_y[0]))
        return PweConfig(
            frequency=float(s.get("frequency", self.grid.frequencies[0])),
            section=sections[kind],
            material=Material(eps_r=float(s.get("eps_r", self.grid.eps_r[0])),
                              sigma=float(s.get("sigma", self.grid.sigma[0]))),
            tx=tuple(tx),
            length=float(s.get("length", self.grid.length)),
            absorber=bool(s.get("absorber", True)),
        )


def _build(doc, what, factory):
    try:
        return factory(doc)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(what, str(exc)) from exc


def run_config_from_dict(doc, preset=None):
    validate(doc)
    name = preset or doc.get("preset", DEFAULT_PRESET)
    if name not in PRESETS:
        raise ConfigError("preset", f"must be one of {sorted(PRESETS)}, got {name!r}")

    base = preset_grid(name)
    grid = _build(doc.get("grid", {}), "grid",
                  lambda d: ParamGrid.from_dict({**base.to_dict(), **d}))
    ds = doc.get("dataset", {})
    dataset = _build(ds, "dataset", lambda d: DatasetOptions(
        split=d.get("split", "train"),
        limit=d.get("limit"),
        crop=tuple(d["crop"]) if d.get("crop") else None,
        workers=d.get("workers", 1),
    ))
    model = _build(doc.get("model", {}), "model", lambda d: PrbpnConfig(**d))
    train = _build(doc.get("train", {}), "train", lambda d: TrainConfig(**d))
    paths = doc.get("paths", {})
    run = RunConfig(
        preset=name,
        grid=grid,
        simulate=dict(doc.get("simulate", {})),
        dataset=dataset,
        model=model,
        train=train,
        data_dir=paths.get("data", DATA_DIR),
        models_dir=paths.get("models", MODELS_DIR),
    )
    _build(run, "simulate", lambda r: r.simulate_config())
    return run


def load_run_config(path=None, preset=None):
    """RunConfig from a JSON file, or from the preset alone when no file is given."""
    if path is None:
        return run_config_from_dict({}, preset)
    if not os.path.exists(path):
        raise ConfigError("config", f"file '{path}' not found")
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON in '{path}' ({exc})") from exc
    return run_config_from_dict(doc, preset)
