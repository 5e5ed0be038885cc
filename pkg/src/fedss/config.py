"""Config files for the command-line harness.

JSON and TOML are both accepted, chosen by file extension. Every key has
a default, so an empty config is a valid experiment; unknown keys raise
instead of being silently ignored.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from .data import (
    Dataset,
    SyntheticDatasetSpec,
    generate_synthetic,
    ingest_csv,
)
from .errors import ConfigurationError
from .federation import METHODS, RoundConfig
from .model import ModelConfig

_SCHEMA: Dict[str, Dict] = {
    "data": {
        "kind": "synthetic",
        "n_classes": 200,
        "input_dim": 32,
        "samples_per_class": 50,
        "dispersion": 1.0,
        "noise_sigma": 0.35,
        "seed": 7,
        "train_csv": "",
        "test_csv": "",
    },
    "model": {
        "hidden_dims": [64],
        "embedding_dim": 16,
        "head": "cosine",
        "scale": 20.0,
    },
    "partition": {
        "num_clients": 64,
        "classes_per_client": 5,
        "examples_per_client": 100,
        "grouping": "similar",
    },
    "training": {
        "method": "fedss",
        "rounds": 300,
        "clients_per_round": 8,
        "local_epochs": 1,
        "client_lr": 0.01,
        "server_lr": 1.0,
        "server_momentum": 0.9,
        "batch_size": 32,
        "target_s_size": 20,
        "client_parallelism": 1,
        "spreadout_weight": 0.1,
        "spreadout_margin": 1.0,
        "spreadout_after_momentum": True,
        "eval_every": 0,
        "checkpoint_every": 0,
        "seed": 0,
    },
    "experiment": {
        "methods": [],
        "s_sizes": [],
        "seeds": [],
    },
    "noise": {
        "ms": [2, 4, 8, 16, 32, 64, 128, "pool"],
        "clients": 8,
        "replicates": 64,
        "lr": 0.01,
        "batch_size": 32,
    },
    "cost": {
        "phi_params": 0,
        "s_size": 0,
        "rounds": 1,
        "clients_per_round": 1,
        "n_grid": [],
        "d_grid": [],
    },
    "eval": {
        "metric": "accuracy",
        "map_r": 0,
    },
}


def _merge_section(name: str, defaults: Dict, given: Dict) -> Dict:
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigurationError(
            f"unknown keys in [{name}]: {sorted(unknown)}"
        )
    merged = dict(defaults)
    merged.update(given)
    return merged


def load_config(path: Optional[str]) -> Dict[str, Dict]:
    """Parse and normalize a config file; None means all defaults."""
    raw: Dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigurationError(f"config file not found: {path}")
        if p.suffix == ".json":
            try:
                raw = json.loads(p.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"invalid JSON in {path}: {exc}") from exc
        elif p.suffix == ".toml":
            try:
                raw = tomllib.loads(p.read_text())
            except tomllib.TOMLDecodeError as exc:
                raise ConfigurationError(f"invalid TOML in {path}: {exc}") from exc
        else:
            raise ConfigurationError(
                f"config must be .json or .toml, got {p.suffix!r}"
            )
        if not isinstance(raw, dict):
            raise ConfigurationError("config root must be a table/object")
    unknown = set(raw) - set(_SCHEMA)
    if unknown:
        raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
    cfg = {}
    for name, defaults in _SCHEMA.items():
        given = raw.get(name, {})
        if not isinstance(given, dict):
            raise ConfigurationError(f"section [{name}] must be a table/object")
        cfg[name] = _merge_section(name, defaults, given)
    return cfg


def synthetic_spec(cfg: Dict[str, Dict], seed: Optional[int] = None) -> SyntheticDatasetSpec:
    d = cfg["data"]
    return SyntheticDatasetSpec(
        n_classes=int(d["n_classes"]),
        input_dim=int(d["input_dim"]),
        samples_per_class=int(d["samples_per_class"]),
        dispersion=float(d["dispersion"]),
        noise_sigma=float(d["noise_sigma"]),
        seed=int(d["seed"] if seed is None else seed),
    )


def load_datasets(cfg: Dict[str, Dict]) -> Tuple[Dataset, Dataset]:
    """Materialize (train, test) from the data section.

    kind "synthetic" generates in-memory; kind "csv" ingests the two
    files named by train_csv/test_csv with a shared label mapping.
    """
    d = cfg["data"]
    kind = d["kind"]
    if kind == "synthetic":
        return generate_synthetic(synthetic_spec(cfg))
    if kind == "csv":
        if not d["train_csv"] or not d["test_csv"]:
            raise ConfigurationError(
                "data.kind 'csv' requires train_csv and test_csv paths"
            )
        train, mapping = ingest_csv(d["train_csv"])
        test, _ = ingest_csv(d["test_csv"], mapping=mapping)
        return train, test
    raise ConfigurationError(f"unknown data.kind {kind!r}")


def model_config(cfg: Dict[str, Dict], input_dim: int, n_classes: int) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(
        input_dim=int(input_dim),
        hidden_dims=tuple(int(h) for h in m["hidden_dims"]),
        embedding_dim=int(m["embedding_dim"]),
        n_classes=int(n_classes),
        head=str(m["head"]),
        scale=float(m["scale"]),
    )


def round_config(
    cfg: Dict[str, Dict],
    method: Optional[str] = None,
    s_size: Optional[int] = None,
    seed: Optional[int] = None,
) -> RoundConfig:
    t = cfg["training"]
    m = cfg["model"]
    return RoundConfig(
        method=str(method if method is not None else t["method"]),
        clients_per_round=int(t["clients_per_round"]),
        local_epochs=int(t["local_epochs"]),
        client_lr=float(t["client_lr"]),
        server_lr=float(t["server_lr"]),
        server_momentum=float(t["server_momentum"]),
        target_s_size=int(s_size if s_size is not None else t["target_s_size"]),
        batch_size=int(t["batch_size"]),
        seed=int(seed if seed is not None else t["seed"]),
        head=str(m["head"]),
        scale=float(m["scale"]),
        client_parallelism=int(t["client_parallelism"]),
        spreadout_weight=float(t["spreadout_weight"]),
        spreadout_margin=float(t["spreadout_margin"]),
        spreadout_after_momentum=bool(t["spreadout_after_momentum"]),
    )


@dataclass(frozen=True)
class Cell:
    """One experiment grid point."""

    method: str
    s_size: int
    seed: int


@dataclass
class ExperimentPlan:
    """The grid a run executes plus where its outputs land."""

    cells: List[Cell]
    out_dir: Path

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)
        if not self.cells:
            raise ConfigurationError("experiment plan has no cells")
        if len(set(self.cells)) != len(self.cells):
            raise ConfigurationError("experiment cells must be distinct")
        for cell in self.cells:
            if cell.method not in METHODS:
                raise ConfigurationError(f"unknown method {cell.method!r}")
        self.out_dir.mkdir(parents=True, exist_ok=True)
        if not os.access(self.out_dir, os.W_OK):
            raise ConfigurationError(f"output directory not writable: {self.out_dir}")


def build_plan(
    cfg: Dict[str, Dict], out_dir, seed: Optional[int] = None
) -> ExperimentPlan:
    """Grid from the experiment section; empty lists fall back to the
    single configured training cell."""
    e = cfg["experiment"]
    t = cfg["training"]
    methods = [str(m) for m in e["methods"]] or [str(t["method"])]
    s_sizes = [int(s) for s in e["s_sizes"]] or [int(t["target_s_size"])]
    seeds = [int(s) for s in e["seeds"]]
    if not seeds:
        seeds = [int(t["seed"] if seed is None else seed)]
    cells = [
        Cell(method=m, s_size=s, seed=sd)
        for m in methods
        for s in s_sizes
        for sd in seeds
    ]
    return ExperimentPlan(cells=cells, out_dir=Path(out_dir))
