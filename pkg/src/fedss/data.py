"""Dataset generation, CSV ingestion and the in-memory dataset container.

The on-disk format is a plain CSV with one example per row:
``label,feat_0,...,feat_{p-1}`` (header optional). Synthetic datasets are
gaussian blobs around class centers drawn uniformly on the unit sphere.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import ConfigurationError, ContractViolationError, IngestionError

_TAG_DATA = 905


@dataclass
class Dataset:
    """Feature matrix plus dense integer labels in [0, n_classes)."""

    X: np.ndarray
    y: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2:
            raise ContractViolationError("X must be 2-D")
        if self.y.shape != (self.X.shape[0],):
            raise ContractViolationError("y length does not match X rows")
        if not np.all(np.isfinite(self.X)):
            raise ContractViolationError("X contains non-finite entries")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ContractViolationError("labels out of range")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]


@dataclass
class SyntheticDatasetSpec:
    """Recipe for a reproducible gaussian-blob classification dataset."""

    n_classes: int = 200
    input_dim: int = 32
    samples_per_class: int = 50
    dispersion: float = 1.0
    noise_sigma: float = 0.1
    seed: int = 7

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigurationError("need at least 2 classes")
        if self.input_dim < 1 or self.samples_per_class < 1:
            raise ConfigurationError("dimensions and counts must be positive")
        if self.noise_sigma <= 0:
            raise ConfigurationError("noise_sigma must be positive")
        if self.dispersion <= 0:
            raise ConfigurationError("dispersion must be positive")


def generate_synthetic(spec: SyntheticDatasetSpec) -> Tuple[Dataset, Dataset]:
    """Create (train, test) splits, 80/20 per class, deterministic in seed.

    Class centers are drawn uniformly on the unit sphere and scaled by
    `dispersion`; samples add isotropic gaussian noise around the center.
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, _TAG_DATA]))
    centers = rng.normal(size=(spec.n_classes, spec.input_dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    centers *= spec.dispersion

    per = spec.samples_per_class
    n_train = per * 8 // 10
    train_X, train_y, test_X, test_y = [], [], [], []
    for c in range(spec.n_classes):
        samples = centers[c] + spec.noise_sigma * rng.normal(
            size=(per, spec.input_dim)
        )
        train_X.append(samples[:n_train])
        test_X.append(samples[n_train:])
        train_y.append(np.full(n_train, c, dtype=np.int64))
        test_y.append(np.full(per - n_train, c, dtype=np.int64))
    train = Dataset(
        X=np.concatenate(train_X), y=np.concatenate(train_y), n_classes=spec.n_classes
    )
    test = Dataset(
        X=np.concatenate(test_X), y=np.concatenate(test_y), n_classes=spec.n_classes
    )
    return train, test


def write_csv(dataset: Dataset, path) -> None:
    """Write `label,feat_0,...` rows; floats use shortest round-trip repr."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label"] + [f"feat_{i}" for i in range(dataset.input_dim)])
        for label, row in zip(dataset.y, dataset.X):
            writer.writerow([int(label)] + [repr(float(v)) for v in row])


def write_dataset_dir(
    train: Dataset, test: Dataset, out_dir, spec: Optional[SyntheticDatasetSpec] = None
) -> None:
    """Write train.csv, test.csv and a meta.json describing the pair."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(train, out / "train.csv")
    write_csv(test, out / "test.csv")
    meta = {
        "n_classes": train.n_classes,
        "input_dim": train.input_dim,
        "train_examples": len(train),
        "test_examples": len(test),
    }
    if spec is not None:
        meta["synthetic"] = {
            "n_classes": spec.n_classes,
            "input_dim": spec.input_dim,
            "samples_per_class": spec.samples_per_class,
            "dispersion": spec.dispersion,
            "noise_sigma": spec.noise_sigma,
            "seed": spec.seed,
        }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def _parse_row(tokens, n_features, row_num):
    if len(tokens) != n_features + 1:
        raise IngestionError(
            f"row {row_num}: expected {n_features + 1} fields, got {len(tokens)}"
        )
    feats = []
    for j, tok in enumerate(tokens[1:]):
        try:
            feats.append(float(tok))
        except ValueError:
            raise IngestionError(
                f"row {row_num}: non-numeric feature value {tok!r} (column {j + 1})"
            ) from None
    return tokens[0], feats


def ingest_csv(
    path, n_classes: Optional[int] = None, mapping: Optional[Dict[str, int]] = None
):
    """Load a dataset CSV; labels are densified to [0, n).

    Returns (dataset, mapping) where mapping sends original label strings
    to dense ids. Labels that all parse as integers are ordered
    numerically, otherwise lexically. Passing `n_classes` widens the label
    space beyond the labels present (they must fit the dense range).
    Passing `mapping` reuses a previous densification, so a test split
    shares ids with its train split; unseen labels are an error.
    """
    path = Path(path)
    rows = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        first = True
        n_features = None
        for row_num, tokens in enumerate(reader, start=1):
            if not tokens:
                continue
            if first:
                first = False
                # Header row: every feature field fails to parse as float.
                is_header = len(tokens) > 1 and all(
                    not _is_float(t) for t in tokens[1:]
                )
                n_features = len(tokens) - 1
                if is_header:
                    continue
            rows.append((row_num, *_parse_row(tokens, n_features, row_num)))
    if not rows:
        raise IngestionError("row 0: file contains no data rows")

    raw_labels = [label for _, label, _ in rows]
    uniques = sorted(set(raw_labels), key=_label_sort_key)
    if mapping is not None:
        unseen = [u for u in uniques if u not in mapping]
        if unseen:
            bad = next(r for r, label, _ in rows if label == unseen[0])
            raise IngestionError(
                f"row {bad}: label {unseen[0]!r} absent from the provided mapping"
            )
        if n_classes is None:
            n_classes = max(mapping.values()) + 1
    else:
        if len(uniques) < 2 and n_classes is None:
            raise IngestionError(
                f"row {rows[0][0]}: dataset contains a single class {uniques[0]!r}"
            )
        mapping = {label: i for i, label in enumerate(uniques)}
        if n_classes is None:
            n_classes = len(uniques)
        elif len(uniques) > n_classes:
            raise IngestionError(
                f"row {rows[0][0]}: {len(uniques)} labels exceed declared {n_classes}"
            )
    X = np.array([feats for _, _, feats in rows], dtype=np.float64)
    y = np.array([mapping[label] for _, label, _ in rows], dtype=np.int64)
    if not np.all(np.isfinite(X)):
        bad = int(np.where(~np.isfinite(X).all(axis=1))[0][0])
        raise IngestionError(f"row {rows[bad][0]}: non-finite feature value")
    return Dataset(X=X, y=y, n_classes=n_classes), mapping


def _is_float(tok: str) -> bool:
    try:
        float(tok)
        return True
    except ValueError:
        return False


def _label_sort_key(label: str):
    try:
        return (0, int(label), "")
    except ValueError:
        return (1, 0, label)


def save_label_mapping(mapping: Dict[str, int], path) -> None:
    Path(path).write_text(json.dumps(mapping, indent=2, sort_keys=True))
