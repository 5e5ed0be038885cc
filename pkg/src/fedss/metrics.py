"""Evaluation and diagnostics: accuracy, retrieval quality, collapse
scoring, gradient-noise curves, and communication-cost accounting.

Retrieval ranks by cosine similarity. On unit vectors the squared
euclidean distance is 2 - 2 cos, a strictly decreasing function of the
cosine, so ranking by descending cosine is identical to ranking by
ascending normalized-euclidean distance.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import Dataset
from .errors import (
    ConfigurationError,
    ContractViolationError,
    DegenerateInputError,
)
from .federation import (
    ClientDataset,
    FederationClient,
    RoundConfig,
    collect_round_updates,
    init_server_state,
    server_aggregate,
)
from .model import ModelParams, forward_features, logits_forward
from .numerics import l2_normalize


def embed(model: ModelParams, X, normalize: bool = True) -> np.ndarray:
    """Feature-extractor outputs for each row, unit-normalized by default."""
    X = np.asarray(X, dtype=np.float64)
    feats, _ = forward_features(model.phi, X)
    if feats.ndim == 1:
        feats = feats[None, :]
    if normalize:
        feats = np.stack([l2_normalize(row) for row in feats])
    return feats


def predict_logits(
    model: ModelParams, X, head: str = "cosine", scale: float = 20.0
) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    feats, _ = forward_features(model.phi, X)
    logits, _ = logits_forward(feats, model.classifier, head, scale)
    return logits


def top1_accuracy(
    model: ModelParams, dataset: Dataset, head: str = "cosine", scale: float = 20.0
) -> float:
    """Fraction of examples whose largest logit is the true class.

    np.argmax returns the first maximizer, so ties resolve to the lowest
    class id.
    """
    if len(dataset) == 0:
        raise DegenerateInputError("cannot evaluate accuracy on an empty dataset")
    logits = predict_logits(model, dataset.X, head, scale)
    pred = np.argmax(logits, axis=1)
    return float(np.mean(pred == dataset.y))


@dataclass
class RetrievalIndex:
    """Unit-norm embeddings paired with class ids for retrieval eval."""

    embeddings: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.embeddings.ndim != 2:
            raise ContractViolationError("embeddings must be 2-D")
        if self.embeddings.shape[0] != self.labels.shape[0]:
            raise ContractViolationError("embeddings and labels lengths differ")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if self.embeddings.shape[0] and np.max(np.abs(norms - 1.0)) > 1e-9:
            raise ContractViolationError("embeddings must be unit-norm within 1e-9")

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    @classmethod
    def from_model(cls, model: ModelParams, dataset: Dataset) -> "RetrievalIndex":
        return cls(embeddings=embed(model, dataset.X, normalize=True), labels=dataset.y)


def average_precision_at_r(matches) -> float:
    """Mean of P(i) over ranks 1..R; P(i) is precision at i when the i-th
    neighbor matches, else 0."""
    matches = np.asarray(matches, dtype=bool)
    if matches.size == 0:
        raise ContractViolationError("need at least one ranked neighbor")
    ranks = np.arange(1, matches.size + 1)
    precision = np.cumsum(matches) / ranks
    return float(np.sum(precision * matches) / matches.size)


def map_at_r(index: RetrievalIndex, R: int) -> float:
    """Mean average precision at R over every item querying all others.

    Neighbors are ordered by descending cosine similarity, ties broken by
    lowest item index; the query itself is excluded.
    """
    R = int(R)
    if R < 1:
        raise ContractViolationError("R must be >= 1")
    n = len(index)
    if n < R + 1:
        raise ContractViolationError(f"need more than {R} items, have {n}")
    sims = index.embeddings @ index.embeddings.T
    idx = np.arange(n)
    scores = []
    for i in range(n):
        order = np.lexsort((idx, -sims[i]))
        order = order[order != i]
        top = order[:R]
        scores.append(average_precision_at_r(index.labels[top] == index.labels[i]))
    return float(np.mean(scores))


def client_confusion_matrix(
    model: ModelParams,
    client_data: ClientDataset,
    head: str = "cosine",
    scale: float = 20.0,
) -> np.ndarray:
    """Counts over the client's own classes with predictions restricted to
    those classes' columns. Rows are true classes in sorted label order,
    columns predicted; row sums equal per-class example counts."""
    positives = client_data.positives
    if positives.size < 1:
        raise DegenerateInputError("client has no classes")
    sub_model = ModelParams(
        phi=model.phi, classifier=model.classifier[:, positives]
    )
    logits = predict_logits(sub_model, client_data.X, head, scale)
    pred_pos = np.argmax(logits, axis=1)
    true_pos = np.searchsorted(positives, client_data.y)
    p = positives.size
    matrix = np.zeros((p, p), dtype=np.int64)
    np.add.at(matrix, (true_pos, pred_pos), 1)
    return matrix


def column_concentration(matrix) -> float:
    """Largest single-column share of all predictions."""
    matrix = np.asarray(matrix, dtype=np.float64)
    total = matrix.sum()
    if total <= 0:
        raise DegenerateInputError("empty confusion matrix")
    return float(matrix.sum(axis=0).max() / total)


def diagonal_fraction(matrix) -> float:
    """Share of predictions landing on the true class."""
    matrix = np.asarray(matrix, dtype=np.float64)
    total = matrix.sum()
    if total <= 0:
        raise DegenerateInputError("empty confusion matrix")
    return float(np.trace(matrix) / total)


def collapse_score(W, labels) -> float:
    """Mean pairwise cosine similarity among the selected class vectors.

    Near 1 means the vectors point the same way, the degenerate geometry
    where one direction serves every local class.
    """
    W = np.asarray(W, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size < 2:
        raise DegenerateInputError("collapse score needs at least two classes")
    if np.unique(labels).size != labels.size:
        raise ContractViolationError("labels must be distinct")
    cols = W[:, labels]
    units = np.stack([l2_normalize(cols[:, j]) for j in range(labels.size)], axis=1)
    gram = units.T @ units
    p = labels.size
    off_diag_sum = float(gram.sum() - np.trace(gram))
    return off_diag_sum / (p * (p - 1))


@dataclass
class NoiseCurvePoint:
    """Mean aggregated-delta discrepancy at one negative-sample count."""

    m: int
    noise: float
    replicates: int
    std: float = 0.0
    l2: float = 0.0

    def __post_init__(self):
        if self.m < 0:
            raise ContractViolationError("m must be non-negative")
        if self.noise < 0:
            raise ContractViolationError("noise must be non-negative")
        if self.replicates < 30:
            raise ContractViolationError("need at least 30 replicates")


def _delta_coordinates(delta) -> np.ndarray:
    parts = [dw.ravel() for pair in delta.layers for dw in pair]
    parts.append(delta.classifier.ravel())
    return np.concatenate(parts)


def gradient_noise(
    model: ModelParams,
    batch: Dataset,
    m: int,
    clients: int = 8,
    replicates: int = 64,
    seed: int = 0,
    lr: float = 0.01,
    head: str = "cosine",
    scale: float = 20.0,
) -> NoiseCurvePoint:
    """Expected coordinate-wise |difference| between the aggregated round
    delta under the full softmax and under sampled negatives.

    Every replicate runs one synchronous round in which all `clients`
    clients hold the same batch: once with every class served, once with
    each client independently sampling m negatives. Both arms share the
    minibatch shuffle streams, so at m equal to the whole complement pool
    the two rounds perform bit-identical arithmetic and the noise is
    exactly zero.
    """
    if len(batch) == 0:
        raise DegenerateInputError("batch must be nonempty")
    if replicates < 30:
        raise ConfigurationError("need at least 30 replicates")
    if clients < 1:
        raise ConfigurationError("clients must be >= 1")
    n = model.n_classes
    positives = np.unique(batch.y)
    pool = n - positives.size
    if not 1 <= m <= pool:
        raise ConfigurationError(f"m must be in [1, {pool}], got {m}")

    shards = [
        FederationClient(cid, ClientDataset(X=batch.X, y=batch.y, client_id=cid))
        for cid in range(clients)
    ]
    common = dict(
        clients_per_round=clients,
        local_epochs=1,
        client_lr=lr,
        server_lr=1.0,
        server_momentum=0.0,
        batch_size=len(batch),
        seed=seed,
        head=head,
        scale=scale,
    )
    cfg_full = RoundConfig(method="fullsoftmax", target_s_size=n, **common)
    cfg_sampled = RoundConfig(
        method="fedss", target_s_size=positives.size + m, **common
    )
    state = init_server_state(model)
    chosen = list(range(clients))
    abs_means = np.empty(replicates)
    l2_norms = np.empty(replicates)
    for rep in range(replicates):
        full = server_aggregate(
            [u for _, u in collect_round_updates(state, shards, chosen, cfg_full, rep)],
            n,
        )
        sampled = server_aggregate(
            [
                u
                for _, u in collect_round_updates(
                    state, shards, chosen, cfg_sampled, rep
                )
            ],
            n,
        )
        diff = _delta_coordinates(full) - _delta_coordinates(sampled)
        abs_means[rep] = np.mean(np.abs(diff))
        l2_norms[rep] = np.linalg.norm(diff)
    return NoiseCurvePoint(
        m=m,
        noise=float(np.mean(abs_means)),
        replicates=replicates,
        std=float(np.std(abs_means)),
        l2=float(np.mean(l2_norms)),
    )


def noise_curve(
    model: ModelParams,
    batch: Dataset,
    ms: Sequence[int],
    clients: int = 8,
    replicates: int = 64,
    seed: int = 0,
    lr: float = 0.01,
    head: str = "cosine",
    scale: float = 20.0,
) -> List[NoiseCurvePoint]:
    return [
        gradient_noise(
            model,
            batch,
            m=int(m),
            clients=clients,
            replicates=replicates,
            seed=seed,
            lr=lr,
            head=head,
            scale=scale,
        )
        for m in ms
    ]


def write_noise_csv(path, points: Sequence[NoiseCurvePoint]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["m", "mean", "std", "replicates"])
        for p in points:
            writer.writerow([p.m, repr(p.noise), repr(p.std), p.replicates])


def comm_cost_report(
    phi_params: int,
    embedding_dim: int,
    n_classes: int,
    s_size: int,
    rounds: int = 1,
    clients_per_round: int = 1,
    n_grid: Optional[Sequence[int]] = None,
    d_grid: Optional[Sequence[int]] = None,
) -> Dict:
    """Per-round transfer accounting at 8 bytes/parameter, 4 bytes/label id.

    A participating client downloads the extractor plus its requested
    classifier columns (phi_params + embedding_dim * s_size parameters)
    and uploads deltas of the same shape plus the label ids of its
    request. The report also tabulates how the classifier's share of the
    full model grows with the label-space size and embedding width.
    """
    for name, v in (
        ("phi_params", phi_params),
        ("embedding_dim", embedding_dim),
        ("n_classes", n_classes),
        ("s_size", s_size),
        ("rounds", rounds),
        ("clients_per_round", clients_per_round),
    ):
        if int(v) < 1:
            raise ConfigurationError(f"{name} must be >= 1")
    if s_size > n_classes:
        raise ConfigurationError("s_size cannot exceed n_classes")
    phi_params = int(phi_params)
    d = int(embedding_dim)
    n = int(n_classes)
    s = int(s_size)
    full_params = phi_params + d * n
    down_params = phi_params + d * s
    bytes_per_param = 8
    bytes_per_label = 4
    if n_grid is None:
        n_grid = [1_000, 2_000, 5_000, 10_000, 11_318, 20_000, 50_000]
    if d_grid is None:
        d_grid = [16, 32, 64, 128, 256]
    curve = [
        {
            "n": int(ng),
            "d": int(dg),
            "classifier_fraction": (dg * ng) / (phi_params + dg * ng),
        }
        for dg in d_grid
        for ng in n_grid
    ]
    return {
        "phi_params": phi_params,
        "embedding_dim": d,
        "n_classes": n,
        "s_size": s,
        "full_model_params": full_params,
        "download_params_per_client_round": down_params,
        "upload_params_per_client_round": down_params,
        "download_bytes_per_client_round": bytes_per_param * down_params,
        "upload_bytes_per_client_round": bytes_per_param * down_params
        + bytes_per_label * s,
        "label_bytes_up_per_client_round": bytes_per_label * s,
        "classifier_fraction": (d * n) / full_params,
        "transmitted_fraction": down_params / full_params,
        "rounds": int(rounds),
        "clients_per_round": int(clients_per_round),
        "total_download_bytes": int(rounds)
        * int(clients_per_round)
        * bytes_per_param
        * down_params,
        "total_upload_bytes": int(rounds)
        * int(clients_per_round)
        * (bytes_per_param * down_params + bytes_per_label * s),
        "fraction_curve": curve,
    }
