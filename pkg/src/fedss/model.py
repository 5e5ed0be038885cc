"""Two-part classifier: MLP feature extractor plus a class-vector matrix.

The classifier matrix ``W`` has shape ``(embedding_dim, n_classes)`` with
one column per class. Clients only ever see a column subset, so slicing
columns out and scattering column deltas back into the full shape are the
central bookkeeping operations. Logits come from either a scaled-cosine
head (the default) or a plain dot-product head.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

import numpy as np

from .errors import ContractViolationError, DegenerateInputError
from .numerics import (
    NORM_EPS,
    affine_backward,
    affine_forward,
    as_matrix,
    relu_backward,
    relu_forward,
)

CHECKPOINT_FORMAT = "fedss-model"
CHECKPOINT_VERSION = 1

HEADS = ("cosine", "dot")

Layer = Tuple[np.ndarray, np.ndarray]


@dataclass
class ModelConfig:
    """Architecture and logit-head settings."""

    input_dim: int = 32
    hidden_dims: Tuple[int, ...] = (64,)
    embedding_dim: int = 16
    n_classes: int = 200
    head: str = "cosine"
    scale: float = 20.0

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if self.input_dim < 1 or self.embedding_dim < 1:
            raise ContractViolationError("dimensions must be positive")
        if self.n_classes < 1:
            raise ContractViolationError("n_classes must be positive")
        if any(h < 1 for h in self.hidden_dims):
            raise ContractViolationError("hidden dims must be positive")
        if self.head not in HEADS:
            raise ContractViolationError(f"unknown head {self.head!r}")
        if self.scale <= 0:
            raise ContractViolationError("scale must be positive")


@dataclass
class FeatureExtractor:
    """Ordered affine layers with ReLU between them (none after the last).

    An empty layer list is the identity extractor, in which case
    embedding_dim == input_dim.
    """

    layers: List[Layer]
    input_dim: int
    embedding_dim: int

    def __post_init__(self):
        dims = [self.input_dim] + [w.shape[1] for w, _ in self.layers]
        for i, (w, b) in enumerate(self.layers):
            as_matrix(w, f"layer {i} weight")
            if w.shape[0] != dims[i]:
                raise ContractViolationError(
                    f"layer {i} fan-in {w.shape[0]} does not chain with {dims[i]}"
                )
            if b.shape != (w.shape[1],):
                raise ContractViolationError(f"layer {i} bias shape {b.shape}")
        if dims[-1] != self.embedding_dim:
            raise ContractViolationError(
                f"final layer width {dims[-1]} != embedding_dim {self.embedding_dim}"
            )

    def copy(self) -> "FeatureExtractor":
        return FeatureExtractor(
            layers=[(w.copy(), b.copy()) for w, b in self.layers],
            input_dim=self.input_dim,
            embedding_dim=self.embedding_dim,
        )


@dataclass
class ModelParams:
    """Full model state: feature extractor plus classifier matrix."""

    phi: FeatureExtractor
    classifier: np.ndarray  # (embedding_dim, n_classes)

    def __post_init__(self):
        self.classifier = as_matrix(self.classifier, "classifier")
        if self.classifier.shape[0] != self.phi.embedding_dim:
            raise ContractViolationError(
                "classifier rows do not match extractor embedding_dim"
            )

    @property
    def n_classes(self) -> int:
        return self.classifier.shape[1]

    @property
    def embedding_dim(self) -> int:
        return self.classifier.shape[0]

    def copy(self) -> "ModelParams":
        return ModelParams(phi=self.phi.copy(), classifier=self.classifier.copy())


@dataclass
class SubNetwork:
    """The unit shipped to a client: extractor, sliced columns, label order."""

    phi: FeatureExtractor
    W_S: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.labels = _check_labels(self.labels, n=None)
        self.W_S = as_matrix(self.W_S, "W_S")
        if self.W_S.shape[1] != self.labels.size:
            raise ContractViolationError("label count does not match W_S columns")


def _check_labels(labels, n) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ContractViolationError("labels must be a 1-D sequence")
    if labels.size and not np.issubdtype(labels.dtype, np.integer):
        raise ContractViolationError("labels must be integers")
    labels = labels.astype(np.int64)
    if np.unique(labels).size != labels.size:
        raise ContractViolationError("labels must be distinct")
    if labels.size and labels.min() < 0:
        raise ContractViolationError("labels must be non-negative")
    if n is not None and labels.size and labels.max() >= n:
        raise ContractViolationError(f"label {labels.max()} out of range [0, {n})")
    return labels


def init_model(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """He-initialized MLP plus a gaussian classifier matrix."""
    dims = [config.input_dim, *config.hidden_dims, config.embedding_dim]
    layers: List[Layer] = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        b = np.zeros(fan_out)
        layers.append((w, b))
    phi = FeatureExtractor(
        layers=layers, input_dim=config.input_dim, embedding_dim=config.embedding_dim
    )
    W = rng.normal(
        0.0,
        1.0 / np.sqrt(config.embedding_dim),
        size=(config.embedding_dim, config.n_classes),
    )
    return ModelParams(phi=phi, classifier=W)


def identity_extractor(dim: int) -> FeatureExtractor:
    """Zero-depth extractor: the embedding is the input itself."""
    return FeatureExtractor(layers=[], input_dim=dim, embedding_dim=dim)


def forward_features(phi: FeatureExtractor, x):
    """Run the extractor; returns (embedding, cache) with cached activations."""
    x = np.asarray(x, dtype=np.float64)
    expected = phi.input_dim
    if (x.ndim == 1 and x.shape[0] != expected) or (
        x.ndim == 2 and x.shape[1] != expected
    ):
        raise ContractViolationError(
            f"input shape {x.shape} does not match input_dim {expected}"
        )
    h = x
    steps = []
    last = len(phi.layers) - 1
    for i, (w, b) in enumerate(phi.layers):
        h, ac = affine_forward(h, w, b)
        steps.append(("affine", ac))
        if i != last:
            h, rc = relu_forward(h)
            steps.append(("relu", rc))
    return h, steps


def features_backward(phi: FeatureExtractor, cache, grad_out):
    """Backward through the extractor.

    Returns (grad_layers, grad_x) where grad_layers is a list of
    (grad_w, grad_b) aligned with phi.layers.
    """
    grad = np.asarray(grad_out, dtype=np.float64)
    grad_layers: List[Layer] = []
    for kind, step_cache in reversed(cache):
        if kind == "relu":
            grad = relu_backward(grad, step_cache)
        else:
            grad, gw, gb = affine_backward(grad, step_cache)
            grad_layers.append((gw, gb))
    grad_layers.reverse()
    if len(grad_layers) != len(phi.layers):
        raise ContractViolationError("cache does not match extractor depth")
    return grad_layers, grad


def cosine_logits(f, W_S, scale: float):
    """Scaled cosine similarity logits: o_j = scale * <f/|f|, w_j/|w_j|>.

    Accepts a single embedding (d,) or a batch (B, d). Returns
    (logits, cache). Cosines are clipped into [-1, 1] so |o_j| <= scale;
    the clip only trims float excess and is treated as identity in the
    backward pass.
    """
    if scale <= 0:
        raise ContractViolationError("scale must be positive")
    W_S = as_matrix(W_S, "W_S")
    f = np.asarray(f, dtype=np.float64)
    single = f.ndim == 1
    F = np.atleast_2d(f)
    if F.shape[1] != W_S.shape[0]:
        raise ContractViolationError(
            f"feature dim {F.shape[1]} does not match W_S rows {W_S.shape[0]}"
        )
    fn = np.linalg.norm(F, axis=1)
    if np.any(fn <= NORM_EPS):
        raise DegenerateInputError("feature vector has vanishing norm")
    cn = np.linalg.norm(W_S, axis=0)
    if np.any(cn <= NORM_EPS):
        raise DegenerateInputError("classifier column has vanishing norm")
    Fn = F / fn[:, None]
    Wn = W_S / cn[None, :]
    logits = scale * np.clip(Fn @ Wn, -1.0, 1.0)
    cache = (Fn, fn, Wn, cn, scale, single)
    return (logits[0] if single else logits), cache


def cosine_logits_backward(cache, grad_out):
    """Returns (grad_f, grad_W_S) for the cached cosine forward."""
    Fn, fn, Wn, cn, scale, single = cache
    G = scale * np.atleast_2d(np.asarray(grad_out, dtype=np.float64))
    if G.shape != (Fn.shape[0], Wn.shape[1]):
        raise ContractViolationError("grad_out shape does not match forward cache")
    grad_Fn = G @ Wn.T
    grad_Wn = Fn.T @ G
    # Row-wise unit-norm backward for features.
    dot_f = np.sum(grad_Fn * Fn, axis=1, keepdims=True)
    grad_F = (grad_Fn - Fn * dot_f) / fn[:, None]
    # Column-wise unit-norm backward for class vectors.
    dot_w = np.sum(grad_Wn * Wn, axis=0, keepdims=True)
    grad_W = (grad_Wn - Wn * dot_w) / cn[None, :]
    return (grad_F[0] if single else grad_F), grad_W


def dot_logits(f, W_S):
    """Raw dot-product logits o_j = <f, w_j>."""
    W_S = as_matrix(W_S, "W_S")
    f = np.asarray(f, dtype=np.float64)
    single = f.ndim == 1
    F = np.atleast_2d(f)
    if F.shape[1] != W_S.shape[0]:
        raise ContractViolationError(
            f"feature dim {F.shape[1]} does not match W_S rows {W_S.shape[0]}"
        )
    cache = (F, W_S, single)
    out = F @ W_S
    return (out[0] if single else out), cache


def dot_logits_backward(cache, grad_out):
    F, W_S, single = cache
    G = np.atleast_2d(np.asarray(grad_out, dtype=np.float64))
    if G.shape != (F.shape[0], W_S.shape[1]):
        raise ContractViolationError("grad_out shape does not match forward cache")
    grad_F = G @ W_S.T
    grad_W = F.T @ G
    return (grad_F[0] if single else grad_F), grad_W


def logits_forward(f, W_S, head: str, scale: float):
    if head == "cosine":
        return cosine_logits(f, W_S, scale)
    if head == "dot":
        return dot_logits(f, W_S)
    raise ContractViolationError(f"unknown head {head!r}")


def logits_backward(head: str, cache, grad_out):
    if head == "cosine":
        return cosine_logits_backward(cache, grad_out)
    if head == "dot":
        return dot_logits_backward(cache, grad_out)
    raise ContractViolationError(f"unknown head {head!r}")


def slice_columns(W, labels) -> np.ndarray:
    """Copy out the columns of W named by `labels`, in that order."""
    W = as_matrix(W, "W")
    labels = _check_labels(labels, n=W.shape[1])
    return W[:, labels]


def scatter_delta(delta_W_S, labels, n_classes: int) -> np.ndarray:
    """Place sub-network column deltas into a full-width zero matrix."""
    delta_W_S = as_matrix(delta_W_S, "delta_W_S")
    labels = _check_labels(labels, n=n_classes)
    if labels.size != delta_W_S.shape[1]:
        raise ContractViolationError("label count does not match delta columns")
    out = np.zeros((delta_W_S.shape[0], n_classes))
    out[:, labels] = delta_W_S
    return out


def parameter_count(obj) -> int:
    """Exact number of scalar parameters in an extractor, array or model."""
    if isinstance(obj, ModelParams):
        return parameter_count(obj.phi) + obj.classifier.size
    if isinstance(obj, FeatureExtractor):
        return int(sum(w.size + b.size for w, b in obj.layers))
    if isinstance(obj, SubNetwork):
        return parameter_count(obj.phi) + obj.W_S.size
    if isinstance(obj, np.ndarray):
        return int(obj.size)
    raise ContractViolationError(f"cannot count parameters of {type(obj).__name__}")


def save_checkpoint(path, model: ModelParams, config: ModelConfig) -> None:
    """Write a versioned JSON checkpoint (format documented in the README)."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": {
            "input_dim": config.input_dim,
            "hidden_dims": list(config.hidden_dims),
            "embedding_dim": config.embedding_dim,
            "n_classes": config.n_classes,
            "head": config.head,
            "scale": config.scale,
        },
        "layers": [
            {"weight": w.tolist(), "bias": b.tolist()} for w, b in model.phi.layers
        ],
        "classifier": model.classifier.tolist(),
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_checkpoint(path):
    """Read a checkpoint written by save_checkpoint; returns (model, config)."""
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ContractViolationError("not a model checkpoint file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ContractViolationError(
            f"unsupported checkpoint version {payload.get('version')!r}"
        )
    cfg = payload["config"]
    config = ModelConfig(
        input_dim=cfg["input_dim"],
        hidden_dims=tuple(cfg["hidden_dims"]),
        embedding_dim=cfg["embedding_dim"],
        n_classes=cfg["n_classes"],
        head=cfg["head"],
        scale=cfg["scale"],
    )
    layers = [
        (np.asarray(l["weight"], dtype=np.float64), np.asarray(l["bias"], dtype=np.float64))
        for l in payload["layers"]
    ]
    phi = FeatureExtractor(
        layers=layers, input_dim=config.input_dim, embedding_dim=config.embedding_dim
    )
    W = np.asarray(payload["classifier"], dtype=np.float64)
    model = ModelParams(phi=phi, classifier=W)
    if model.n_classes != config.n_classes:
        raise ContractViolationError("checkpoint classifier width mismatch")
    return model, config
