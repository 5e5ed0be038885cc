"""Round-based federated training over sub-networks.

One round: select clients, each client samples negative classes and
requests the sub-network for its label set, trains it locally with SGD on
its configured objective, and returns parameter deltas. The server
aggregates deltas weighted by example counts (classifier deltas scattered
back to full width) and applies them with classical momentum.

The server only ever sees label sets; client examples and the
positive/negative split never cross the request boundary.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .data import Dataset
from .errors import (
    ConfigurationError,
    ContractViolationError,
    ProtocolViolationError,
)
from .losses import minibatch_loss_and_grad, objective_for_method
from .model import (
    FeatureExtractor,
    ModelParams,
    SubNetwork,
    logits_backward,
    logits_forward,
    forward_features,
    features_backward,
    parameter_count,
    scatter_delta,
    slice_columns,
)

METHODS = (
    "fedss",
    "negonly",
    "negonly_matched",
    "posonly",
    "fedaws",
    "fullsoftmax",
)

BYTES_PER_PARAM = 8
BYTES_PER_LABEL = 4

# Disjoint stream tags so e.g. negative sampling never perturbs the
# minibatch shuffle; full-softmax and sampled rounds then consume
# identical shuffle streams, which the gradient-noise analysis relies on.
_TAG_SELECT = 101
_TAG_NEGATIVES = 102
_TAG_SHUFFLE = 103
_TAG_INIT = 104
_TAG_PARTITION = 106
_TAG_CENTRALIZED = 108


def stream(*keys: int) -> np.random.Generator:
    """Independent, reproducible generator for a tuple of integer keys."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def init_rng(seed: int) -> np.random.Generator:
    """Generator for model initialization under a run seed."""
    return stream(seed, _TAG_INIT)


@dataclass
class ClientDataset:
    """One client's local shard: examples plus the derived label set."""

    X: np.ndarray
    y: np.ndarray
    client_id: int

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.y) == 0:
            raise ContractViolationError("client dataset must be nonempty")
        if self.X.shape[0] != self.y.shape[0]:
            raise ContractViolationError("X and y lengths differ")

    @property
    def positives(self) -> np.ndarray:
        """Sorted distinct labels present in the local data."""
        return np.unique(self.y)

    @property
    def num_examples(self) -> int:
        return int(self.y.shape[0])


@dataclass(frozen=True)
class ModelRequest:
    """The only client-to-server message before training: a label set."""

    labels: np.ndarray


@dataclass
class ClientUpdate:
    """Parameter deltas over the requested sub-network."""

    delta_layers: List[Tuple[np.ndarray, np.ndarray]]
    delta_classifier: np.ndarray
    labels: np.ndarray
    num_examples: int
    transmitted_parameter_count: int
    mean_loss: float

    def __post_init__(self):
        if self.delta_classifier.shape[1] != self.labels.size:
            raise ContractViolationError("delta columns do not match labels")
        flats = [self.delta_classifier] + [a for pair in self.delta_layers for a in pair]
        if not all(np.all(np.isfinite(a)) for a in flats):
            raise ContractViolationError("update contains non-finite entries")


@dataclass
class RoundConfig:
    """Knobs for one federated run."""

    method: str = "fedss"
    clients_per_round: int = 8
    local_epochs: int = 1
    client_lr: float = 0.01
    server_lr: float = 1.0
    server_momentum: float = 0.9
    target_s_size: int = 20
    batch_size: int = 32
    seed: int = 0
    head: str = "cosine"
    scale: float = 20.0
    client_parallelism: int = 1
    spreadout_weight: float = 0.1
    spreadout_margin: float = 1.0
    spreadout_after_momentum: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}")
        if self.clients_per_round < 1:
            raise ConfigurationError("clients_per_round must be >= 1")
        if self.local_epochs < 1:
            raise ConfigurationError("local_epochs must be >= 1")
        if self.client_lr < 0 or self.server_lr <= 0:
            raise ConfigurationError("learning rates must be positive")
        if not 0.0 <= self.server_momentum < 1.0:
            raise ConfigurationError("server_momentum must be in [0, 1)")
        if self.target_s_size < 1:
            raise ConfigurationError("target_s_size must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.seed < 0:
            raise ConfigurationError("seed must be non-negative")
        if self.head not in ("cosine", "dot"):
            raise ConfigurationError(f"unknown head {self.head!r}")
        if self.head == "cosine" and self.scale <= 0:
            raise ConfigurationError("scale must be positive")
        if self.client_parallelism < 1:
            raise ConfigurationError("client_parallelism must be >= 1")


@dataclass
class ServerState:
    """Global model plus momentum buffers; advanced once per round."""

    model: ModelParams
    velocity_layers: List[Tuple[np.ndarray, np.ndarray]]
    velocity_classifier: np.ndarray
    round_index: int = 0


@dataclass
class AggregatedDelta:
    layers: List[Tuple[np.ndarray, np.ndarray]]
    classifier: np.ndarray


@dataclass
class RoundMetrics:
    """What one round produced, free of anything wall-clock dependent."""

    round_index: int
    method: str
    client_ids: Tuple[int, ...]
    mean_loss: float
    mean_s_size: float
    params_down: int
    params_up: int
    bytes_down: int
    bytes_up: int
    eval_top1: Optional[float] = None


def init_server_state(model: ModelParams) -> ServerState:
    return ServerState(
        model=model.copy(),
        velocity_layers=[
            (np.zeros_like(w), np.zeros_like(b)) for w, b in model.phi.layers
        ],
        velocity_classifier=np.zeros_like(model.classifier),
        round_index=0,
    )


class FederationServer:
    """Serves sub-networks by label set and applies aggregated deltas."""

    def __init__(self, state: ServerState):
        self.state = state

    def handle_model_request(self, labels) -> SubNetwork:
        """Slice the requested columns; the label set is all the server sees."""
        model = self.state.model
        return SubNetwork(
            phi=model.phi.copy(),
            W_S=slice_columns(model.classifier, labels),
            labels=np.asarray(labels, dtype=np.int64),
        )


def sample_negatives(
    positives, n_classes: int, m: int, rng: np.random.Generator
) -> np.ndarray:
    """Uniformly sample m distinct labels from the complement of `positives`."""
    positives = np.asarray(positives, dtype=np.int64)
    pool = np.setdiff1d(np.arange(n_classes, dtype=np.int64), positives)
    if not 0 <= m <= pool.size:
        raise ConfigurationError(
            f"cannot sample {m} negatives from a pool of {pool.size}"
        )
    if m == 0:
        return np.empty(0, dtype=np.int64)
    idx = rng.choice(pool.size, size=m, replace=False)
    return np.sort(pool[idx])


def negative_count(method: str, num_positives: int, pool: int, target_s_size: int) -> int:
    """How many negatives a client samples under each method."""
    if method in ("posonly", "fedaws"):
        return 0
    if method == "fullsoftmax":
        return pool
    m = max(0, target_s_size - num_positives)
    if method == "negonly_matched":
        # Matched-count ablation: replace the pushing force of the local
        # positives with the same number of extra off-client negatives.
        m += max(0, num_positives - 1)
    return min(m, pool)


class FederationClient:
    """Owns a local shard; builds requests and runs local optimization."""

    def __init__(self, client_id: int, dataset: ClientDataset):
        self.client_id = client_id
        self.dataset = dataset

    def build_request(
        self, n_classes: int, method: str, target_s_size: int, rng: np.random.Generator
    ) -> ModelRequest:
        """Assemble the label set S = positives plus sampled negatives.

        The set is sent in sorted order, which carries no information
        about which members are the client's own classes.
        """
        positives = self.dataset.positives
        if method == "fullsoftmax":
            return ModelRequest(labels=np.arange(n_classes, dtype=np.int64))
        pool = n_classes - positives.size
        m = negative_count(method, positives.size, pool, target_s_size)
        negatives = sample_negatives(positives, n_classes, m, rng)
        return ModelRequest(labels=np.sort(np.concatenate([positives, negatives])))

    def local_train(
        self,
        sub: SubNetwork,
        n_classes: int,
        method: str,
        config: RoundConfig,
        rng: np.random.Generator,
    ) -> ClientUpdate:
        return client_local_train(sub, self.dataset, n_classes, method, config, rng)


def client_local_train(
    sub: SubNetwork,
    dataset: ClientDataset,
    n_classes: int,
    method: str,
    config: RoundConfig,
    rng: np.random.Generator,
) -> ClientUpdate:
    """Minibatch SGD on the client objective; returns final minus initial.

    The received sub-network is left untouched; training happens on
    copies. Negatives get the log(m q) importance correction with
    q = 1/(n - |positives|), i.e. uniform over the sampling pool.
    """
    labels = sub.labels
    positives = dataset.positives
    pos_set = np.isin(labels, positives)
    present = np.isin(positives, labels)
    if not np.all(present):
        missing = positives[~present]
        raise ProtocolViolationError(
            f"client labels {missing.tolist()} absent from the sub-network"
        )
    position_of = {int(lab): i for i, lab in enumerate(labels)}
    targets_all = np.array([position_of[int(t)] for t in dataset.y], dtype=np.int64)

    pool = n_classes - positives.size
    m = int((~pos_set).sum())
    adjustments = np.zeros(labels.size)
    if m > 0:
        adjustments[~pos_set] = np.log(m * (1.0 / pool))

    objective = objective_for_method(method)
    phi = sub.phi.copy()
    W_local = sub.W_S.copy()
    lr = config.client_lr

    loss_sum = 0.0
    loss_count = 0
    n_k = dataset.num_examples
    for _ in range(config.local_epochs):
        order = rng.permutation(n_k)
        for start in range(0, n_k, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = dataset.X[idx]
            tb = targets_all[idx]
            feats, f_cache = forward_features(phi, xb)
            logits, l_cache = logits_forward(feats, W_local, config.head, config.scale)
            values, grads = minibatch_loss_and_grad(
                logits, tb, pos_set, adjustments, objective
            )
            loss_sum += float(values.sum())
            loss_count += len(idx)
            grads /= len(idx)
            grad_f, grad_W = logits_backward(config.head, l_cache, grads)
            grad_layers, _ = features_backward(phi, f_cache, grad_f)
            W_local -= lr * grad_W
            for (w, b), (gw, gb) in zip(phi.layers, grad_layers):
                w -= lr * gw
                b -= lr * gb

    delta_layers = [
        (w - w0, b - b0) for (w, b), (w0, b0) in zip(phi.layers, sub.phi.layers)
    ]
    delta_classifier = W_local - sub.W_S
    return ClientUpdate(
        delta_layers=delta_layers,
        delta_classifier=delta_classifier,
        labels=labels,
        num_examples=n_k,
        transmitted_parameter_count=parameter_count(sub),
        mean_loss=loss_sum / loss_count,
    )


def server_aggregate(updates: Sequence[ClientUpdate], n_classes: int) -> AggregatedDelta:
    """Example-count weighted mean of updates, classifier scattered to d x n."""
    if not updates:
        raise ContractViolationError("cannot aggregate an empty update list")
    total = sum(u.num_examples for u in updates)
    weights = [u.num_examples / total for u in updates]
    if abs(sum(weights) - 1.0) > 1e-12:
        raise ContractViolationError("aggregation weights failed to normalize")
    layers = [
        (np.zeros_like(w), np.zeros_like(b)) for w, b in updates[0].delta_layers
    ]
    d = updates[0].delta_classifier.shape[0]
    classifier = np.zeros((d, n_classes))
    for weight, update in zip(weights, updates):
        if len(update.delta_layers) != len(layers):
            raise ContractViolationError("update layer structure mismatch")
        for (aw, ab), (dw, db) in zip(layers, update.delta_layers):
            aw += weight * dw
            ab += weight * db
        classifier += weight * scatter_delta(
            update.delta_classifier, update.labels, n_classes
        )
    return AggregatedDelta(layers=layers, classifier=classifier)


def server_apply(
    state: ServerState, delta: AggregatedDelta, lr: float, momentum: float
) -> ServerState:
    """Classical momentum over aggregated deltas: v <- mu v + g,
    theta <- theta + lr v.

    Deltas are final-minus-initial client changes, i.e. they already
    point downhill, so they are applied additively: with mu=0 and lr=1
    one step is exactly the example-weighted average of the client
    results (the FedAvg update).
    """
    new_vel_layers = []
    new_layers = []
    for (w, b), (vw, vb), (gw, gb) in zip(
        state.model.phi.layers, state.velocity_layers, delta.layers
    ):
        nvw = momentum * vw + gw
        nvb = momentum * vb + gb
        new_vel_layers.append((nvw, nvb))
        new_layers.append((w + lr * nvw, b + lr * nvb))
    nvc = momentum * state.velocity_classifier + delta.classifier
    phi = FeatureExtractor(
        layers=new_layers,
        input_dim=state.model.phi.input_dim,
        embedding_dim=state.model.phi.embedding_dim,
    )
    model = ModelParams(phi=phi, classifier=state.model.classifier + lr * nvc)
    return ServerState(
        model=model,
        velocity_layers=new_vel_layers,
        velocity_classifier=nvc,
        round_index=state.round_index + 1,
    )


def spreadout_regularizer(W, margin: float) -> float:
    """Sum over ordered column pairs of max(0, margin - ||w_i - w_j||)^2."""
    W = np.asarray(W, dtype=np.float64)
    gram = W.T @ W
    sq = np.diag(gram)
    dist2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * gram, 0.0)
    dist = np.sqrt(dist2)
    hinge = np.maximum(0.0, margin - dist)
    np.fill_diagonal(hinge, 0.0)
    return float(np.sum(hinge**2))


def fedaws_spreadout_step(W, weight: float, margin: float) -> np.ndarray:
    """One gradient step pushing near-coincident class vectors apart.

    Exactly coincident columns have no distance gradient; those pairs get
    a deterministic axis-aligned push so symmetric copies still separate.
    """
    W = np.asarray(W, dtype=np.float64)
    d, n = W.shape
    gram = W.T @ W
    sq = np.diag(gram)
    dist2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * gram, 0.0)
    dist = np.sqrt(dist2)
    hinge = np.maximum(0.0, margin - dist)
    np.fill_diagonal(hinge, 0.0)

    tiny = 1e-15
    separated = dist > tiny
    coef = np.where(separated, -4.0 * hinge / np.where(separated, dist, 1.0), 0.0)
    grad = W * coef.sum(axis=1)[None, :] - W @ coef

    coincident = (~separated) & (hinge > 0.0)
    np.fill_diagonal(coincident, False)
    if np.any(coincident):
        for i, j in zip(*np.nonzero(coincident)):
            if i < j:
                axis = (i + j) % d
                push = 4.0 * margin
                grad[axis, i] -= push
                grad[axis, j] += push
    return W - weight * grad


def select_clients(
    num_clients: int, k: int, seed: int, round_index: int
) -> np.ndarray:
    """Uniform without replacement; returned sorted for stable processing."""
    if k > num_clients:
        raise ConfigurationError(
            f"cannot select {k} of {num_clients} clients without replacement"
        )
    rng = stream(seed, _TAG_SELECT, round_index)
    return np.sort(rng.choice(num_clients, size=k, replace=False))


def collect_round_updates(
    state: ServerState,
    clients: Sequence[FederationClient],
    chosen: Sequence[int],
    config: RoundConfig,
    round_index: int,
) -> List[Tuple[ModelRequest, ClientUpdate]]:
    """Request/train for each selected client; order and results are
    deterministic regardless of client parallelism."""
    server = FederationServer(state)
    n_classes = state.model.n_classes

    def run_one(ci: int):
        client = clients[ci]
        rng_neg = stream(config.seed, _TAG_NEGATIVES, round_index, client.client_id)
        rng_shuffle = stream(config.seed, _TAG_SHUFFLE, round_index, client.client_id)
        request = client.build_request(
            n_classes, config.method, config.target_s_size, rng_neg
        )
        sub = server.handle_model_request(request.labels)
        update = client.local_train(sub, n_classes, config.method, config, rng_shuffle)
        return request, update

    if config.client_parallelism > 1:
        with ThreadPoolExecutor(max_workers=config.client_parallelism) as pool:
            results = list(pool.map(run_one, chosen))
    else:
        results = [run_one(ci) for ci in chosen]
    return results


def run_round(
    state: ServerState,
    clients: Sequence[FederationClient],
    config: RoundConfig,
    round_index: Optional[int] = None,
) -> Tuple[ServerState, RoundMetrics]:
    """One full protocol round: select, train, aggregate, apply."""
    if round_index is None:
        round_index = state.round_index
    n_classes = state.model.n_classes
    if config.target_s_size > n_classes:
        raise ConfigurationError("target_s_size exceeds the number of classes")
    chosen = select_clients(
        len(clients), config.clients_per_round, config.seed, round_index
    )
    results = collect_round_updates(state, clients, chosen, config, round_index)
    updates = [u for _, u in results]
    delta = server_aggregate(updates, n_classes)
    new_state = server_apply(state, delta, config.server_lr, config.server_momentum)
    if config.method == "fedaws":
        if config.spreadout_after_momentum:
            W = fedaws_spreadout_step(
                new_state.model.classifier,
                config.spreadout_weight,
                config.spreadout_margin,
            )
            new_state.model.classifier = W
        else:
            # Spreadout folded in before the momentum step sees the deltas.
            W = fedaws_spreadout_step(
                state.model.classifier,
                config.spreadout_weight,
                config.spreadout_margin,
            )
            correction = W - state.model.classifier
            new_state.model.classifier = new_state.model.classifier + correction

    s_sizes = [u.labels.size for u in updates]
    phi_params = parameter_count(state.model.phi)
    d = state.model.embedding_dim
    params_down = sum(phi_params + d * s for s in s_sizes)
    params_up = params_down
    bytes_down = BYTES_PER_PARAM * params_down
    bytes_up = BYTES_PER_PARAM * params_up + BYTES_PER_LABEL * sum(s_sizes)
    total_examples = sum(u.num_examples for u in updates)
    mean_loss = (
        sum(u.mean_loss * u.num_examples for u in updates) / total_examples
    )
    metrics = RoundMetrics(
        round_index=round_index,
        method=config.method,
        client_ids=tuple(int(c) for c in chosen),
        mean_loss=float(mean_loss),
        mean_s_size=float(np.mean(s_sizes)),
        params_down=int(params_down),
        params_up=int(params_up),
        bytes_down=int(bytes_down),
        bytes_up=int(bytes_up),
    )
    return new_state, metrics


def run_training(
    model: ModelParams,
    clients: Sequence[FederationClient],
    config: RoundConfig,
    rounds: int,
    eval_fn: Optional[Callable[[ModelParams], float]] = None,
    eval_every: int = 0,
    checkpoint_fn: Optional[Callable[[ModelParams, int], None]] = None,
    checkpoint_every: int = 0,
) -> Tuple[ServerState, List[RoundMetrics]]:
    """Run `rounds` federated rounds from a fresh server state."""
    if rounds < 1:
        raise ConfigurationError("rounds must be >= 1")
    state = init_server_state(model)
    history: List[RoundMetrics] = []
    for r in range(rounds):
        state, metrics = run_round(state, clients, config, round_index=r)
        is_last = r == rounds - 1
        if eval_fn is not None and (
            is_last or (eval_every > 0 and (r + 1) % eval_every == 0)
        ):
            metrics.eval_top1 = float(eval_fn(state.model))
        if checkpoint_fn is not None and (
            (checkpoint_every > 0 and (r + 1) % checkpoint_every == 0) or is_last
        ):
            checkpoint_fn(state.model, r)
        history.append(metrics)
    return state, history


def partition_clients(
    dataset: Dataset,
    num_clients: int,
    classes_per_client: int,
    examples_per_client: int,
    seed: int,
    grouping: str = "similar",
) -> List[ClientDataset]:
    """Deal disjoint shards: fixed class count and example count per client.

    Every client receives examples_per_client examples spread evenly over
    classes_per_client distinct labels. Shards are pairwise disjoint; when
    the requested totals exactly cover the dataset, their union is the
    dataset. Infeasible requests raise ConfigurationError.

    grouping "similar" assigns each client a bundle of mutually close
    classes (nearest class means), mimicking natural clients whose labels
    are semantically related; "random" assigns classes without regard to
    geometry. Both are deterministic in (dataset, seed).
    """
    if grouping not in ("similar", "random"):
        raise ConfigurationError(f"unknown grouping {grouping!r}")
    if num_clients < 1 or classes_per_client < 1 or examples_per_client < 1:
        raise ConfigurationError("partition counts must be positive")
    if classes_per_client > dataset.n_classes:
        raise ConfigurationError("classes_per_client exceeds the label space")
    if examples_per_client % classes_per_client != 0:
        raise ConfigurationError(
            "examples_per_client must divide evenly across classes_per_client"
        )
    if num_clients * examples_per_client > len(dataset):
        raise ConfigurationError(
            f"requested {num_clients * examples_per_client} examples "
            f"but the dataset has {len(dataset)}"
        )
    per_class = examples_per_client // classes_per_client
    counts = np.bincount(dataset.y, minlength=dataset.n_classes)
    rng = stream(seed, _TAG_PARTITION)
    tie_rank = rng.permutation(dataset.n_classes)

    centers = np.zeros((dataset.n_classes, dataset.input_dim))
    if grouping == "similar":
        for c in range(dataset.n_classes):
            members = dataset.y == c
            if np.any(members):
                centers[c] = dataset.X[members].mean(axis=0)

    remaining = counts.copy()
    picks: List[np.ndarray] = []
    for _ in range(num_clients):
        eligible = remaining >= per_class
        if int(eligible.sum()) < classes_per_client:
            raise ConfigurationError(
                "partition infeasible: not enough classes with "
                f"{per_class} examples left"
            )
        # Most-remaining first keeps class usage balanced; random rank
        # breaks ties reproducibly.
        order = np.lexsort((tie_rank, -remaining))
        order = order[eligible[order]]
        if grouping == "random":
            chosen = np.sort(order[:classes_per_client])
        else:
            chosen_list = [int(order[0])]
            for _ in range(classes_per_client - 1):
                centroid = centers[chosen_list].mean(axis=0)
                dist = np.linalg.norm(centers - centroid[None, :], axis=1)
                candidates = eligible.copy()
                candidates[chosen_list] = False
                # Nearest remaining class mean joins the bundle.
                cand_order = np.lexsort((tie_rank, dist))
                cand_order = cand_order[candidates[cand_order]]
                chosen_list.append(int(cand_order[0]))
            chosen = np.sort(np.array(chosen_list, dtype=np.int64))
        picks.append(chosen)
        remaining[chosen] -= per_class

    pools = {}
    cursors = {}
    for c in range(dataset.n_classes):
        idx = np.nonzero(dataset.y == c)[0]
        pools[c] = rng.permutation(idx)
        cursors[c] = 0

    clients: List[ClientDataset] = []
    for cid, chosen in enumerate(picks):
        take = []
        for c in chosen:
            c = int(c)
            start = cursors[c]
            take.append(pools[c][start : start + per_class])
            cursors[c] = start + per_class
        idx = np.concatenate(take)
        clients.append(
            ClientDataset(X=dataset.X[idx].copy(), y=dataset.y[idx].copy(), client_id=cid)
        )
    return clients


def clients_from_partition(partition: Sequence[ClientDataset]) -> List[FederationClient]:
    return [FederationClient(p.client_id, p) for p in partition]


def centralized_train(
    model: ModelParams,
    train: Dataset,
    num_steps: int,
    batch_size: int,
    lr: float,
    seed: int,
    head: str = "cosine",
    scale: float = 20.0,
) -> ModelParams:
    """Plain SGD on the full softmax loss with IID batches, as a reference."""
    if num_steps < 1:
        raise ConfigurationError("num_steps must be >= 1")
    rng = stream(seed, _TAG_CENTRALIZED)
    params = model.copy()
    n = params.n_classes
    all_positive = np.ones(n, dtype=bool)
    no_adjust = np.zeros(n)
    size = min(batch_size, len(train))
    for _ in range(num_steps):
        idx = rng.choice(len(train), size=size, replace=False)
        xb, tb = train.X[idx], train.y[idx]
        feats, f_cache = forward_features(params.phi, xb)
        logits, l_cache = logits_forward(feats, params.classifier, head, scale)
        _, grads = minibatch_loss_and_grad(
            logits, tb, all_positive, no_adjust, "fullsoftmax"
        )
        grads /= size
        grad_f, grad_W = logits_backward(head, l_cache, grads)
        grad_layers, _ = features_backward(params.phi, f_cache, grad_f)
        params.classifier -= lr * grad_W
        for (w, b), (gw, gb) in zip(params.phi.layers, grad_layers):
            w -= lr * gw
            b -= lr * gb
    return params
