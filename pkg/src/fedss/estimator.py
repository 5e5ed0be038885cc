"""Scikit-learn style front door for the federated trainer.

FederatedEmbeddingClassifier packs the whole pipeline (partition the
data into simulated clients, run federated rounds, keep the final
model) behind fit/predict/transform so it drops into sklearn tooling.
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset
from .errors import ConfigurationError
from .federation import (
    RoundConfig,
    clients_from_partition,
    init_rng,
    partition_clients,
    run_training,
)
from .metrics import embed, predict_logits
from .model import ModelConfig, init_model


class FederatedEmbeddingClassifier(BaseEstimator, ClassifierMixin, TransformerMixin):
    """Classifier trained by simulated federated rounds over label shards.

    fit() deals the training data to `num_clients` disjoint shards with
    `classes_per_client` labels each, then runs `rounds` federated
    rounds of the selected method. predict() takes the argmax over
    class logits; transform() returns unit-norm embeddings.

    Parameters mirror RoundConfig and the model shape. With
    examples_per_client=None the shard size is chosen automatically as
    the largest feasible multiple of classes_per_client.
    """

    def __init__(
        self,
        method: str = "fedss",
        rounds: int = 50,
        hidden_dims: Tuple[int, ...] = (64,),
        embedding_dim: int = 16,
        head: str = "cosine",
        scale: float = 20.0,
        num_clients: int = 4,
        classes_per_client: int = 2,
        examples_per_client: Optional[int] = None,
        clients_per_round: Optional[int] = None,
        target_s_size: Optional[int] = None,
        local_epochs: int = 1,
        client_lr: float = 0.01,
        server_lr: float = 1.0,
        server_momentum: float = 0.9,
        batch_size: int = 32,
        seed: int = 0,
    ):
        self.method = method
        self.rounds = rounds
        self.hidden_dims = hidden_dims
        self.embedding_dim = embedding_dim
        self.head = head
        self.scale = scale
        self.num_clients = num_clients
        self.classes_per_client = classes_per_client
        self.examples_per_client = examples_per_client
        self.clients_per_round = clients_per_round
        self.target_s_size = target_s_size
        self.local_epochs = local_epochs
        self.client_lr = client_lr
        self.server_lr = server_lr
        self.server_momentum = server_momentum
        self.batch_size = batch_size
        self.seed = seed

    def _auto_examples_per_client(self, dataset: Dataset) -> int:
        cpc = int(self.classes_per_client)
        epc = len(dataset) // int(self.num_clients)
        epc -= epc % cpc
        while epc >= cpc:
            try:
                partition_clients(
                    dataset, int(self.num_clients), cpc, epc, seed=int(self.seed)
                )
                return epc
            except ConfigurationError:
                epc -= cpc
        raise ConfigurationError(
            "no feasible shard size: reduce num_clients or classes_per_client"
        )

    def fit(self, X, y) -> "FederatedEmbeddingClassifier":
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        if self.classes_.size < 2:
            raise ConfigurationError("need at least 2 classes to fit")
        y_dense = np.searchsorted(self.classes_, y)
        dataset = Dataset(X=X, y=y_dense, n_classes=int(self.classes_.size))
        self.n_features_in_ = X.shape[1]

        epc = (
            self._auto_examples_per_client(dataset)
            if self.examples_per_client is None
            else int(self.examples_per_client)
        )
        partition = partition_clients(
            dataset,
            num_clients=int(self.num_clients),
            classes_per_client=int(self.classes_per_client),
            examples_per_client=epc,
            seed=int(self.seed),
        )
        clients = clients_from_partition(partition)

        mc = ModelConfig(
            input_dim=int(self.n_features_in_),
            hidden_dims=tuple(int(h) for h in self.hidden_dims),
            embedding_dim=int(self.embedding_dim),
            n_classes=int(self.classes_.size),
            head=self.head,
            scale=float(self.scale),
        )
        model = init_model(mc, init_rng(int(self.seed)))
        k = (
            int(self.num_clients)
            if self.clients_per_round is None
            else int(self.clients_per_round)
        )
        s_target = (
            min(int(self.classes_.size), 2 * int(self.classes_per_client))
            if self.target_s_size is None
            else int(self.target_s_size)
        )
        rc = RoundConfig(
            method=self.method,
            clients_per_round=k,
            local_epochs=int(self.local_epochs),
            client_lr=float(self.client_lr),
            server_lr=float(self.server_lr),
            server_momentum=float(self.server_momentum),
            target_s_size=s_target,
            batch_size=int(self.batch_size),
            seed=int(self.seed),
            head=self.head,
            scale=float(self.scale),
        )
        state, history = run_training(model, clients, rc, rounds=int(self.rounds))
        self.model_ = state.model
        self.history_ = history
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ConfigurationError(
                f"X has {X.shape[1]} features, expected {self.n_features_in_}"
            )
        return predict_logits(self.model_, X, head=self.head, scale=self.scale)

    def predict(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        return self.classes_[np.argmax(logits, axis=1)]

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ConfigurationError(
                f"X has {X.shape[1]} features, expected {self.n_features_in_}"
            )
        return embed(self.model_, X, normalize=True)
