"""scikit-learn compatible front end for the cascading residual recommender."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import EventLog, Split
from .exceptions import ConfigError
from .graph import build_graphs
from .metrics import DEFAULT_KS, MetricsReport, evaluate_users, report_from_ranks
from .model import CascadeConfig, forward_cascade
from .training import TrainConfig, fit

__all__ = ["CascadeRecommender", "check_interactions", "check_users"]


def check_interactions(X) -> tuple[EventLog, Split | None]:
    """Accept a :class:`Split` or a training :class:`EventLog`; return ``(train_log, split_or_None)``."""
    if isinstance(X, Split):
        return X.train, X
    if isinstance(X, EventLog):
        return X, None
    raise TypeError(f"expected a Split or an EventLog, got {type(X).__name__}")


def check_users(users, n_users: int) -> np.ndarray:
    """1-D integer array of user ids, each in ``[0, n_users)``."""
    arr = np.atleast_1d(np.asarray(users))
    if arr.ndim != 1:
        raise ValueError(f"users must be 1-D, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        raise ValueError(f"user ids must be integers, got dtype {arr.dtype}")
    arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= n_users):
        raise ValueError(f"user id out of range [0, {n_users})")
    return arr


class CascadeRecommender(BaseEstimator):
    """Multi-behavior recommender built from cascading residual graph-convolution blocks.

    Behaviors are consumed in the order of the training log's
    ``behavior_order``; the last one is the target. Each block propagates the
    previous block's embeddings over its behavior graph, L2-normalizes the
    result and adds it back through a shortcut. Blocks are trained jointly,
    each with a BPR loss on its own behavior.

    Parameters
    ----------
    embedding_dim : int, default=64
    layers : int or sequence of int, default=1
        Propagation layers per behavior block; 0 makes a block the identity.
    use_shortcut, use_l2_norm : bool, default=True
        Residual-block switches (the ablation variants turn one off).
    message_dropout, node_dropout : float, default=0.0
    node_dropout_schedule : {"batch", "epoch"}, default="batch"
    batch_size : int, default=1024
        Users per mini-batch.
    n_negatives : int, default=4
        Negative items per sampled positive.
    learning_rate : float, default=1e-2
    reg_weight : float, default=1e-4
        Coefficient of the squared L2 penalty on the embedding rows in a batch.
    task_weights : sequence of float, optional
        Loss weight per behavior; defaults to all ones. ``(0, ..., 0, 1)``
        trains the target behavior only.
    max_epochs : int, default=200
    patience : int, default=20
        Epochs without validation HR@``eval_k`` improvement before stopping.
    eval_k : int, default=20
    init_std : float, default=0.01
    random_state : int, default=0
    tie_mode : {"average", "pessimistic"}, default="average"
    exclude_validation : bool, default=False
        Also drop the validation item from test-time candidates.

    Attributes
    ----------
    embeddings_ : EmbeddingTable
        Trained P and Q from the best validation epoch.
    user_factors_, item_factors_ : ndarray
        Final-block user and item embeddings used for scoring.
    graphs_ : list of BehaviorGraph
    cascade_config_ : CascadeConfig
    history_ : list of dict
        One record per epoch.
    best_epoch_ : int
    """

    def __init__(self, embedding_dim=64, layers=1, use_shortcut=True, use_l2_norm=True,
                 message_dropout=0.0, node_dropout=0.0, node_dropout_schedule="batch",
                 batch_size=1024, n_negatives=4, learning_rate=1e-2, reg_weight=1e-4,
                 task_weights=None, max_epochs=200, patience=20, eval_k=20, init_std=0.01,
                 random_state=0, tie_mode="average", exclude_validation=False):
        self.embedding_dim = embedding_dim
        self.layers = layers
        self.use_shortcut = use_shortcut
        self.use_l2_norm = use_l2_norm
        self.message_dropout = message_dropout
        self.node_dropout = node_dropout
        self.node_dropout_schedule = node_dropout_schedule
        self.batch_size = batch_size
        self.n_negatives = n_negatives
        self.learning_rate = learning_rate
        self.reg_weight = reg_weight
        self.task_weights = task_weights
        self.max_epochs = max_epochs
        self.patience = patience
        self.eval_k = eval_k
        self.init_std = init_std
        self.random_state = random_state
        self.tie_mode = tie_mode
        self.exclude_validation = exclude_validation

    def _cascade_config(self, n_behaviors: int) -> CascadeConfig:
        layers = self.layers
        if np.isscalar(layers):
            layers = (int(layers),) * n_behaviors
        layers = tuple(int(x) for x in layers)
        if len(layers) != n_behaviors:
            raise ConfigError(f"{len(layers)} layer counts for {n_behaviors} behaviors")
        return CascadeConfig(layers, bool(self.use_shortcut), bool(self.use_l2_norm),
                             float(self.message_dropout), float(self.node_dropout))

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=int(self.batch_size), n_negatives=int(self.n_negatives),
            learning_rate=float(self.learning_rate), reg_weight=float(self.reg_weight),
            task_weights=None if self.task_weights is None else tuple(self.task_weights),
            max_epochs=int(self.max_epochs), patience=int(self.patience),
            rng_seed=self.random_state, embedding_dim=int(self.embedding_dim),
            init_std=float(self.init_std), node_dropout_schedule=self.node_dropout_schedule,
            eval_k=int(self.eval_k),
        )

    def fit(self, X, y=None, callbacks=()):
        """Train on a :class:`Split` (early stopping on its validation items) or a bare training log."""
        train, split = check_interactions(X)
        if len(train) == 0:
            raise ValueError("training log is empty")
        cfg = self._cascade_config(train.n_behaviors)
        tcfg = self._train_config()
        tcfg.resolved_task_weights(train.n_behaviors)
        graphs = build_graphs(train)
        emb, log = fit(split if split is not None else train, graphs, cfg, tcfg, callbacks)

        self.embeddings_ = emb
        self.graphs_ = graphs
        self.cascade_config_ = cfg
        self.train_config_ = tcfg
        self.history_ = log.records
        self.best_epoch_ = log.best_epoch
        self.stopped_early_ = log.stopped_early
        self.behavior_order_ = train.behavior_order
        self.n_users_ = train.n_users
        self.n_items_ = train.n_items
        self.train_items_ = Split(train, {}, {}).train_items()
        self._set_final(emb)
        return self

    def _set_final(self, emb):
        state = forward_cascade(emb, self.graphs_, self.cascade_config_, rng=None)
        self.block_outputs_ = state.fused
        self.user_factors_, self.item_factors_ = state.final

    def transform(self, users=None):
        """Final-block embeddings of ``users`` (all users when omitted)."""
        check_is_fitted(self, "user_factors_")
        if users is None:
            return self.user_factors_
        return self.user_factors_[check_users(users, self.n_users_)]

    def decision_function(self, users, behavior=None):
        """Scores of every item for each user; ``behavior`` picks a block (default: target)."""
        check_is_fitted(self, "user_factors_")
        users = check_users(users, self.n_users_)
        if behavior is None:
            U, I = self.user_factors_, self.item_factors_
        else:
            U, I = self.block_outputs_[self.behavior_order_.index(behavior) + 1]
        return U[users] @ I.T

    def predict(self, users, k=10, exclude_seen=True):
        """Top-``k`` item ids per user, best first; training target items are skipped by default."""
        scores = self.decision_function(users)
        if exclude_seen:
            for row, u in enumerate(check_users(users, self.n_users_).tolist()):
                seen = list(self.train_items_[u])
                scores[row, seen] = -np.inf
        k = min(int(k), scores.shape[1])
        order = np.argsort(-scores, axis=1, kind="stable")
        return order[:, :k]

    def evaluate(self, X: Split, ks=DEFAULT_KS, heldout="test", users=None) -> MetricsReport:
        """HR@K / NDCG@K of the held-out items in ``X`` (restricted to ``users`` when given)."""
        check_is_fitted(self, "user_factors_")
        if not isinstance(X, Split):
            raise TypeError("evaluate needs a Split")
        held = X.test if heldout == "test" else X.validation
        chosen = sorted(held) if users is None else sorted(int(u) for u in users if int(u) in held)
        if not chosen:
            raise ValueError("no held-out users to evaluate")
        extra = X.validation if (self.exclude_validation and heldout == "test") else None
        ranks, _ = evaluate_users((self.user_factors_, self.item_factors_), chosen,
                                  [held[u] for u in chosen], X.train_items(), extra, self.tie_mode)
        return report_from_ranks(ranks, ks)

    def score(self, X, y=None) -> float:
        """Test-set HR@``eval_k``."""
        return self.evaluate(X, ks=(self.eval_k,)).hr[self.eval_k]
