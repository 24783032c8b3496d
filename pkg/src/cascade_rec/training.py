"""Multi-task pairwise-ranking training of the cascade.

Every block's output is trained on its own behavior with a BPR loss; the
losses are weighted, summed and regularized. Gradients with respect to the
only trainable parameters (P, Q) are computed in closed form by walking the
cascade backwards: inner product, row normalization and linear propagation
all have simple adjoints, so no autodiff machinery is needed.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data import EventLog, Split
from .exceptions import ConfigError, SamplingError, TrainingDivergence
from .graph import BehaviorGraph, node_dropout, propagate_adjoint
from .model import CascadeConfig, CascadeState, EmbeddingTable, forward_cascade, init_embeddings

logger = logging.getLogger(__name__)

__all__ = [
    "InteractionIndex",
    "TripleBatch",
    "TrainConfig",
    "AdamState",
    "sample_batch",
    "bpr_pair_loss",
    "total_loss",
    "loss_and_gradients",
    "compute_gradients",
    "adam_step",
    "fit",
    "LEARNING_RATE_GRID",
    "REG_WEIGHT_GRID",
]

LEARNING_RATE_GRID = (1e-2, 3e-3, 1e-3, 1e-4)
REG_WEIGHT_GRID = (1e-2, 1e-3, 3e-4, 1e-4)


class InteractionIndex:
    """Per-behavior user -> sorted item lists built from a training log."""

    def __init__(self, log: EventLog):
        self.n_users = log.n_users
        self.n_items = log.n_items
        self.n_behaviors = log.n_behaviors
        self.indptr = []
        self.items = []
        self.keys = []
        for b in range(log.n_behaviors):
            sel = log.behaviors == b
            keys = np.unique(log.users[sel] * log.n_items + log.items[sel])
            users = keys // log.n_items
            self.indptr.append(np.concatenate(([0], np.cumsum(np.bincount(users, minlength=log.n_users)))))
            self.items.append(keys % log.n_items)
            self.keys.append(keys)

    def degrees(self, b: int) -> np.ndarray:
        return np.diff(self.indptr[b])

    def contains(self, b: int, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        keys = self.keys[b]
        if len(keys) == 0:
            return np.zeros(len(users), dtype=bool)
        q = users * self.n_items + items
        pos = np.searchsorted(keys, q).clip(max=len(keys) - 1)
        return keys[pos] == q


@dataclass
class TripleBatch:
    """Sampled (user, positive, negative) triples, one array set per behavior.

    ``mask[b][k]`` is True for placeholder triples of users without any
    interaction under behavior b; those rows hold (0, 0, 0) and are ignored
    by the loss. ``users`` is the batch's user list. Behaviors that were not
    sampled (zero task weight) have empty arrays.
    """

    users: np.ndarray
    u: list[np.ndarray]
    pos: list[np.ndarray]
    neg: list[np.ndarray]
    mask: list[np.ndarray]

    @property
    def n_behaviors(self) -> int:
        return len(self.u)

    def active(self, b: int):
        keep = ~self.mask[b]
        return self.u[b][keep], self.pos[b][keep], self.neg[b][keep]


def sample_batch(data, users, n_neg: int, rng, behaviors: Sequence[int] | None = None,
                 max_rounds: int = 1000) -> TripleBatch:
    """Draw ``n_neg`` triples per (user, behavior) sharing one uniformly chosen positive.

    ``data`` is an :class:`EventLog` (training events) or a prebuilt
    :class:`InteractionIndex`. Negatives are uniform over items the user has
    not interacted with under that same behavior. Users without interactions
    under a behavior get masked (0, 0, 0) placeholders.
    """
    index = data if isinstance(data, InteractionIndex) else InteractionIndex(data)
    users = np.asarray(users, dtype=np.int64)
    if n_neg < 1:
        raise ConfigError(f"n_neg must be >= 1, got {n_neg}")
    chosen = range(index.n_behaviors) if behaviors is None else set(behaviors)
    empty = np.zeros(0, dtype=np.int64)
    out_u, out_p, out_n, out_m = [], [], [], []
    for b in range(index.n_behaviors):
        if b not in chosen:
            out_u.append(empty)
            out_p.append(empty)
            out_n.append(empty)
            out_m.append(np.zeros(0, dtype=bool))
            continue
        deg = index.degrees(b)[users]
        if np.any(deg >= index.n_items):
            bad = int(users[np.argmax(deg >= index.n_items)])
            raise SamplingError(f"user {bad} interacted with all {index.n_items} items under behavior {b}; "
                                "no negative can be drawn")
        has = deg > 0
        start = index.indptr[b][users]
        # one positive per (user, behavior), repeated for each negative
        offs = np.floor(rng.random(len(users)) * deg).astype(np.int64)
        pos = np.zeros(len(users), dtype=np.int64)
        pos[has] = index.items[b][start[has] + offs[has]]
        uu = np.repeat(users, n_neg)
        pp = np.repeat(pos, n_neg)
        mm = ~np.repeat(has, n_neg)
        nn = rng.integers(0, index.n_items, size=len(uu))
        bad = ~mm & index.contains(b, uu, nn)
        rounds = 0
        while bad.any():
            rounds += 1
            if rounds > max_rounds:
                raise SamplingError(f"negative sampling did not converge for behavior {b}")
            nn[bad] = rng.integers(0, index.n_items, size=int(bad.sum()))
            bad[bad] = index.contains(b, uu[bad], nn[bad])
        uu = np.where(mm, 0, uu)
        nn = np.where(mm, 0, nn)
        out_u.append(uu)
        out_p.append(pp)
        out_n.append(nn)
        out_m.append(mm)
    return TripleBatch(users, out_u, out_p, out_n, out_m)


def bpr_pair_loss(y_pos, y_neg):
    """``-ln sigmoid(y_pos - y_neg)``, evaluated as a stable softplus."""
    return np.logaddexp(0.0, -(np.asarray(y_pos, dtype=float) - np.asarray(y_neg, dtype=float)))


def _reg_rows(batch: TripleBatch | None, weights) -> tuple[np.ndarray | None, np.ndarray | None]:
    if batch is None:
        return None, None
    users = np.unique(batch.users)
    items = [np.concatenate(batch.active(b)[1:]) for b in range(batch.n_behaviors) if weights[b] != 0]
    items = np.unique(np.concatenate(items)) if items else np.zeros(0, dtype=np.int64)
    return users, items


def total_loss(per_behavior_losses, task_weights, emb: EmbeddingTable, reg_weight: float,
               user_rows=None, item_rows=None) -> float:
    """Weighted task losses plus ``reg_weight`` times the squared norm of the regularized rows.

    Rows default to all of P and Q; training passes the rows touched by the batch.
    """
    losses = list(per_behavior_losses)
    weights = list(task_weights)
    if len(losses) != len(weights):
        raise ConfigError(f"{len(losses)} losses but {len(weights)} task weights")
    P = emb.P if user_rows is None else emb.P[user_rows]
    Q = emb.Q if item_rows is None else emb.Q[item_rows]
    data = sum(w * l for w, l in zip(weights, losses) if w != 0)
    return float(data + reg_weight * (np.sum(P * P) + np.sum(Q * Q)))


def _norm_adjoint(raw: np.ndarray, norms: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Backward of row normalization: ``(I - y y^T) g / |x|`` per row, zero rows pass zero."""
    nz = norms > 0.0
    out = np.zeros_like(grad)
    x = raw[nz]
    n = norms[nz][:, None]
    y = x / n
    g = grad[nz]
    out[nz] = (g - y * np.einsum("ij,ij->i", y, g)[:, None]) / n
    return out


def loss_and_gradients(emb: EmbeddingTable, graphs: Sequence[BehaviorGraph], cfg: CascadeConfig,
                       batch: TripleBatch, task_weights, reg_weight: float,
                       state: CascadeState | None = None):
    """Return ``(total, per_behavior_losses, dP, dQ)`` for one batch.

    ``state`` is the forward pass to differentiate through (it carries any
    dropout draws); without it a dropout-free forward pass is run.
    """
    B = cfg.n_behaviors
    weights = np.asarray(task_weights, dtype=float)
    if len(weights) != B or batch.n_behaviors != B:
        raise ConfigError(f"task weights ({len(weights)}) and batch ({batch.n_behaviors}) must cover {B} behaviors")
    if state is None:
        state = forward_cascade(emb, graphs, cfg, rng=None)

    losses = np.zeros(B)
    direct = []
    for b in range(B):
        eu, ei = state.fused[b + 1]
        gu = np.zeros_like(eu)
        gi = np.zeros_like(ei)
        u, p, n = batch.active(b)
        if weights[b] != 0 and len(u):
            gap = ei[p] - ei[n]
            x = np.einsum("ij,ij->i", eu[u], gap)
            losses[b] = float(np.sum(np.logaddexp(0.0, -x)))
            # d/dx softplus(-x) = -sigmoid(-x)
            c = -weights[b] * np.exp(-np.logaddexp(0.0, x))
            np.add.at(gu, u, c[:, None] * gap)
            np.add.at(gi, p, c[:, None] * eu[u])
            np.add.at(gi, n, -c[:, None] * eu[u])
        direct.append((gu, gi))

    gu, gi = np.zeros_like(emb.P), np.zeros_like(emb.Q)
    for b in range(B - 1, -1, -1):
        gu = gu + direct[b][0]
        gi = gi + direct[b][1]
        layers = cfg.layers_per_behavior[b]
        if layers == 0:
            continue
        raw_u, raw_i = state.behavioral_raw[b]
        if cfg.use_l2_norm:
            nu, ni = state.norms[b]
            ru, ri = _norm_adjoint(raw_u, nu, gu), _norm_adjoint(raw_i, ni, gi)
        else:
            ru, ri = gu, gi
        mask = state.message_masks[b]
        if mask is not None:
            ru, ri = ru * mask[0], ri * mask[1]
        pu, pi = propagate_adjoint(state.graphs_used[b], ru, ri, layers)
        if cfg.use_shortcut:
            gu, gi = gu + pu, gi + pi
        else:
            gu, gi = pu, pi

    users, items = _reg_rows(batch, weights)
    dP = gu
    dQ = gi
    dP[users] += 2.0 * reg_weight * emb.P[users]
    dQ[items] += 2.0 * reg_weight * emb.Q[items]
    total = total_loss(losses, weights, emb, reg_weight, users, items)
    if not (np.isfinite(dP).all() and np.isfinite(dQ).all()):
        raise TrainingDivergence(
            f"non-finite gradient (loss={total!r}, |P|max={np.abs(emb.P).max():.3g}, |Q|max={np.abs(emb.Q).max():.3g})"
        )
    return total, losses, dP, dQ


def compute_gradients(emb, graphs, cfg, batch, train_cfg: "TrainConfig", state=None):
    """``(dP, dQ)`` of the regularized multi-task loss for ``batch``."""
    weights = train_cfg.resolved_task_weights(cfg.n_behaviors)
    _, _, dP, dQ = loss_and_gradients(emb, graphs, cfg, batch, weights, train_cfg.reg_weight, state)
    return dP, dQ


@dataclass
class AdamState:
    m_P: np.ndarray
    m_Q: np.ndarray
    v_P: np.ndarray
    v_Q: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, emb: EmbeddingTable) -> "AdamState":
        return cls(np.zeros_like(emb.P), np.zeros_like(emb.Q), np.zeros_like(emb.P), np.zeros_like(emb.Q))


def adam_step(emb: EmbeddingTable, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update, in place; returns ``(emb, state)``."""
    dP, dQ = grads
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for param, g, m, v in ((emb.P, dP, state.m_P, state.v_P), (emb.Q, dQ, state.m_Q, state.v_Q)):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        param -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return emb, state


@dataclass
class TrainConfig:
    batch_size: int = 1024
    n_negatives: int = 4
    learning_rate: float = 1e-2
    reg_weight: float = 1e-4
    task_weights: tuple[float, ...] | None = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 200
    patience: int = 20
    rng_seed: int = 0
    embedding_dim: int = 64
    init_std: float = 0.01
    node_dropout_schedule: str = "batch"
    eval_k: int = 20

    def __post_init__(self):
        if self.task_weights is not None:
            self.task_weights = tuple(float(w) for w in self.task_weights)
            if any(w < 0 for w in self.task_weights):
                raise ConfigError(f"task weights must be non-negative, got {self.task_weights}")
            if not any(w > 0 for w in self.task_weights):
                raise ConfigError("at least one task weight must be positive")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1 or self.n_negatives < 1 or self.max_epochs < 0:
            raise ConfigError("batch_size and n_negatives must be positive, max_epochs non-negative")
        if self.node_dropout_schedule not in ("batch", "epoch"):
            raise ConfigError(f"node_dropout_schedule must be 'batch' or 'epoch', got {self.node_dropout_schedule!r}")
        if self.learning_rate < 0 or self.reg_weight < 0:
            raise ConfigError("learning_rate and reg_weight must be non-negative")

    def resolved_task_weights(self, n_behaviors: int) -> tuple[float, ...]:
        if self.task_weights is None:
            return (1.0,) * n_behaviors
        if len(self.task_weights) != n_behaviors:
            raise ConfigError(f"{len(self.task_weights)} task weights for {n_behaviors} behaviors")
        return self.task_weights


@dataclass
class TrainingLog:
    records: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_score: float = float("-inf")
    stopped_early: bool = False


def fit(split: Split | EventLog, graphs: Sequence[BehaviorGraph], cfg: CascadeConfig, train_cfg: TrainConfig,
        callbacks: Sequence[Callable] = (), emb: EmbeddingTable | None = None):
    """Train with Adam and early stopping on validation HR@``eval_k``.

    An epoch is one shuffled pass over all users in batches of
    ``batch_size``. After each epoch the validation hit ratio is measured;
    training stops after ``patience`` epochs without strict improvement.
    The parameters of the best epoch are returned together with a
    :class:`TrainingLog`. Without validation data (a bare :class:`EventLog`)
    every epoch counts as an improvement and the last one is returned.
    Each callback is called as ``callback(record, emb)`` after every epoch;
    it must not modify ``emb``.
    """
    from .metrics import evaluate_users  # circular at import time

    if isinstance(split, Split):
        train, validation = split.train, split.validation
    else:
        train, validation = split, {}
    B = cfg.n_behaviors
    if len(graphs) != B or train.n_behaviors != B:
        raise ConfigError(f"configuration has {B} behaviors, data has {train.n_behaviors}, graphs {len(graphs)}")
    weights = train_cfg.resolved_task_weights(B)
    active = [b for b in range(B) if weights[b] > 0]
    rng = np.random.default_rng(train_cfg.rng_seed)
    if emb is None:
        emb = init_embeddings(train.n_users, train.n_items, train_cfg.embedding_dim, rng, train_cfg.init_std)
    else:
        emb = emb.copy()
    adam = AdamState.zeros_like(emb)
    index = InteractionIndex(train)
    exclusions = Split(train, {}, {}).train_items() if validation else None
    use_dropout = cfg.message_dropout_p > 0 or cfg.node_dropout_p > 0
    per_epoch_nodes = train_cfg.node_dropout_schedule == "epoch" and cfg.node_dropout_p > 0

    log = TrainingLog()
    best = emb.copy()
    stale = 0
    for epoch in range(1, train_cfg.max_epochs + 1):
        t0 = time.perf_counter()
        ep_graphs, ep_cfg = graphs, cfg
        if per_epoch_nodes:
            ep_graphs = [node_dropout(g, cfg.node_dropout_p, rng) for g in graphs]
            ep_cfg = replace(cfg, node_dropout_p=0.0)
        order = rng.permutation(train.n_users)
        sums = np.zeros(B)
        total = 0.0
        for k, start in enumerate(range(0, len(order), train_cfg.batch_size)):
            users = order[start:start + train_cfg.batch_size]
            batch = sample_batch(index, users, train_cfg.n_negatives, rng, behaviors=active)
            state = forward_cascade(emb, ep_graphs, ep_cfg, rng if use_dropout else None)
            loss, losses, dP, dQ = loss_and_gradients(emb, ep_graphs, ep_cfg, batch, weights,
                                                      train_cfg.reg_weight, state)
            if not np.isfinite(loss):
                raise TrainingDivergence(f"epoch {epoch} batch {k}: loss became {loss!r}; per-behavior {losses.tolist()}")
            adam_step(emb, (dP, dQ), adam, train_cfg.learning_rate,
                      train_cfg.adam_beta1, train_cfg.adam_beta2, train_cfg.adam_eps)
            sums += losses
            total += loss
        record = {"epoch": epoch}
        for name, val in zip(train.behavior_order, sums):
            record[f"loss_{name}"] = float(val)
        record["total_loss"] = float(total)
        if validation:
            state = forward_cascade(emb, graphs, cfg, rng=None)
            users = np.array(sorted(validation), dtype=np.int64)
            items = np.array([validation[u] for u in users], dtype=np.int64)
            ranks, _ = evaluate_users(state.final, users, items, exclusions)
            hr = float(np.mean(ranks <= train_cfg.eval_k))
        else:
            hr = float("nan")
        record[f"val_hr@{train_cfg.eval_k}"] = hr
        record["seconds"] = time.perf_counter() - t0
        log.records.append(record)
        logger.info("epoch %d loss %.4f val HR@%d %.4f (%.2fs)", epoch, total, train_cfg.eval_k, hr, record["seconds"])
        for cb in callbacks:
            cb(record, emb)

        if not validation or hr > log.best_score:
            log.best_score = hr if validation else log.best_score
            log.best_epoch = epoch
            best = emb.copy()
            stale = 0
        else:
            stale += 1
            if stale >= train_cfg.patience:
                log.stopped_early = True
                break
    return best, log
