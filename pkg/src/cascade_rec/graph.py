"""Per-behavior user-item bipartite graphs and normalized linear propagation.

One propagation layer replaces every user row by the coefficient-weighted sum
of its neighbouring item rows, and every item row by the weighted sum of its
neighbouring user rows, with edge weight ``1 / sqrt(|N_u| |N_i|)``. There are
no self-loops, weights, or nonlinearities; a node without neighbours gets a
zero row.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .data import EventLog
from .exceptions import ConfigError, ContractError

__all__ = [
    "BehaviorMatrix",
    "BehaviorGraph",
    "DroppedGraph",
    "build_interaction_matrix",
    "build_behavior_graph",
    "build_graphs",
    "propagate",
    "propagate_adjoint",
    "node_dropout",
    "save_graph",
    "load_graph",
]


@dataclass(frozen=True)
class BehaviorMatrix:
    """Binary M x N interaction matrix, stored as sorted unique (user, item) pairs."""

    behavior_id: int
    n_users: int
    n_items: int
    rows: np.ndarray
    cols: np.ndarray

    @property
    def nnz(self) -> int:
        return len(self.rows)

    def to_dense(self) -> np.ndarray:
        w = np.zeros((self.n_users, self.n_items))
        w[self.rows, self.cols] = 1.0
        return w


def build_interaction_matrix(log: EventLog, behavior_id: int) -> BehaviorMatrix:
    """Entry (u, i) is present iff ``log`` has an event of this behavior between u and i."""
    if not 0 <= behavior_id < log.n_behaviors:
        raise ContractError(f"behavior_id {behavior_id} outside [0, {log.n_behaviors})")
    sel = log.behaviors == behavior_id
    keys = np.unique(log.users[sel] * log.n_items + log.items[sel])
    return BehaviorMatrix(behavior_id, log.n_users, log.n_items, keys // log.n_items, keys % log.n_items)


class BehaviorGraph:
    """Symmetrically normalized bipartite adjacency in both orientations.

    ``user_adj`` is an M x N CSR matrix whose row u lists u's items with
    coefficient ``1/(sqrt(|N_u|) sqrt(|N_i|))``; ``item_adj`` is its
    transpose in CSR form. Instances are treated as immutable.
    """

    def __init__(self, behavior_id, user_adj: sp.csr_matrix, item_adj: sp.csr_matrix,
                 user_degrees: np.ndarray, item_degrees: np.ndarray):
        self.behavior_id = behavior_id
        self.user_adj = user_adj
        self.item_adj = item_adj
        self.user_degrees = user_degrees
        self.item_degrees = item_degrees

    @property
    def n_users(self) -> int:
        return self.user_adj.shape[0]

    @property
    def n_items(self) -> int:
        return self.user_adj.shape[1]

    @property
    def n_edges(self) -> int:
        return self.user_adj.nnz

    def coeff(self, u: int, i: int) -> float:
        return float(self.user_adj[u, i])

    def to_dense(self) -> np.ndarray:
        return self.user_adj.toarray()

    def __repr__(self):
        return f"BehaviorGraph(behavior={self.behavior_id}, M={self.n_users}, N={self.n_items}, edges={self.n_edges})"


def _from_edges(behavior_id, n_users, n_items, rows, cols, coeff, user_deg, item_deg) -> BehaviorGraph:
    user_adj = sp.csr_matrix((coeff, (rows, cols)), shape=(n_users, n_items))
    user_adj.sort_indices()
    item_adj = user_adj.T.tocsr()
    item_adj.sort_indices()
    return BehaviorGraph(behavior_id, user_adj, item_adj, user_deg, item_deg)


def build_behavior_graph(m: BehaviorMatrix) -> BehaviorGraph:
    user_deg = np.bincount(m.rows, minlength=m.n_users).astype(np.int64)
    item_deg = np.bincount(m.cols, minlength=m.n_items).astype(np.int64)
    coeff = 1.0 / (np.sqrt(user_deg[m.rows].astype(float)) * np.sqrt(item_deg[m.cols].astype(float)))
    return _from_edges(m.behavior_id, m.n_users, m.n_items, m.rows, m.cols, coeff, user_deg, item_deg)


def build_graphs(log: EventLog) -> list[BehaviorGraph]:
    """One graph per behavior, in cascade order."""
    return [build_behavior_graph(build_interaction_matrix(log, b)) for b in range(log.n_behaviors)]


class DroppedGraph(BehaviorGraph):
    """A graph with some nodes removed and surviving coefficients rescaled."""

    def __init__(self, base: BehaviorGraph, kept_users: np.ndarray, kept_items: np.ndarray, rescale: float):
        self.base = base
        self.kept_users = kept_users
        self.kept_items = kept_items
        self.rescale = rescale
        du = sp.diags(kept_users.astype(float) * rescale)
        di = sp.diags(kept_items.astype(float))
        user_adj = (du @ base.user_adj @ di).tocsr()
        user_adj.eliminate_zeros()
        user_adj.sort_indices()
        item_adj = user_adj.T.tocsr()
        item_adj.sort_indices()
        super().__init__(base.behavior_id, user_adj, item_adj, base.user_degrees, base.item_degrees)


def _check_embeddings(g: BehaviorGraph, user_emb, item_emb, what: str):
    user_emb = np.asarray(user_emb)
    item_emb = np.asarray(item_emb)
    if user_emb.ndim != 2 or item_emb.ndim != 2:
        raise ContractError(f"{what}: embeddings must be 2-D")
    if user_emb.shape[0] != g.n_users or item_emb.shape[0] != g.n_items:
        raise ContractError(
            f"{what}: expected {g.n_users} user rows and {g.n_items} item rows, "
            f"got {user_emb.shape[0]} and {item_emb.shape[0]}"
        )
    if user_emb.shape[1] != item_emb.shape[1]:
        raise ContractError(f"{what}: user and item widths differ ({user_emb.shape[1]} vs {item_emb.shape[1]})")
    return user_emb, item_emb


def propagate(g: BehaviorGraph, user_emb, item_emb, layers: int):
    """Apply ``layers`` rounds of normalized neighbour aggregation; return the last layer only.

    Both sides of each round read the previous round's state.
    """
    if layers < 1:
        raise ContractError("propagate needs layers >= 1; skip the call for zero layers")
    u, i = _check_embeddings(g, user_emb, item_emb, "propagate")
    for _ in range(layers):
        u, i = g.user_adj @ i, g.item_adj @ u
    return np.asarray(u), np.asarray(i)


def propagate_adjoint(g: BehaviorGraph, grad_user_out, grad_item_out, layers: int):
    """Vector-Jacobian product of :func:`propagate` with respect to both inputs.

    One layer maps (u, i) to (A i, A^T u); its transpose sends a user-side
    gradient through A^T to the items and an item-side gradient through A to
    the users. Iterating that ``layers`` times gives the exact adjoint.
    """
    if layers < 1:
        raise ContractError("propagate_adjoint needs layers >= 1")
    gu, gi = _check_embeddings(g, grad_user_out, grad_item_out, "propagate_adjoint")
    for _ in range(layers):
        gu, gi = g.user_adj @ gi, g.item_adj @ gu
    return np.asarray(gu), np.asarray(gi)


def node_dropout(g: BehaviorGraph, p: float, rng) -> BehaviorGraph:
    """Drop each user and item node independently with probability ``p``.

    Edges touching a dropped node disappear; the rest are scaled by
    ``1/(1-p)`` so the expected propagation output is unchanged. ``p == 0``
    returns ``g`` itself.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"node dropout probability must lie in [0, 1), got {p}")
    if p == 0.0:
        return g
    kept_users = rng.random(g.n_users) >= p
    kept_items = rng.random(g.n_items) >= p
    return DroppedGraph(g, kept_users, kept_items, 1.0 / (1.0 - p))


# -- binary cache ------------------------------------------------------------

_MAGIC = b"BGR1"
_HEADER = struct.Struct("<4sqqqq")  # magic, M, N, edges, behavior_id


def save_graph(g: BehaviorGraph, path) -> None:
    """Write the user-side CSR arrays with a fixed little-endian header."""
    a = g.user_adj
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, g.n_users, g.n_items, a.nnz, int(g.behavior_id)))
        fh.write(a.indptr.astype("<i8").tobytes())
        fh.write(a.indices.astype("<i8").tobytes())
        fh.write(a.data.astype("<f8").tobytes())


def load_graph(path) -> BehaviorGraph:
    buf = Path(path).read_bytes()
    magic, m, n, e, b = _HEADER.unpack_from(buf, 0)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a graph cache file")
    off = _HEADER.size
    indptr = np.frombuffer(buf, "<i8", m + 1, off)
    off += 8 * (m + 1)
    indices = np.frombuffer(buf, "<i8", e, off)
    off += 8 * e
    data = np.frombuffer(buf, "<f8", e, off)
    user_adj = sp.csr_matrix((data.astype(np.float64), indices.astype(np.int64), indptr.astype(np.int64)),
                             shape=(m, n))
    item_adj = user_adj.T.tocsr()
    item_adj.sort_indices()
    user_deg = np.diff(user_adj.indptr).astype(np.int64)
    item_deg = np.diff(item_adj.indptr).astype(np.int64)
    return BehaviorGraph(b, user_adj, item_adj, user_deg, item_deg)
