"""Embedding table and the cascading residual forward pass.

Block ``b`` propagates the previous block's output over behavior ``b``'s
graph, row-normalizes the result and adds it back onto its input::

    e[0] = (P, Q)
    e[b] = e[b-1] + normalize(propagate(graph[b], e[b-1], L[b]))

Each block's output scores its own behavior with an inner product; the last
block scores the target behavior.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import ConfigError, ContractError
from .graph import BehaviorGraph, node_dropout, propagate

__all__ = [
    "EmbeddingTable",
    "CascadeConfig",
    "CascadeState",
    "init_embeddings",
    "l2_row_normalize",
    "message_dropout",
    "forward_cascade",
    "score",
    "save_embeddings",
    "load_embeddings",
]


@dataclass
class EmbeddingTable:
    """The trainable parameters: user matrix ``P`` (M x d) and item matrix ``Q`` (N x d)."""

    P: np.ndarray
    Q: np.ndarray

    def __post_init__(self):
        if self.P.ndim != 2 or self.Q.ndim != 2 or self.P.shape[1] != self.Q.shape[1]:
            raise ContractError(f"incompatible embedding shapes {self.P.shape} and {self.Q.shape}")
        if self.P.shape[1] == 0:
            raise ContractError("embedding size must be positive")

    @property
    def d(self) -> int:
        return self.P.shape[1]

    @property
    def n_parameters(self) -> int:
        return self.P.size + self.Q.size

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.P.copy(), self.Q.copy())


def init_embeddings(n_users: int, n_items: int, d: int = 64, rng_seed=None, std: float = 0.01) -> EmbeddingTable:
    """Draw P and Q i.i.d. from N(0, std^2)."""
    if n_users <= 0 or n_items <= 0 or d <= 0:
        raise ContractError(f"need positive sizes, got M={n_users}, N={n_items}, d={d}")
    rng = np.random.default_rng(rng_seed)
    return EmbeddingTable(rng.normal(0.0, std, size=(n_users, d)), rng.normal(0.0, std, size=(n_items, d)))


@dataclass(frozen=True)
class CascadeConfig:
    """Structure of the cascade.

    ``layers_per_behavior[b] == 0`` turns block ``b`` into the identity, so an
    all-zero list scores every task directly on (P, Q).
    """

    layers_per_behavior: tuple[int, ...] = (1,)
    use_shortcut: bool = True
    use_l2_norm: bool = True
    message_dropout_p: float = 0.0
    node_dropout_p: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "layers_per_behavior", tuple(int(x) for x in self.layers_per_behavior))
        if not self.layers_per_behavior:
            raise ConfigError("layers_per_behavior must have one entry per behavior")
        if any(x < 0 for x in self.layers_per_behavior):
            raise ConfigError(f"negative layer count in {self.layers_per_behavior}")
        for name in ("message_dropout_p", "node_dropout_p"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {p}")

    @property
    def n_behaviors(self) -> int:
        return len(self.layers_per_behavior)

    @classmethod
    def uniform(cls, n_behaviors: int, layers: int = 1, **kw) -> "CascadeConfig":
        return cls(layers_per_behavior=(layers,) * n_behaviors, **kw)


@dataclass
class CascadeState:
    """Everything one forward pass produced; kept for scoring and the backward pass.

    ``fused[b]`` is the (user, item) output of block b (``fused[0]`` is
    (P, Q)). ``behavioral_raw[b-1]`` holds block b's propagation output after
    message dropout and before normalization, ``norms[b-1]`` its row norms.
    ``graphs_used`` and ``message_masks`` record the dropout draws (None when
    inactive) so the backward pass can replay them.
    """

    fused: list[tuple[np.ndarray, np.ndarray]]
    behavioral_raw: list[tuple[np.ndarray, np.ndarray] | None] = field(default_factory=list)
    norms: list[tuple[np.ndarray, np.ndarray] | None] = field(default_factory=list)
    graphs_used: list[BehaviorGraph | None] = field(default_factory=list)
    message_masks: list[tuple[np.ndarray, np.ndarray] | None] = field(default_factory=list)

    @property
    def n_behaviors(self) -> int:
        return len(self.fused) - 1

    @property
    def final(self) -> tuple[np.ndarray, np.ndarray]:
        return self.fused[-1]


def l2_row_normalize(emb):
    """Divide each row by its Euclidean norm; all-zero rows stay zero with norm 0."""
    emb = np.asarray(emb, dtype=float)
    # scale by the row max first so tiny or huge entries do not under/overflow when squared
    peak = np.max(np.abs(emb), axis=1) if emb.shape[1] else np.zeros(emb.shape[0])
    safe_peak = np.where(peak > 0.0, peak, 1.0)
    scaled = emb / safe_peak[:, None]
    norms = peak * np.sqrt(np.einsum("ij,ij->i", scaled, scaled))
    safe = np.where(norms > 0.0, norms, 1.0)
    return emb / safe[:, None], norms


def _dropout_mask(shape, p: float, rng) -> np.ndarray:
    return (rng.random(shape) >= p) / (1.0 - p)


def message_dropout(emb, p: float, rng):
    """Zero each entry with probability ``p`` and scale survivors by ``1/(1-p)``."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"message dropout probability must lie in [0, 1), got {p}")
    if p == 0.0:
        return emb
    return emb * _dropout_mask(emb.shape, p, rng)


def forward_cascade(emb: EmbeddingTable, graphs: Sequence[BehaviorGraph], cfg: CascadeConfig, rng=None) -> CascadeState:
    """Run the cascade. With ``rng=None`` dropout is off and the pass is a pure function."""
    if len(graphs) != cfg.n_behaviors:
        raise ConfigError(f"{len(graphs)} graphs for a {cfg.n_behaviors}-behavior configuration")
    for g in graphs:
        if g.n_users != emb.P.shape[0] or g.n_items != emb.Q.shape[0]:
            raise ConfigError(f"{g!r} does not match embeddings of shape {emb.P.shape}/{emb.Q.shape}")
    state = CascadeState(fused=[(emb.P, emb.Q)])
    prev_u, prev_i = emb.P, emb.Q
    for g, layers in zip(graphs, cfg.layers_per_behavior):
        if layers == 0:
            state.behavioral_raw.append(None)
            state.norms.append(None)
            state.graphs_used.append(None)
            state.message_masks.append(None)
            state.fused.append((prev_u, prev_i))
            continue
        used = g if rng is None else node_dropout(g, cfg.node_dropout_p, rng)
        raw_u, raw_i = propagate(used, prev_u, prev_i, layers)
        mask = None
        if rng is not None and cfg.message_dropout_p > 0.0:
            mask = (_dropout_mask(raw_u.shape, cfg.message_dropout_p, rng),
                    _dropout_mask(raw_i.shape, cfg.message_dropout_p, rng))
            raw_u, raw_i = raw_u * mask[0], raw_i * mask[1]
        if cfg.use_l2_norm:
            til_u, nu = l2_row_normalize(raw_u)
            til_i, ni = l2_row_normalize(raw_i)
            state.norms.append((nu, ni))
        else:
            til_u, til_i = raw_u, raw_i
            state.norms.append(None)
        if cfg.use_shortcut:
            prev_u, prev_i = prev_u + til_u, prev_i + til_i
        else:
            prev_u, prev_i = til_u, til_i
        state.behavioral_raw.append((raw_u, raw_i))
        state.graphs_used.append(used)
        state.message_masks.append(mask)
        state.fused.append((prev_u, prev_i))
    return state


def score(state: CascadeState, b: int, u: int, i: int) -> float:
    """Inner product of user ``u`` and item ``i`` in block ``b``'s output (1-based)."""
    if not 1 <= b <= state.n_behaviors:
        raise ContractError(f"behavior block {b} outside [1, {state.n_behaviors}]")
    eu, ei = state.fused[b]
    if not 0 <= u < eu.shape[0] or not 0 <= i < ei.shape[0]:
        raise ContractError(f"index out of range: user {u}, item {i}")
    return float(eu[u] @ ei[i])


# -- persistence -------------------------------------------------------------

_MAGIC = b"CREMB\x00\x00\x00"
_VERSION = 1
_HEADER = struct.Struct("<8sIqqqq")  # magic, version, M, N, d, B


def save_embeddings(path, emb: EmbeddingTable, state: CascadeState, behavior_order: Sequence[str]) -> None:
    """Write final fused user/item matrices followed by raw P and Q as little-endian float64."""
    final_u, final_i = state.final
    m, d = emb.P.shape
    n = emb.Q.shape[0]
    names = [str(x).encode("utf-8") for x in behavior_order]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, m, n, d, len(names)))
        for raw in names:
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        for arr in (final_u, final_i, emb.P, emb.Q):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_embeddings(path):
    """Inverse of :func:`save_embeddings`: returns ``(table, (final_user, final_item), behavior_order)``."""
    buf = Path(path).read_bytes()
    magic, version, m, n, d, b = _HEADER.unpack_from(buf, 0)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not an embedding dump")
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = _HEADER.size
    order = []
    for _ in range(b):
        (k,) = struct.unpack_from("<I", buf, off)
        off += 4
        order.append(buf[off:off + k].decode("utf-8"))
        off += k
    mats = []
    for rows in (m, n, m, n):
        mats.append(np.frombuffer(buf, "<f8", rows * d, off).reshape(rows, d).astype(np.float64))
        off += 8 * rows * d
    return EmbeddingTable(mats[2], mats[3]), (mats[0], mats[1]), tuple(order)
