"""Full-ranking leave-one-out evaluation: ranks, HR@K and NDCG@K.

Each held-out item is ranked against every item the user has not interacted
with under the target behavior in training. Ties are resolved by the average
rule (the held-out item is credited with the mean position of its tie group),
which makes the result independent of any sort order. A ``"pessimistic"`` mode
places it after all tied items instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import ConfigError, ContractError
from .model import CascadeState, forward_cascade

__all__ = [
    "DEFAULT_KS",
    "RankingResult",
    "MetricsReport",
    "rank_from_scores",
    "rank_test_item",
    "hr_at_k",
    "ndcg_at_k",
    "evaluate_users",
    "evaluate",
    "report_from_ranks",
    "run_cold_start_eval",
]

DEFAULT_KS = (10, 20, 50, 80)
TIE_MODES = ("average", "pessimistic")


@dataclass(frozen=True)
class RankingResult:
    user_id: int
    rank: float
    candidate_count: int

    def __post_init__(self):
        if not 1 <= self.rank <= self.candidate_count:
            raise ContractError(f"rank {self.rank} outside [1, {self.candidate_count}]")


def rank_from_scores(scores, target: int, candidates=None, tie_mode: str = "average") -> tuple[float, int]:
    """Rank of ``target`` among ``candidates`` by counting; returns ``(rank, n_candidates)``.

    ``candidates`` is a boolean mask over items (default all items); the
    target always counts as a candidate.
    """
    if tie_mode not in TIE_MODES:
        raise ConfigError(f"tie_mode must be one of {TIE_MODES}, got {tie_mode!r}")
    scores = np.asarray(scores, dtype=float)
    cand = np.ones(len(scores), dtype=bool) if candidates is None else np.array(candidates, dtype=bool)
    cand[target] = True
    s = scores[target]
    higher = int(np.count_nonzero(cand & (scores > s)))
    ties = int(np.count_nonzero(cand & (scores == s))) - 1
    rank = 1 + higher + (0.5 * ties if tie_mode == "average" else ties)
    return float(rank), int(cand.sum())


def rank_test_item(state: CascadeState, user: int, test_item: int, train_exclusions=(),
                   tie_mode: str = "average") -> RankingResult:
    """Rank one user's held-out item under the final block's scores."""
    if test_item in train_exclusions:
        raise ContractError(f"test item {test_item} of user {user} is among its training items")
    eu, ei = state.final
    scores = ei @ eu[user]
    cand = np.ones(len(scores), dtype=bool)
    cand[list(train_exclusions)] = False
    rank, count = rank_from_scores(scores, test_item, cand, tie_mode)
    return RankingResult(int(user), rank, count)


def hr_at_k(r: RankingResult | float, k: int) -> int:
    if k < 1:
        raise ContractError(f"K must be >= 1, got {k}")
    rank = r.rank if isinstance(r, RankingResult) else r
    return int(rank <= k)


def ndcg_at_k(r: RankingResult | float, k: int) -> float:
    if k < 1:
        raise ContractError(f"K must be >= 1, got {k}")
    rank = r.rank if isinstance(r, RankingResult) else r
    return 1.0 / math.log2(rank + 1.0) if rank <= k else 0.0


def evaluate_users(final, users, items, exclusions=None, extra_exclusions=None,
                   tie_mode: str = "average", chunk: int = 2048, dtype=np.float64):
    """Vectorized ranks of ``items[k]`` for ``users[k]`` under the embeddings ``final = (U, I)``.

    ``exclusions[u]`` is the item set removed from user u's candidates;
    ``extra_exclusions`` maps a user to one more item to remove (e.g. the
    validation item at test time). Returns ``(ranks, candidate_counts)``.
    """
    if tie_mode not in TIE_MODES:
        raise ConfigError(f"tie_mode must be one of {TIE_MODES}, got {tie_mode!r}")
    U, I = final
    U = np.asarray(U, dtype=dtype)
    I = np.asarray(I, dtype=dtype)
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    ranks = np.empty(len(users))
    counts = np.empty(len(users), dtype=np.int64)
    for start in range(0, len(users), chunk):
        us = users[start:start + chunk]
        its = items[start:start + chunk]
        scores = U[us] @ I.T
        cand = np.ones_like(scores, dtype=bool)
        for row, u in enumerate(us.tolist()):
            if exclusions is not None and exclusions[u]:
                cand[row, list(exclusions[u])] = False
            if extra_exclusions is not None and u in extra_exclusions:
                cand[row, extra_exclusions[u]] = False
        rows = np.arange(len(us))
        cand[rows, its] = True
        target = scores[rows, its][:, None]
        higher = np.count_nonzero(cand & (scores > target), axis=1)
        ties = np.count_nonzero(cand & (scores == target), axis=1) - 1
        ranks[start:start + len(us)] = 1 + higher + (0.5 * ties if tie_mode == "average" else ties)
        counts[start:start + len(us)] = cand.sum(axis=1)
    return ranks, counts


@dataclass
class MetricsReport:
    ks: tuple[int, ...]
    hr: dict[int, float]
    ndcg: dict[int, float]
    n_users: int
    per_user_ranks: np.ndarray | None = field(default=None, repr=False)

    def to_table(self) -> str:
        """Aligned text table, one row per K."""
        lines = [f"{'K':>4}  {'HR@K':>8}  {'NDCG@K':>8}  {'users':>7}"]
        for k in self.ks:
            lines.append(f"{k:>4}  {self.hr[k]:>8.4f}  {self.ndcg[k]:>8.4f}  {self.n_users:>7}")
        return "\n".join(lines) + "\n"

    def to_kv_lines(self) -> str:
        """Machine-readable ``metric=... K=... value=... n_users=...`` lines."""
        out = []
        for name, table in (("HR", self.hr), ("NDCG", self.ndcg)):
            for k in self.ks:
                out.append(f"metric={name}\tK={k}\tvalue={table[k]:.10f}\tn_users={self.n_users}")
        return "\n".join(out) + "\n"

    def as_dict(self) -> dict[str, float]:
        d = {f"HR@{k}": self.hr[k] for k in self.ks}
        d.update({f"NDCG@{k}": self.ndcg[k] for k in self.ks})
        return d


def report_from_ranks(ranks, ks: Sequence[int] = DEFAULT_KS) -> MetricsReport:
    ranks = np.asarray(ranks, dtype=float)
    if len(ranks) == 0:
        raise ContractError("no users to evaluate")
    ks = tuple(sorted(int(k) for k in ks))
    if ks[0] < 1:
        raise ContractError(f"K must be >= 1, got {ks[0]}")
    hr = {k: float(np.mean(ranks <= k)) for k in ks}
    ndcg = {k: float(np.mean(np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0))) for k in ks}
    return MetricsReport(ks, hr, ndcg, len(ranks), ranks)


def evaluate(emb, graphs, cfg, split, ks: Sequence[int] = DEFAULT_KS, heldout: str = "test",
             users=None, exclude_validation: bool = False, tie_mode: str = "average",
             dtype=np.float64) -> MetricsReport:
    """Mean HR@K and NDCG@K over held-out users of ``split``.

    ``heldout`` picks ``"test"`` or ``"validation"``; ``users`` restricts the
    evaluated set (e.g. to cold-start users). ``dtype=np.float32`` scores in
    single precision.
    """
    held = {"test": split.test, "validation": split.validation}.get(heldout)
    if held is None:
        raise ConfigError(f"heldout must be 'test' or 'validation', got {heldout!r}")
    chosen = sorted(held) if users is None else sorted(int(u) for u in users if int(u) in held)
    if not chosen:
        raise ContractError("no held-out users to evaluate")
    state = forward_cascade(emb, graphs, cfg, rng=None)
    items = [held[u] for u in chosen]
    extra = split.validation if (exclude_validation and heldout == "test") else None
    ranks, _ = evaluate_users(state.final, chosen, items, split.train_items(), extra, tie_mode, dtype=dtype)
    return report_from_ranks(ranks, ks)


def run_cold_start_eval(log, n_cold: int, model, ks: Sequence[int] = DEFAULT_KS, rng_seed=0) -> MetricsReport:
    """Train a clone of ``model`` on a cold-start split and evaluate the cold users only.

    ``model`` is an unfitted-or-fitted :class:`~cascade_rec.estimator.CascadeRecommender`
    (or any estimator with the same ``fit``/``evaluate`` surface).
    """
    from sklearn.base import clone

    from .data import make_cold_start_split

    if n_cold < 1:
        raise ContractError("n_cold must be >= 1")
    split = make_cold_start_split(log, n_cold, rng_seed)
    tr = split.train
    cold = np.array(split.cold_users, dtype=np.int64)
    target_train = (tr.behaviors == tr.target) & np.isin(tr.users, cold)
    if target_train.any():
        raise AssertionError("cold users still have target-behavior training edges")
    est = clone(model).fit(split)
    return est.evaluate(split, ks=ks, users=split.cold_users)
