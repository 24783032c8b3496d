import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascade_rec.data import EventLog, Split, build_event_log, make_cold_start_split, split_leave_one_out
from cascade_rec.estimator import CascadeRecommender
from cascade_rec.exceptions import ConfigError, ContractError
from cascade_rec.graph import build_graphs
from cascade_rec.metrics import (
    MetricsReport,
    RankingResult,
    evaluate,
    evaluate_users,
    hr_at_k,
    ndcg_at_k,
    rank_from_scores,
    rank_test_item,
    report_from_ranks,
    run_cold_start_eval,
)
from cascade_rec.model import CascadeConfig, EmbeddingTable, forward_cascade
from cascade_rec.synth import FunnelParams, generate_synthetic
from oracles import sort_rank


def ranking_split(n_items, test):
    """Split whose only training events are views, so no item is excluded from ranking."""
    users = sorted(test)
    log = EventLog(np.array(users), np.zeros(len(users), dtype=np.int64), np.zeros(len(users), dtype=np.int64),
                   np.zeros(len(users), dtype=np.int64), max(users) + 1, n_items, ("view", "buy"))
    return Split(log, {}, dict(test))


def identity_model(P, Q):
    emb = EmbeddingTable(np.array(P, dtype=float), np.array(Q, dtype=float))
    cfg = CascadeConfig((0, 0))
    return emb, cfg


# -- ranks ----------------------------------------------------------------------------

def test_highest_score_ranks_first():
    assert rank_from_scores([0.1, 0.9, 0.3], 1) == (1.0, 3)


def test_all_equal_scores_average_rank():
    for c in (1, 2, 7, 10):
        assert rank_from_scores(np.zeros(c), 0)[0] == (c + 1) / 2


def test_pessimistic_ties():
    assert rank_from_scores([1.0, 1.0, 1.0, 2.0], 0, tie_mode="pessimistic") == (4.0, 4)


def test_excluded_items_are_not_candidates():
    rank, count = rank_from_scores([5.0, 4.0, 3.0], 2, candidates=[False, True, True])
    assert (rank, count) == (2.0, 2)


def test_unknown_tie_mode():
    with pytest.raises(ConfigError):
        rank_from_scores([1.0], 0, tie_mode="optimistic")


@pytest.mark.parametrize("seed", range(20))
def test_rank_matches_sort_oracle_on_ten_items(seed):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, 4, 10).astype(float)
    cand = rng.random(10) < 0.7
    target = int(rng.integers(10))
    for mode in ("average", "pessimistic"):
        assert rank_from_scores(scores, target, cand, mode) == sort_rank(scores, target, cand, mode)


def test_rank_test_item_uses_final_block_and_exclusions():
    emb, cfg = identity_model([[1.0]], [[3.0], [2.0], [1.0], [0.0]])
    from cascade_rec.graph import BehaviorMatrix, build_behavior_graph

    empty = [build_behavior_graph(BehaviorMatrix(b, 1, 4, np.zeros(0, np.int64), np.zeros(0, np.int64)))
             for b in range(2)]
    state = forward_cascade(emb, empty, cfg)
    assert rank_test_item(state, 0, 2).rank == 3.0
    r = rank_test_item(state, 0, 2, {0})
    assert (r.rank, r.candidate_count) == (2.0, 3)
    with pytest.raises(ContractError):
        rank_test_item(state, 0, 2, {2})


def test_ranking_result_bounds():
    with pytest.raises(ContractError):
        RankingResult(0, 5.0, 4)


# -- HR and NDCG ----------------------------------------------------------------------------

def test_hr_examples():
    assert hr_at_k(3, 10) == 1 and hr_at_k(11, 10) == 0


@pytest.mark.parametrize("k", [1, 5, 10, 80])
def test_hr_boundary_matches_top_k_membership(k):
    scores = -np.arange(100.0)
    top = set(np.argsort(-scores, kind="stable")[:k].tolist())
    for target in (k - 2, k - 1, k):
        if target < 0:
            continue
        rank, _ = rank_from_scores(scores, target)
        assert hr_at_k(rank, k) == int(target in top)


def test_ndcg_examples():
    assert ndcg_at_k(1, 10) == 1.0
    assert ndcg_at_k(3, 10) == 0.5
    assert ndcg_at_k(11, 10) == 0.0


def test_k_must_be_positive():
    with pytest.raises(ContractError):
        hr_at_k(1, 0)
    with pytest.raises(ContractError):
        ndcg_at_k(1, 0)


# -- reports ------------------------------------------------------------------------------

def test_single_user_rank_one():
    rep = report_from_ranks([1.0], ks=(10,))
    assert rep.hr[10] == 1.0 and rep.ndcg[10] == 1.0 and rep.n_users == 1


def test_evaluate_two_users_ranks_one_and_hundred():
    # 101 items with descending scores; user 0 holds item 0, user 1 item 99
    P = [[1.0], [1.0]]
    Q = [[100.0 - k] for k in range(101)]
    emb, cfg = identity_model(P, Q)
    split = ranking_split(101, {0: 0, 1: 99})
    graphs = build_graphs(split.train)
    rep = evaluate(emb, graphs, cfg, split, ks=(10,))
    assert rep.per_user_ranks.tolist() == [1.0, 100.0]
    assert rep.hr[10] == 0.5 and rep.ndcg[10] == 0.5


@settings(max_examples=50)
@given(st.lists(st.integers(1, 200), min_size=1, max_size=50))
def test_report_monotone_in_k_and_ndcg_below_hr(ranks):
    rep = report_from_ranks(ranks, ks=(1, 5, 10, 20, 50, 80, 200))
    hrs = [rep.hr[k] for k in rep.ks]
    ndcgs = [rep.ndcg[k] for k in rep.ks]
    assert all(0 <= h <= 1 for h in hrs)
    assert hrs == sorted(hrs) and ndcgs == sorted(ndcgs)
    assert all(n <= h + 1e-15 for n, h in zip(ndcgs, hrs))


def test_report_serializations():
    rep = report_from_ranks([1.0, 3.0], ks=(20, 10))
    assert rep.ks == (10, 20)
    kv = rep.to_kv_lines().splitlines()
    assert kv[0] == "metric=HR\tK=10\tvalue=1.0000000000\tn_users=2"
    assert kv[2] == "metric=NDCG\tK=10\tvalue=0.7500000000\tn_users=2"
    table = rep.to_table().splitlines()
    assert table[0].split() == ["K", "HR@K", "NDCG@K", "users"]
    assert table[1].split() == ["10", "1.0000", "0.7500", "2"]
    assert rep.as_dict()["NDCG@20"] == 0.75


def test_report_rejects_empty():
    with pytest.raises(ContractError):
        report_from_ranks([])


# -- vectorized evaluation ------------------------------------------------------------------------

def test_evaluate_users_matches_per_user_oracle():
    rng = np.random.default_rng(0)
    U = rng.integers(-2, 3, size=(15, 2)).astype(float)
    I = rng.integers(-2, 3, size=(30, 2)).astype(float)
    users = np.arange(15)
    items = rng.integers(0, 30, 15)
    excl = [set(rng.choice(30, 5, replace=False).tolist()) - {int(items[u])} for u in users]
    ranks, counts = evaluate_users((U, I), users, items, excl, chunk=4)
    for u in users:
        cand = np.ones(30, dtype=bool)
        cand[list(excl[u])] = False
        rank, count = sort_rank(I @ U[u], int(items[u]), cand)
        assert ranks[u] == rank and counts[u] == count


def test_evaluate_invariant_to_item_permutation():
    rng = np.random.default_rng(1)
    U = rng.integers(-1, 2, size=(10, 2)).astype(float)
    I = rng.integers(-1, 2, size=(25, 2)).astype(float)
    items = rng.integers(0, 25, 10)
    perm = rng.permutation(25)
    inv = np.argsort(perm)
    a, _ = evaluate_users((U, I), np.arange(10), items)
    b, _ = evaluate_users((U, I[perm]), np.arange(10), inv[items])
    assert np.array_equal(a, b)


def test_extra_exclusion_removes_validation_item():
    U = np.array([[1.0]])
    I = np.array([[3.0], [2.0], [1.0]])
    with_val, _ = evaluate_users((U, I), [0], [2])
    without, counts = evaluate_users((U, I), [0], [2], extra_exclusions={0: 0})
    assert with_val.tolist() == [3.0] and without.tolist() == [2.0] and counts.tolist() == [2]


def test_float32_scoring_close_to_float64():
    rng = np.random.default_rng(2)
    U, I = rng.normal(size=(20, 4)), rng.normal(size=(50, 4))
    items = rng.integers(0, 50, 20)
    a, _ = evaluate_users((U, I), np.arange(20), items)
    b, _ = evaluate_users((U, I), np.arange(20), items, dtype=np.float32)
    assert np.abs(a - b).max() <= 1.0


def test_evaluate_heldout_selection():
    emb, cfg = identity_model([[1.0], [1.0]], [[2.0], [1.0], [0.0]])
    split = ranking_split(3, {0: 0, 1: 2})
    split.validation[1] = 1
    graphs = build_graphs(split.train)
    assert evaluate(emb, graphs, cfg, split, ks=(1,), heldout="validation").n_users == 1
    with pytest.raises(ConfigError):
        evaluate(emb, graphs, cfg, split, heldout="train")
    with pytest.raises(ContractError):
        evaluate(emb, graphs, cfg, split, users=[5])


# -- cold start -------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def funnel_log():
    events = generate_synthetic(FunnelParams(n_users=30, n_items=20), rng_seed=5)
    return build_event_log(events, ("view", "cart", "buy"))


def small_model():
    return CascadeRecommender(embedding_dim=8, batch_size=16, max_epochs=5, patience=5, random_state=0)


def test_cold_start_eval_is_deterministic(funnel_log):
    a = run_cold_start_eval(funnel_log, 4, small_model(), ks=(10,), rng_seed=1)
    b = run_cold_start_eval(funnel_log, 4, small_model(), ks=(10,), rng_seed=1)
    assert a.n_users == 4 and np.array_equal(a.per_user_ranks, b.per_user_ranks)


def test_cold_start_with_every_user_equals_standard_evaluate(funnel_log):
    n_all = len(split_leave_one_out(funnel_log).test)
    rep = run_cold_start_eval(funnel_log, n_all, small_model(), ks=(10, 20), rng_seed=0)
    split = make_cold_start_split(funnel_log, n_all, 0)
    model = small_model().fit(split)
    std = evaluate(model.embeddings_, model.graphs_, model.cascade_config_, split, ks=(10, 20))
    assert rep.n_users == std.n_users == n_all
    assert rep.hr == std.hr and rep.ndcg == std.ndcg


def test_cold_start_needs_a_user(funnel_log):
    with pytest.raises(ContractError):
        run_cold_start_eval(funnel_log, 0, small_model())


def test_metrics_report_is_plain_data():
    rep = MetricsReport((10,), {10: 0.5}, {10: 1 / math.log2(3)}, 2)
    assert rep.as_dict() == {"HR@10": 0.5, "NDCG@10": 1 / math.log2(3)}
