import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascade_rec.data import (
    EventLog,
    RawEvent,
    Schema,
    build_event_log,
    dedup_earliest,
    make_cold_start_split,
    parse_events,
    read_event_log,
    read_split,
    split_leave_one_out,
    write_event_log,
    write_split,
)
from cascade_rec.exceptions import ConfigError, ParseError, SplitError

ORDER = ("view", "cart", "buy")


def ev(u, i, b, t):
    return RawEvent(u, i, b, t)


# -- parse_events ---------------------------------------------------------

def test_parse_tsv_line():
    assert parse_events(b"u1\ti9\tview\t100\n") == [RawEvent("u1", "i9", "view", 100)]


def test_parse_empty_file():
    assert parse_events(io.BytesIO(b"")) == []


def test_parse_short_line_reports_line_number():
    with pytest.raises(ParseError) as info:
        parse_events(b"u1\ti1\tview\t1\nu2\ti2\tbuy\n")
    assert info.value.line_no == 2
    assert "expected 4 fields" in str(info.value)


def test_parse_unknown_behavior_lists_known_names():
    with pytest.raises(ParseError) as info:
        parse_events(b"u\ti\tcollect\t3\n", known_behaviors=ORDER)
    assert "collect" in str(info.value)
    assert "view" in str(info.value) and "buy" in str(info.value)


@pytest.mark.parametrize("line", [b"u\ti\tview\tabc\n", b"u\ti\tview\t-4\n", b"\ti\tview\t4\n"])
def test_parse_rejects_bad_fields(line):
    with pytest.raises(ParseError):
        parse_events(line)


def test_parse_custom_schema_csv_with_header():
    text = "ts,behavior,extra,item,user\n7,buy,x,i1,u1\n"
    schema = Schema(("timestamp", "behavior", "_", "item", "user"), delimiter=",", skip_header=True)
    assert parse_events(io.StringIO(text), schema) == [RawEvent("u1", "i1", "buy", 7)]


def test_schema_requires_all_fields():
    with pytest.raises(ConfigError):
        Schema(("user", "item", "timestamp"))


# -- dedup_earliest -----------------------------------------------------------

def test_dedup_keeps_earliest():
    out = dedup_earliest([ev("u", "i", "buy", 5), ev("u", "i", "buy", 2)])
    assert out == [ev("u", "i", "buy", 2)]


def test_dedup_distinct_keys_unchanged():
    events = [ev("u", "i", "buy", 5), ev("u", "j", "buy", 2), ev("u", "i", "view", 1)]
    assert dedup_earliest(events) == events


def _dedup_oracle(events):
    groups = {}
    for idx, e in enumerate(events):
        groups.setdefault((e.user_key, e.item_key, e.behavior_name), []).append((e.timestamp, idx))
    keep = sorted(min(v)[1] for v in groups.values())
    return [events[k] for k in keep]


def test_dedup_tie_keeps_first_occurrence():
    a = RawEvent("u", "i", "view", 7)
    b = RawEvent("u", "i", "view", 7)
    out = dedup_earliest([a, b])
    assert len(out) == 1 and out[0] is a
    assert out == _dedup_oracle([a, b])


event_lists = st.lists(
    st.builds(RawEvent, st.sampled_from("abc"), st.sampled_from("xyz"), st.sampled_from(ORDER),
              st.integers(0, 5)),
    max_size=40,
)


@given(event_lists)
def test_dedup_matches_groupby_oracle_and_is_idempotent(events):
    once = dedup_earliest(events)
    assert once == _dedup_oracle(events)
    assert dedup_earliest(once) == once


# -- build_event_log ------------------------------------------------------------

def test_build_counts_users_and_items():
    log = build_event_log([ev("a", "x", "view", 1), ev("b", "y", "buy", 2), ev("a", "z", "cart", 3)], ORDER)
    assert (log.n_users, log.n_items) == (2, 3)
    assert log.users.tolist() == [0, 1, 0]
    assert log.items.tolist() == [0, 1, 2]
    assert log.behaviors.tolist() == [0, 2, 1]


def test_build_rejects_behavior_outside_order():
    with pytest.raises(ConfigError):
        build_event_log([ev("a", "x", "collect", 1)], ORDER)


@given(event_lists)
def test_build_is_deterministic_and_dense(events):
    first = build_event_log(events, ORDER)
    second = build_event_log(list(events), ORDER)
    assert first.user_keys == second.user_keys and first.item_keys == second.item_keys
    assert np.array_equal(first.users, second.users) and np.array_equal(first.items, second.items)
    # every assigned id is used
    assert set(first.users.tolist()) == set(range(first.n_users))
    assert set(first.items.tolist()) == set(range(first.n_items))


def test_event_log_rejects_duplicate_behaviors():
    with pytest.raises(ConfigError):
        EventLog([], [], [], [], 0, 0, ("buy", "buy"))


# -- leave-one-out ------------------------------------------------------------

def _log(rows, n_users=None, n_items=None):
    rows = np.array(rows, dtype=np.int64).reshape(-1, 4)
    return EventLog(rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3],
                    n_users or int(rows[:, 0].max()) + 1, n_items or int(rows[:, 1].max()) + 1, ORDER)


def test_loo_takes_last_two_buys():
    log = _log([(0, 0, 2, 1), (0, 1, 2, 2), (0, 2, 2, 3), (1, 0, 0, 5)])
    split = split_leave_one_out(log)
    # oracle: sort buys by timestamp, take the last two
    buys = sorted([(1, 0), (2, 1), (3, 2)])
    assert split.test == {0: buys[-1][1]}
    assert split.validation == {0: buys[-2][1]}
    assert split.train.pairs(2) == {(0, 0)}


def test_loo_user_with_one_buy_stays_in_train():
    log = _log([(0, 0, 2, 1), (0, 1, 2, 2), (0, 2, 2, 3), (1, 3, 2, 1)])
    split = split_leave_one_out(log)
    assert 1 not in split.test and 1 not in split.validation
    assert (1, 3) in split.train.pairs(2)


def test_loo_view_only_user_absent():
    log = _log([(0, 0, 2, 1), (0, 1, 2, 2), (0, 2, 2, 3), (1, 0, 0, 1), (1, 1, 0, 2)])
    split = split_leave_one_out(log)
    assert 1 not in split.test and 1 not in split.validation
    assert split.train.pairs(0) == {(1, 0), (1, 1)}


def test_loo_tie_broken_by_input_order():
    log = _log([(0, 0, 2, 1), (0, 1, 2, 5), (0, 2, 2, 5)])
    split = split_leave_one_out(log)
    assert split.test[0] == 2 and split.validation[0] == 1


def test_loo_empty_test_set():
    with pytest.raises(SplitError, match="empty test set"):
        split_leave_one_out(_log([(0, 0, 2, 1), (0, 1, 0, 2)]))


def _random_log(seed, n_users=12, n_items=9, n_events=120):
    rng = np.random.default_rng(seed)
    users = rng.integers(0, n_users, n_events)
    items = rng.integers(0, n_items, n_events)
    behaviors = rng.integers(0, 3, n_events)
    keys = np.unique(np.stack([users, items, behaviors], 1), axis=0, return_index=True)[1]
    keys.sort()
    stamps = rng.integers(0, 50, len(keys))
    return EventLog(users[keys], items[keys], behaviors[keys], stamps, n_users, n_items, ORDER)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_loo_partitions_target_events(seed):
    log = _random_log(seed)
    try:
        split = split_leave_one_out(log)
    except SplitError:
        return
    train_buys = split.train.pairs(2)
    for u in split.test:
        events = {(int(i)) for uu, i, b in zip(log.users, log.items, log.behaviors) if uu == u and b == 2}
        held = {split.test[u], split.validation[u]}
        mine = {i for (uu, i) in train_buys if uu == u}
        assert len(held) == 2
        assert mine | held == events
        assert not (mine & held)
    # auxiliary events untouched
    aux = log.behaviors != 2
    assert len(split.train) == len(log) - 2 * len(split.test)
    assert (split.train.behaviors != 2).sum() == aux.sum()


# -- cold start -----------------------------------------------------------------

def test_cold_start_zero_is_plain_split():
    log = _random_log(3)
    a = make_cold_start_split(log, 0, 5)
    b = split_leave_one_out(log, 5)
    assert a.test == b.test and a.validation == b.validation
    assert np.array_equal(a.train.users, b.train.users) and np.array_equal(a.train.items, b.train.items)


def test_cold_start_removes_pair_in_all_behaviors():
    # user 0: buys 0,1,2,3 (2 and 3 held out), views item 0 and item 5
    rows = [(0, 0, 2, 1), (0, 1, 2, 2), (0, 2, 2, 3), (0, 3, 2, 4), (0, 0, 0, 0), (0, 5, 0, 0)]
    split = make_cold_start_split(_log(rows, n_items=6), 1, 0)
    assert split.cold_users == (0,)
    assert split.train.pairs(2) == set()
    assert split.train.pairs(0) == {(0, 5)}
    assert split.test == {0: 3}
    assert 0 not in split.validation


def test_cold_start_seeded_and_monotone():
    log = _random_log(11, n_users=30, n_events=400)
    base = split_leave_one_out(log, 4)
    n = min(3, len(base.test))
    a = make_cold_start_split(log, n, 4)
    b = make_cold_start_split(log, n, 4)
    assert a.cold_users == b.cold_users and len(a.cold_users) == n
    base_rows = set(zip(base.train.users.tolist(), base.train.items.tolist(), base.train.behaviors.tolist()))
    cold_rows = set(zip(a.train.users.tolist(), a.train.items.tolist(), a.train.behaviors.tolist()))
    assert cold_rows <= base_rows
    for u in a.cold_users:
        assert u in a.test
        assert not any(uu == u for uu, _ in a.train.pairs(2))


def test_cold_start_too_many_users():
    log = _random_log(11, n_users=30, n_events=400)
    eligible = len(split_leave_one_out(log).test)
    with pytest.raises(SplitError):
        make_cold_start_split(log, eligible + 1)


# -- persistence ------------------------------------------------------------------

def test_split_round_trip(tmp_path):
    events = [ev("u1", "a", "view", 1), ev("u1", "a", "buy", 2), ev("u1", "b", "buy", 3),
              ev("u1", "c", "buy", 4), ev("u2", "a", "cart", 9)]
    log = build_event_log(events, ORDER)
    write_event_log(log, tmp_path / "log")
    again = read_event_log(tmp_path / "log")
    assert again.user_keys == ("u1", "u2") and again.n_items == 3
    assert np.array_equal(again.timestamps, log.timestamps)

    split = split_leave_one_out(log)
    write_split(split, tmp_path / "split", seed=0)
    back = read_split(tmp_path / "split")
    assert back.test == split.test and back.validation == split.validation
    assert back.test_time == {0: 4}
    assert np.array_equal(back.train.items, split.train.items)
    assert back.train.behavior_order == ORDER
    first = (tmp_path / "split" / "train.tsv").read_text().splitlines()[0]
    assert first == "0\t0\t0\t1"
