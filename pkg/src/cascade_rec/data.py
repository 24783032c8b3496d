"""Interaction-log ingestion: parsing, deduplication, id mapping and splits.

Raw logs are delimiter-separated text with one ``(user, item, behavior,
timestamp)`` record per line. After :func:`dedup_earliest` and
:func:`build_event_log` every user and item carries a dense integer id and
behaviors are numbered by their position in the cascade order, the last
position being the target behavior.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import ConfigError, ParseError, SplitError

__all__ = [
    "RawEvent",
    "Schema",
    "EventLog",
    "Split",
    "parse_events",
    "dedup_earliest",
    "build_event_log",
    "split_leave_one_out",
    "make_cold_start_split",
    "write_event_log",
    "read_event_log",
    "write_split",
    "read_split",
]

_FIELDS = ("user", "item", "behavior", "timestamp")


@dataclass(frozen=True)
class RawEvent:
    user_key: str
    item_key: str
    behavior_name: str
    timestamp: int

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValueError(f"negative timestamp {self.timestamp}")
        if not self.behavior_name:
            raise ValueError("empty behavior name")


@dataclass(frozen=True)
class Schema:
    """Column layout of a raw log.

    ``columns`` names the field held by each column; names other than
    user/item/behavior/timestamp are ignored columns (use ``"_"``).
    """

    columns: tuple[str, ...] = _FIELDS
    delimiter: str = "\t"
    skip_header: bool = False

    def __post_init__(self):
        missing = [f for f in _FIELDS if f not in self.columns]
        if missing:
            raise ConfigError(f"schema lacks column(s) {missing}; got {list(self.columns)}")
        if len(set(c for c in self.columns if c in _FIELDS)) != len(_FIELDS):
            raise ConfigError(f"duplicate field in schema columns {list(self.columns)}")
        if not self.delimiter:
            raise ConfigError("empty delimiter")

    @classmethod
    def from_string(cls, text: str, delimiter: str = "\t", skip_header: bool = False) -> "Schema":
        """Build a schema from a comma-separated column list such as ``"user,item,_,behavior,timestamp"``."""
        cols = tuple(c.strip() for c in text.split(",") if c.strip())
        return cls(columns=cols, delimiter=delimiter, skip_header=skip_header)


def parse_events(source, schema: Schema | None = None, known_behaviors: Iterable[str] | None = None) -> list[RawEvent]:
    """Parse a delimiter-separated byte or text stream into raw events.

    Blank lines are skipped. A line with the wrong number of fields, a
    non-integer or negative timestamp, or an empty key raises
    :class:`ParseError` naming the 1-based line number. When
    ``known_behaviors`` is given, any other behavior name is rejected.
    """
    schema = schema or Schema()
    known = None if known_behaviors is None else list(known_behaviors)
    if isinstance(source, (str, Path)):
        with open(source, "rb") as fh:
            return parse_events(fh, schema, known)
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)

    pos = {name: schema.columns.index(name) for name in _FIELDS}
    width = len(schema.columns)
    events = []
    for line_no, raw in enumerate(source, start=1):
        line = raw.decode("utf-8") if isinstance(raw, (bytes, bytearray)) else raw
        line = line.rstrip("\r\n")
        if line_no == 1 and schema.skip_header:
            continue
        if not line.strip():
            continue
        parts = line.split(schema.delimiter)
        if len(parts) != width:
            raise ParseError(line_no, f"expected {width} fields, found {len(parts)}")
        user, item, behavior, ts = (parts[pos[f]].strip() for f in _FIELDS)
        if not user or not item:
            raise ParseError(line_no, "empty user or item key")
        if not behavior:
            raise ParseError(line_no, "empty behavior name")
        if known is not None and behavior not in known:
            raise ParseError(line_no, f"unknown behavior {behavior!r}; known behaviors: {known}")
        try:
            t = int(ts)
        except ValueError:
            try:
                tf = float(ts)
            except ValueError:
                raise ParseError(line_no, f"timestamp {ts!r} is not an integer") from None
            if not tf.is_integer():
                raise ParseError(line_no, f"timestamp {ts!r} is not an integer") from None
            t = int(tf)
        if t < 0:
            raise ParseError(line_no, f"negative timestamp {t}")
        events.append(RawEvent(user, item, behavior, t))
    return events


def dedup_earliest(events: Sequence[RawEvent]) -> list[RawEvent]:
    """Keep one event per (user, item, behavior): the earliest, first occurrence on ties.

    Survivors are returned in their original input order.
    """
    best: dict[tuple[str, str, str], int] = {}
    for idx, ev in enumerate(events):
        key = (ev.user_key, ev.item_key, ev.behavior_name)
        cur = best.get(key)
        if cur is None or ev.timestamp < events[cur].timestamp:
            best[key] = idx
    return [events[i] for i in sorted(best.values())]


@dataclass
class EventLog:
    """Events with dense ids. Arrays are aligned; row ``k`` is one event."""

    users: np.ndarray
    items: np.ndarray
    behaviors: np.ndarray
    timestamps: np.ndarray
    n_users: int
    n_items: int
    behavior_order: tuple[str, ...]
    user_keys: tuple[str, ...] = ()
    item_keys: tuple[str, ...] = ()

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.behaviors = np.asarray(self.behaviors, dtype=np.int64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.behavior_order = tuple(self.behavior_order)
        n = len(self.users)
        if not (len(self.items) == len(self.behaviors) == len(self.timestamps) == n):
            raise ValueError("event arrays must have equal length")
        if len(set(self.behavior_order)) != len(self.behavior_order):
            raise ConfigError(f"duplicate behavior in order {list(self.behavior_order)}")
        if n:
            if self.users.min() < 0 or self.users.max() >= self.n_users:
                raise ValueError("user id out of range")
            if self.items.min() < 0 or self.items.max() >= self.n_items:
                raise ValueError("item id out of range")
            if self.behaviors.min() < 0 or self.behaviors.max() >= len(self.behavior_order):
                raise ValueError("behavior id out of range")

    def __len__(self):
        return len(self.users)

    @property
    def n_behaviors(self) -> int:
        return len(self.behavior_order)

    @property
    def target(self) -> int:
        return self.n_behaviors - 1

    def behavior_counts(self) -> dict[str, int]:
        counts = np.bincount(self.behaviors, minlength=self.n_behaviors)
        return {name: int(c) for name, c in zip(self.behavior_order, counts)}

    def subset(self, mask: np.ndarray) -> "EventLog":
        """Events selected by a boolean mask; id spaces are unchanged."""
        return EventLog(
            self.users[mask], self.items[mask], self.behaviors[mask], self.timestamps[mask],
            self.n_users, self.n_items, self.behavior_order, self.user_keys, self.item_keys,
        )

    def pairs(self, behavior: int) -> set[tuple[int, int]]:
        sel = self.behaviors == behavior
        return set(zip(self.users[sel].tolist(), self.items[sel].tolist()))


def build_event_log(events: Sequence[RawEvent], behavior_order: Sequence[str]) -> EventLog:
    """Assign dense ids by first appearance and number behaviors by ``behavior_order``."""
    order = tuple(behavior_order)
    if not order:
        raise ConfigError("behavior_order is empty")
    if len(set(order)) != len(order):
        raise ConfigError(f"duplicate behavior in order {list(order)}")
    bpos = {name: k for k, name in enumerate(order)}
    uid: dict[str, int] = {}
    iid: dict[str, int] = {}
    n = len(events)
    users = np.empty(n, dtype=np.int64)
    items = np.empty(n, dtype=np.int64)
    behaviors = np.empty(n, dtype=np.int64)
    stamps = np.empty(n, dtype=np.int64)
    for k, ev in enumerate(events):
        b = bpos.get(ev.behavior_name)
        if b is None:
            raise ConfigError(f"behavior {ev.behavior_name!r} is not in behavior_order {list(order)}")
        users[k] = uid.setdefault(ev.user_key, len(uid))
        items[k] = iid.setdefault(ev.item_key, len(iid))
        behaviors[k] = b
        stamps[k] = ev.timestamp
    return EventLog(users, items, behaviors, stamps, len(uid), len(iid), order, tuple(uid), tuple(iid))


@dataclass
class Split:
    """Leave-one-out split: a training log plus one held-out target item per user."""

    train: EventLog
    validation: dict[int, int]
    test: dict[int, int]
    validation_time: dict[int, int] = field(default_factory=dict)
    test_time: dict[int, int] = field(default_factory=dict)
    cold_users: tuple[int, ...] = ()

    def train_items(self, behavior: int | None = None) -> list[set[int]]:
        """Per-user item sets of one behavior in train (target behavior by default)."""
        b = self.train.target if behavior is None else behavior
        out: list[set[int]] = [set() for _ in range(self.train.n_users)]
        sel = self.train.behaviors == b
        for u, i in zip(self.train.users[sel].tolist(), self.train.items[sel].tolist()):
            out[u].add(i)
        return out


def _target_positions_by_user(log: EventLog, rng_seed: int | None, shuffle_ties: bool) -> dict[int, np.ndarray]:
    """Indices of target-behavior events per user, oldest first."""
    idx = np.flatnonzero(log.behaviors == log.target)
    if shuffle_ties:
        rng = np.random.default_rng(rng_seed)
        tie = rng.permutation(len(idx))
    else:
        tie = np.arange(len(idx))
    # lexsort: last key is primary
    order = np.lexsort((tie, log.timestamps[idx], log.users[idx]))
    idx = idx[order]
    users = log.users[idx]
    groups: dict[int, np.ndarray] = {}
    if len(idx) == 0:
        return groups
    cuts = np.flatnonzero(np.diff(users)) + 1
    for chunk in np.split(idx, cuts):
        groups[int(log.users[chunk[0]])] = chunk
    return groups


def split_leave_one_out(
    log: EventLog, rng_seed: int | None = 0, min_target: int = 3, shuffle_ties: bool = False
) -> Split:
    """Hold out each eligible user's latest target interaction for test and the one before for validation.

    Users with fewer than ``min_target`` target interactions stay entirely in
    train. Auxiliary-behavior events always stay in train. Timestamp ties are
    broken by input order unless ``shuffle_ties`` is set, in which case
    ``rng_seed`` drives a random tie order.
    """
    if min_target < 3:
        raise ConfigError("min_target must be at least 3 (one each for train, validation and test)")
    groups = _target_positions_by_user(log, rng_seed, shuffle_ties)
    keep = np.ones(len(log), dtype=bool)
    validation, test, vtime, ttime = {}, {}, {}, {}
    for u, chunk in groups.items():
        if len(chunk) < min_target:
            continue
        t_idx, v_idx = chunk[-1], chunk[-2]
        keep[t_idx] = keep[v_idx] = False
        test[u] = int(log.items[t_idx])
        ttime[u] = int(log.timestamps[t_idx])
        validation[u] = int(log.items[v_idx])
        vtime[u] = int(log.timestamps[v_idx])
    if not test:
        raise SplitError("empty test set: no user has enough target-behavior interactions")
    return Split(log.subset(keep), validation, test, vtime, ttime)


def make_cold_start_split(
    log: EventLog, n_cold: int, rng_seed: int | None = 0, min_target: int = 3, shuffle_ties: bool = False
) -> Split:
    """Leave-one-out split in which ``n_cold`` sampled test users lose their target history.

    For each sampled user every target-behavior training interaction is
    removed, together with that user's interactions with the same items in
    all other behaviors. Their test items are kept; their validation items
    are dropped so that model selection sees no target signal for them.
    """
    base = split_leave_one_out(log, rng_seed, min_target, shuffle_ties)
    eligible = np.array(sorted(base.test), dtype=np.int64)
    if n_cold < 0 or n_cold > len(eligible):
        raise SplitError(f"n_cold={n_cold} but only {len(eligible)} test-eligible users")
    if n_cold == 0:
        return base
    rng = np.random.default_rng(rng_seed)
    cold = np.sort(rng.choice(eligible, size=n_cold, replace=False))
    train = base.train
    is_cold = np.zeros(log.n_users, dtype=bool)
    is_cold[cold] = True
    tgt = (train.behaviors == train.target) & is_cold[train.users]
    removed = set(zip(train.users[tgt].tolist(), train.items[tgt].tolist()))
    pair_hit = np.fromiter(
        ((u, i) in removed for u, i in zip(train.users.tolist(), train.items.tolist())),
        dtype=bool, count=len(train),
    )
    keep = ~(tgt | pair_hit)
    cold_set = set(cold.tolist())
    validation = {u: i for u, i in base.validation.items() if u not in cold_set}
    vtime = {u: t for u, t in base.validation_time.items() if u not in cold_set}
    return Split(train.subset(keep), validation, dict(base.test), vtime, dict(base.test_time),
                 tuple(int(u) for u in cold))


# -- persistence -------------------------------------------------------------

def _write_tsv(path: Path, users, items, behaviors, stamps) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in zip(users, items, behaviors, stamps):
            fh.write("%d\t%d\t%d\t%d\n" % row)


def _read_tsv(path: Path) -> np.ndarray:
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        return np.zeros((0, 4), dtype=np.int64)
    return np.loadtxt(io.StringIO(text), dtype=np.int64, delimiter="\t", ndmin=2)


def _sidecar(log: EventLog) -> dict:
    from . import __version__

    return {
        "version": __version__,
        "n_users": log.n_users,
        "n_items": log.n_items,
        "behavior_order": list(log.behavior_order),
        "counts": log.behavior_counts(),
        "user_keys": list(log.user_keys),
        "item_keys": list(log.item_keys),
    }


def write_event_log(log: EventLog, directory) -> Path:
    """Write ``events.tsv`` plus the ``log.json`` sidecar; returns the directory."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _write_tsv(d / "events.tsv", log.users, log.items, log.behaviors, log.timestamps)
    (d / "log.json").write_text(json.dumps(_sidecar(log), indent=1) + "\n", encoding="utf-8")
    return d


def _log_from(rows: np.ndarray, meta: dict) -> EventLog:
    return EventLog(
        rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3],
        meta["n_users"], meta["n_items"], tuple(meta["behavior_order"]),
        tuple(meta.get("user_keys", ())), tuple(meta.get("item_keys", ())),
    )


def read_event_log(directory) -> EventLog:
    d = Path(directory)
    meta = json.loads((d / "log.json").read_text(encoding="utf-8"))
    return _log_from(_read_tsv(d / "events.tsv"), meta)


def write_split(split: Split, directory, seed: int | None = None) -> Path:
    """Write train/validation/test TSVs (user_id, item_id, behavior_id, timestamp) and ``split.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tr = split.train
    _write_tsv(d / "train.tsv", tr.users, tr.items, tr.behaviors, tr.timestamps)
    for name, held, times in (("validation", split.validation, split.validation_time),
                              ("test", split.test, split.test_time)):
        us = sorted(held)
        _write_tsv(d / f"{name}.tsv", us, [held[u] for u in us], [tr.target] * len(us),
                   [times.get(u, 0) for u in us])
    meta = _sidecar(tr)
    meta.update({
        "n_validation": len(split.validation),
        "n_test": len(split.test),
        "cold_users": list(split.cold_users),
        "seed": seed,
    })
    (d / "split.json").write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")
    return d


def read_split(directory) -> Split:
    d = Path(directory)
    meta = json.loads((d / "split.json").read_text(encoding="utf-8"))
    train = _log_from(_read_tsv(d / "train.tsv"), meta)
    held = {}
    for name in ("validation", "test"):
        rows = _read_tsv(d / f"{name}.tsv")
        held[name] = ({int(r[0]): int(r[1]) for r in rows}, {int(r[0]): int(r[3]) for r in rows})
    return Split(train, held["validation"][0], held["test"][0], held["validation"][1], held["test"][1],
                 tuple(meta.get("cold_users", ())))
