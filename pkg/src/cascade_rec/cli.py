"""Experiment runner.

    cascade-rec synth  --out runs/toy
    cascade-rec ingest --data raw.tsv --behaviors "view>cart>buy" --out runs/log
    cascade-rec split  --data runs/log --out runs/split
    cascade-rec train  --data runs/split --out runs/train
    cascade-rec eval   --data runs/split --embeddings runs/train/embeddings.bin --out runs/eval
    cascade-rec cold-start --data raw.tsv --n-cold 1000 --out runs/cold
    cascade-rec sweep  --data raw.tsv --sweep-orders "view>cart>buy;cart>view>buy" --out runs/sweep
    cascade-rec bench  --data raw.tsv --out runs/bench

Settings come from a flat ``key = value`` file (``--config``), then from
command-line flags, which mirror the keys (``learning_rate`` is
``--learning-rate``). Every run writes ``config.resolved`` with all defaults
filled in; feeding it back through ``--config`` repeats the run.

Exit status: 0 on success, 2 for configuration errors, 3 for runtime failures
(a ``FAILED`` file in the output directory then describes the error).
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
import time
import traceback
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .data import (
    EventLog,
    Schema,
    Split,
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
from .estimator import CascadeRecommender
from .exceptions import CascadeRecError, ConfigError, ParseError, SplitError
from .metrics import evaluate_users, report_from_ranks
from .model import CascadeState, load_embeddings, save_embeddings
from .synth import FunnelParams, generate_synthetic, write_raw_events

logger = logging.getLogger("cascade_rec")

MODES = ("ingest", "split", "train", "eval", "cold-start", "sweep", "bench", "synth")
SWITCH_VARIANTS = {
    "full": {},
    "no_shortcut": {"use_shortcut": False},
    "no_l2": {"use_l2_norm": False},
    "no_shortcut_no_l2": {"use_shortcut": False, "use_l2_norm": False},
}


@dataclass
class ExperimentConfig:
    mode: str = "train"
    data: str = ""
    out: str = "runs/out"
    columns: str = "user,item,behavior,timestamp"
    delimiter: str = "\\t"
    skip_header: bool = False
    behaviors: str = "view>cart>buy"
    drop_unknown_behaviors: bool = False
    min_target: int = 3
    shuffle_ties: bool = False
    n_cold: int = 0
    embeddings: str = ""
    # model
    embedding_dim: int = 64
    layers: str = "1"
    use_shortcut: bool = True
    use_l2_norm: bool = True
    message_dropout: float = 0.0
    node_dropout: float = 0.0
    node_dropout_schedule: str = "batch"
    # training
    batch_size: int = 1024
    n_negatives: int = 4
    learning_rate: float = 1e-2
    reg_weight: float = 1e-4
    task_weights: str = ""
    max_epochs: int = 200
    patience: int = 20
    eval_k: int = 20
    init_std: float = 0.01
    seed: int = 0
    deterministic: bool = True
    # evaluation
    ks: str = "10,20,50,80"
    tie_mode: str = "average"
    exclude_validation: bool = False
    # sweep axes, ';'-separated cells
    sweep_orders: str = ""
    sweep_layers: str = ""
    sweep_task_weights: str = ""
    sweep_switches: str = ""
    sweep_learning_rates: str = ""
    sweep_reg_weights: str = ""
    # bench
    bench_epochs: int = 3
    # synth
    synth_users: int = 50
    synth_items: int = 30
    synth_factors: int = 8
    synth_views: int = 12
    synth_conversion: str = "0.6,0.5"
    synth_temperature: float = 0.5

    # -- parsing ------------------------------------------------------------
    @classmethod
    def field_types(cls) -> dict[str, type]:
        hints = {"str": str, "int": int, "float": float, "bool": bool}
        return {f.name: hints[f.type] if isinstance(f.type, str) else f.type for f in fields(cls)}

    def set(self, key: str, raw) -> None:
        key = key.strip().replace("-", "_")
        types = self.field_types()
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(self, key, _coerce(key, raw, types[key]))

    @classmethod
    def from_text(cls, text: str, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        cfg = base or cls()
        for n, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"config line {n}: expected 'key = value', got {line!r}")
            key, value = line.split("=", 1)
            cfg.set(key, value.strip())
        return cfg

    def to_text(self) -> str:
        lines = [f"# cascade-rec {__version__} resolved configuration"]
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    # -- derived values -----------------------------------------------------
    @property
    def behavior_order(self) -> tuple[str, ...]:
        return parse_order(self.behaviors)

    @property
    def schema(self) -> Schema:
        delim = self.delimiter.encode("utf-8").decode("unicode_escape")
        return Schema.from_string(self.columns, delim, self.skip_header)

    @property
    def k_list(self) -> tuple[int, ...]:
        return _int_list("ks", self.ks)

    def estimator(self, **overrides) -> CascadeRecommender:
        params = dict(
            embedding_dim=self.embedding_dim, layers=_int_list("layers", self.layers),
            use_shortcut=self.use_shortcut, use_l2_norm=self.use_l2_norm,
            message_dropout=self.message_dropout, node_dropout=self.node_dropout,
            node_dropout_schedule=self.node_dropout_schedule, batch_size=self.batch_size,
            n_negatives=self.n_negatives, learning_rate=self.learning_rate, reg_weight=self.reg_weight,
            task_weights=_float_list("task_weights", self.task_weights) if self.task_weights else None,
            max_epochs=self.max_epochs, patience=self.patience, eval_k=self.eval_k,
            init_std=self.init_std, random_state=self.seed, tie_mode=self.tie_mode,
            exclude_validation=self.exclude_validation,
        )
        layers = params["layers"]
        params["layers"] = layers[0] if len(layers) == 1 else layers
        params.update(overrides)
        return CascadeRecommender(**params)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode != "synth" and not self.data:
            raise ConfigError("data: a path is required")
        if self.mode == "eval" and not self.embeddings:
            raise ConfigError("embeddings: eval needs the path of an embedding dump")
        if self.tie_mode not in ("average", "pessimistic"):
            raise ConfigError(f"tie_mode: must be 'average' or 'pessimistic', got {self.tie_mode!r}")
        if self.node_dropout_schedule not in ("batch", "epoch"):
            raise ConfigError("node_dropout_schedule: must be 'batch' or 'epoch'")
        if self.bench_epochs < 3:
            raise ConfigError("bench_epochs: at least 3 warm epochs are timed")
        self.behavior_order
        self.schema
        self.k_list
        self.estimator()._cascade_config(len(self.behavior_order))
        self.estimator()._train_config()


def parse_order(text: str) -> tuple[str, ...]:
    order = tuple(s.strip() for s in text.replace(",", ">").split(">") if s.strip())
    if not order:
        raise ConfigError(f"behaviors: empty behavior order {text!r}")
    if len(set(order)) != len(order):
        raise ConfigError(f"behaviors: duplicate behavior in {text!r}")
    return order


def _coerce(key, raw, typ):
    if isinstance(raw, typ) and not (typ is int and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {typ.__name__}") from None
    return text


def _int_list(key, text) -> tuple[int, ...]:
    try:
        vals = tuple(int(x) for x in str(text).split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise ConfigError(f"{key}: empty list")
    return vals


def _float_list(key, text) -> tuple[float, ...]:
    try:
        vals = tuple(float(x) for x in str(text).split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise ConfigError(f"{key}: empty list")
    return vals


# -- data loading -------------------------------------------------------------

def load_raw_log(cfg: ExperimentConfig, order=None) -> EventLog:
    """Parse, filter, deduplicate and id-map a raw event file."""
    order = tuple(order or cfg.behavior_order)
    known = None if cfg.drop_unknown_behaviors else order
    events = parse_events(cfg.data, cfg.schema, known_behaviors=known)
    events = [e for e in events if e.behavior_name in order]
    return build_event_log(dedup_earliest(events), order)


def load_data(cfg: ExperimentConfig, order=None):
    """An :class:`EventLog` or a :class:`Split`, depending on what ``cfg.data`` points at."""
    path = Path(cfg.data)
    if not path.exists():
        raise ConfigError(f"data: {path} does not exist")
    if path.is_dir():
        if (path / "split.json").exists():
            return read_split(path)
        if (path / "log.json").exists():
            return read_event_log(path)
        raise ConfigError(f"data: {path} holds neither split.json nor log.json")
    return load_raw_log(cfg, order)


def as_split(data, cfg: ExperimentConfig) -> Split:
    if isinstance(data, Split):
        return data
    return split_leave_one_out(data, cfg.seed, cfg.min_target, cfg.shuffle_ties)


# -- artifacts ----------------------------------------------------------------

def _stamp(cfg) -> str:
    return f"# version={__version__} seed={cfg.seed}\n"


def write_metrics(out: Path, report, cfg, name="metrics") -> None:
    (out / f"{name}.txt").write_text(_stamp(cfg) + report.to_table(), encoding="utf-8")
    (out / f"{name}.kv").write_text(_stamp(cfg) + report.to_kv_lines(), encoding="utf-8")


def write_history(out: Path, history, cfg) -> None:
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(json.dumps({"version": __version__, "seed": cfg.seed, **rec}) + "\n")


def write_manifest(out: Path, cfg, extra=None) -> None:
    manifest = {"version": __version__, "seed": cfg.seed, "mode": cfg.mode,
                "artifacts": sorted(p.name for p in out.iterdir() if p.name != "manifest.json")}
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# -- commands -----------------------------------------------------------------

def cmd_synth(cfg, out):
    params = FunnelParams(
        n_users=cfg.synth_users, n_items=cfg.synth_items, n_factors=cfg.synth_factors,
        views_per_user=cfg.synth_views, conversion=_float_list("synth_conversion", cfg.synth_conversion),
        behaviors=cfg.behavior_order, temperature=cfg.synth_temperature,
    )
    events = generate_synthetic(params, cfg.seed)
    write_raw_events(events, out / "events.tsv")
    print(f"wrote {len(events)} events to {out / 'events.tsv'}")


def cmd_ingest(cfg, out):
    log = load_raw_log(cfg)
    write_event_log(log, out)
    print(f"M={log.n_users} N={log.n_items} counts={log.behavior_counts()}")


def cmd_split(cfg, out):
    data = load_data(cfg)
    if isinstance(data, Split):
        raise ConfigError("data: already a split")
    split = (make_cold_start_split(data, cfg.n_cold, cfg.seed, cfg.min_target, cfg.shuffle_ties)
             if cfg.n_cold else split_leave_one_out(data, cfg.seed, cfg.min_target, cfg.shuffle_ties))
    write_split(split, out, cfg.seed)
    print(f"train={len(split.train)} validation={len(split.validation)} test={len(split.test)}")


def cmd_train(cfg, out):
    split = as_split(load_data(cfg), cfg)
    est = cfg.estimator().fit(split)
    report = est.evaluate(split, ks=cfg.k_list)
    write_metrics(out, report, cfg)
    write_history(out, est.history_, cfg)
    save_embeddings(out / "embeddings.bin", est.embeddings_, _state_of(est), split.train.behavior_order)
    print(report.to_table(), end="")
    return {"best_epoch": est.best_epoch_, "epochs_run": len(est.history_)}


def _state_of(est):
    return CascadeState(fused=list(est.block_outputs_))


def cmd_eval(cfg, out):
    split = as_split(load_data(cfg), cfg)
    _, final, order = load_embeddings(cfg.embeddings)
    if tuple(order) != split.train.behavior_order:
        raise ConfigError(f"embeddings: behavior order {order} differs from data {split.train.behavior_order}")
    if final[0].shape[0] != split.train.n_users or final[1].shape[0] != split.train.n_items:
        raise ConfigError("embeddings: shape does not match the data")
    users = sorted(split.test)
    extra = split.validation if cfg.exclude_validation else None
    ranks, _ = evaluate_users(final, users, [split.test[u] for u in users], split.train_items(), extra, cfg.tie_mode)
    report = report_from_ranks(ranks, cfg.k_list)
    write_metrics(out, report, cfg)
    print(report.to_table(), end="")


def cmd_cold_start(cfg, out):
    data = load_data(cfg)
    if isinstance(data, Split):
        raise ConfigError("data: cold-start needs an unsplit log")
    n_cold = cfg.n_cold or 1000
    split = make_cold_start_split(data, n_cold, cfg.seed, cfg.min_target, cfg.shuffle_ties)
    est = cfg.estimator().fit(split)
    report = est.evaluate(split, ks=cfg.k_list, users=split.cold_users)
    write_metrics(out, report, cfg)
    write_history(out, est.history_, cfg)
    print(report.to_table(), end="")
    return {"n_cold": n_cold}


def sweep_cells(cfg):
    """Cartesian product of the configured sweep axes as ``(key_dict, order, overrides)``."""
    axes = []
    if cfg.sweep_orders:
        axes.append(("order", [(o.strip(), {"_order": parse_order(o)}) for o in cfg.sweep_orders.split(";") if o.strip()]))
    if cfg.sweep_layers:
        axes.append(("layers", [(c.strip(), {"layers": _int_list("sweep_layers", c)}) for c in cfg.sweep_layers.split(";") if c.strip()]))
    if cfg.sweep_task_weights:
        axes.append(("task_weights", [(c.strip(), {"task_weights": _float_list("sweep_task_weights", c)})
                                      for c in cfg.sweep_task_weights.split(";") if c.strip()]))
    if cfg.sweep_switches:
        cells = []
        for c in cfg.sweep_switches.split(";"):
            c = c.strip()
            if not c:
                continue
            if c not in SWITCH_VARIANTS:
                raise ConfigError(f"sweep_switches: unknown variant {c!r}; choose from {list(SWITCH_VARIANTS)}")
            cells.append((c, dict(SWITCH_VARIANTS[c])))
        axes.append(("switches", cells))
    if cfg.sweep_learning_rates:
        axes.append(("learning_rate", [(str(v), {"learning_rate": v}) for v in _float_list("sweep_learning_rates", cfg.sweep_learning_rates.replace(";", ","))]))
    if cfg.sweep_reg_weights:
        axes.append(("reg_weight", [(str(v), {"reg_weight": v}) for v in _float_list("sweep_reg_weights", cfg.sweep_reg_weights.replace(";", ","))]))
    if not axes:
        raise ConfigError("sweep: no sweep_* axis configured")
    for combo in itertools.product(*(cells for _, cells in axes)):
        keys = {name: label for (name, _), (label, _) in zip(axes, combo)}
        overrides = {}
        for _, ov in combo:
            overrides.update(ov)
        order = overrides.pop("_order", None)
        if "layers" in overrides and len(overrides["layers"]) == 1:
            overrides["layers"] = overrides["layers"][0]
        yield keys, order, overrides


def cmd_sweep(cfg, out):
    ks = cfg.k_list
    cells = list(sweep_cells(cfg))
    path = Path(cfg.data)
    rows = []
    for keys, order, overrides in cells:
        if order is not None and path.is_dir():
            raise ConfigError("sweep_orders needs a raw event file as data")
        data = load_data(cfg, order or cfg.behavior_order)
        split = as_split(data, cfg)
        est = cfg.estimator(**overrides).fit(split)
        rep = est.evaluate(split, ks=ks)
        row = dict(keys)
        row.update({k: f"{v:.6f}" for k, v in rep.as_dict().items()})
        row["best_epoch"] = str(est.best_epoch_)
        rows.append(row)
        print("\t".join(f"{k}={v}" for k, v in row.items()), flush=True)
    header = list(rows[0])
    with open(out / "sweep.tsv", "w", encoding="utf-8") as fh:
        fh.write(_stamp(cfg))
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(row[h] for h in header) + "\n")
    return {"cells": len(rows)}


def benchmark(cfg):
    """Mean warm-epoch training seconds and evaluation seconds per 1000 users."""
    split = as_split(load_data(cfg), cfg)
    epochs = cfg.bench_epochs + 1
    est = cfg.estimator(max_epochs=epochs, patience=epochs + 1)
    est.fit(split)
    warm = [r["seconds"] for r in est.history_[1:]]
    users = sorted(split.test)
    items = [split.test[u] for u in users]
    t0 = time.perf_counter()
    evaluate_users((est.user_factors_, est.item_factors_), users, items, split.train_items())
    eval_s = time.perf_counter() - t0
    tr = split.train
    layers = est.cascade_config_.layers_per_behavior
    return {
        "B": tr.n_behaviors,
        "L": ",".join(map(str, layers)),
        "d": cfg.embedding_dim,
        "batch_size": cfg.batch_size,
        "users": tr.n_users,
        "items": tr.n_items,
        "edges": int(sum(g.n_edges for g in est.graphs_)),
        "warm_epochs": len(warm),
        "epoch_seconds": float(np.mean(warm)),
        "eval_seconds_per_1000_users": eval_s * 1000.0 / max(len(users), 1),
    }


def cmd_bench(cfg, out):
    report = benchmark(cfg)
    text = "".join(f"{k}\t{v}\n" for k, v in report.items())
    (out / "bench.txt").write_text(_stamp(cfg) + text, encoding="utf-8")
    print(text, end="")
    return report


COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "split": cmd_split, "train": cmd_train, "eval": cmd_eval,
    "cold-start": cmd_cold_start, "sweep": cmd_sweep, "bench": cmd_bench,
}


def run(cfg: ExperimentConfig) -> int:
    """Execute ``cfg.mode``; returns the process exit status."""
    try:
        cfg.validate()
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "FAILED").unlink(missing_ok=True)
        (out / "config.resolved").write_text(cfg.to_text(), encoding="utf-8")
    except (ConfigError, ParseError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"config error: out: {exc}", file=sys.stderr)
        return 2
    try:
        if cfg.deterministic:
            with threadpool_limits(limits=1):
                extra = COMMANDS[cfg.mode](cfg, out)
        else:
            extra = COMMANDS[cfg.mode](cfg, out)
    except (ConfigError, ParseError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CascadeRecError, SplitError, OSError, ValueError, FloatingPointError) as exc:
        (out / "FAILED").write_text(f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}", encoding="utf-8")
        print(f"runtime failure: {exc} (partial artifacts in {out}, see FAILED)", file=sys.stderr)
        return 3
    write_manifest(out, cfg, extra if isinstance(extra, dict) else None)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cascade-rec", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="mode", required=True)
    defaults = ExperimentConfig()
    for mode in MODES:
        p = sub.add_parser(mode)
        p.add_argument("--config", help="flat key = value configuration file")
        p.add_argument("-v", "--verbose", action="store_true")
        for f in fields(ExperimentConfig):
            if f.name == "mode":
                continue
            default = getattr(defaults, f.name)
            p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None, metavar=type(default).__name__.upper(),
                           help=f"(default: {default})")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    cfg = ExperimentConfig()
    try:
        if args.config:
            cfg = ExperimentConfig.from_text(Path(args.config).read_text(encoding="utf-8"))
        for f in fields(ExperimentConfig):
            if f.name != "mode" and getattr(args, f.name) is not None:
                cfg.set(f.name, getattr(args, f.name))
        cfg.mode = args.mode
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"config error: config: {exc}", file=sys.stderr)
        return 2
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
