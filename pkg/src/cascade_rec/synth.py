"""Synthetic multi-behavior logs with a planted view -> cart -> buy funnel.

Users and items get Gaussian latent factors. Each user views a fixed number
of distinct items, drawn without replacement with probability proportional
to ``exp(affinity / temperature)``. At every later stage the number of
items that convert is Binomial(previous count, p), and which items convert
is again drawn by affinity. So the expected conversion ratio is exactly p
while high-affinity items are the ones that advance. Timestamps increase
strictly along the funnel for every (user, item).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import RawEvent
from .exceptions import ConfigError

__all__ = ["FunnelParams", "generate_synthetic", "write_raw_events"]


@dataclass(frozen=True)
class FunnelParams:
    n_users: int = 50
    n_items: int = 30
    n_factors: int = 8
    views_per_user: int = 12
    conversion: tuple[float, ...] = (0.6, 0.5)
    behaviors: tuple[str, ...] = ("view", "cart", "buy")
    temperature: float = 0.5
    start_time: int = 1_500_000_000
    time_span: int = 30 * 86400

    def __post_init__(self):
        object.__setattr__(self, "conversion", tuple(float(p) for p in self.conversion))
        object.__setattr__(self, "behaviors", tuple(self.behaviors))
        if len(self.behaviors) != len(self.conversion) + 1:
            raise ConfigError(f"{len(self.behaviors)} behaviors need {len(self.behaviors) - 1} conversion probabilities")
        if any(not 0.0 < p <= 1.0 for p in self.conversion):
            raise ConfigError(f"conversion probabilities must lie in (0, 1], got {self.conversion}")
        if min(self.n_users, self.n_items, self.n_factors, self.views_per_user) < 1:
            raise ConfigError("sizes must be positive")
        if self.views_per_user > self.n_items:
            raise ConfigError(f"views_per_user={self.views_per_user} exceeds n_items={self.n_items}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")


def _weighted_without_replacement(logits: np.ndarray, k: int, rng) -> np.ndarray:
    """Gumbel top-k: k distinct indices drawn proportionally to exp(logits)."""
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    keys = logits + rng.gumbel(size=len(logits))
    return np.argsort(-keys, kind="stable")[:k]


def generate_synthetic(params: FunnelParams | None = None, rng_seed: int = 0) -> list[RawEvent]:
    """Events in (user, funnel stage, time) order; keys are ``u<k>`` and ``i<k>``."""
    p = params or FunnelParams()
    rng = np.random.default_rng(rng_seed)
    xu = rng.normal(size=(p.n_users, p.n_factors))
    yi = rng.normal(size=(p.n_items, p.n_factors))
    affinity = xu @ yi.T / np.sqrt(p.n_factors)
    events = []
    for u in range(p.n_users):
        logits = affinity[u] / p.temperature
        current = _weighted_without_replacement(logits, p.views_per_user, rng)
        times = p.start_time + rng.integers(0, p.time_span, size=len(current))
        stage_sets = [(current, times)]
        for prob in p.conversion:
            count = rng.binomial(len(current), prob)
            pick = _weighted_without_replacement(logits[current], count, rng)
            current = current[pick]
            times = times[pick] + rng.integers(1, 3600, size=len(pick))
            stage_sets.append((current, times))
        for b, (items, stamps) in enumerate(stage_sets):
            for i, t in zip(items.tolist(), stamps.tolist()):
                events.append(RawEvent(f"u{u}", f"i{i}", p.behaviors[b], int(t)))
    return events


def write_raw_events(events, path, delimiter: str = "\t") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ev in events:
            fh.write(delimiter.join((ev.user_key, ev.item_key, ev.behavior_name, str(ev.timestamp))) + "\n")
    return path
