"""Pure metrics over episode records."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from ..records import EpisodeRecord

N_ENTROPY_BINS = 20


def _nonempty(records) -> list[EpisodeRecord]:
    records = list(records)
    if not records:
        raise ValueError("no records")
    return records


def success_rate(records: Iterable[EpisodeRecord]) -> float:
    records = _nonempty(records)
    return sum(bool(r.success) for r in records) / len(records)


def sel(records: Iterable[EpisodeRecord]) -> float:
    """Success weighted by episode length: mean of S * w / max(w, e)."""
    records = _nonempty(records)
    total = 0.0
    for r in records:
        if not math.isfinite(r.shortest):
            raise ValueError(f"task {r.task_id} has no finite shortest length")
        if r.success:
            total += r.shortest / max(r.shortest, r.steps)
    return total / len(records)


@dataclass(frozen=True)
class TokenSummary:
    tokens_per_episode: float
    tokens_per_step: float  # total tokens / total steps
    thinking_ratio: float  # thought steps / total steps


def token_summary(records: Iterable[EpisodeRecord]) -> TokenSummary:
    records = _nonempty(records)
    steps = sum(r.steps for r in records)
    tokens = sum(r.tokens_generated for r in records)
    thoughts = sum(r.thought_steps for r in records)
    return TokenSummary(tokens / len(records), tokens / steps, thoughts / steps)


def discounted_return(rewards: Sequence[float], gamma: float = 0.99) -> float:
    g = 0.0
    for r in reversed(list(rewards)):
        g = r + gamma * g
    return g


def q_estimate(records: Iterable[EpisodeRecord], gamma: float = 0.99) -> float:
    """Monte-Carlo value of the start state: mean discounted return from step 0."""
    records = _nonempty(records)
    return float(np.mean([discounted_return(r.rewards, gamma) for r in records]))


@dataclass(frozen=True)
class EntropyHistogram:
    edges: tuple[float, ...]
    counts: tuple[int, ...]
    fraction_at_least: dict  # tau -> fraction of values >= tau

    @property
    def total(self) -> int:
        return sum(self.counts)


def entropy_histogram(values: Iterable[float], taus: Sequence[float] = (0.6,), bins: int = N_ENTROPY_BINS) -> EntropyHistogram:
    """Histogram of normalized entropies over [0, 1]; NaN entries are ignored."""
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=np.float64)
    if (v < -1e-9).any() or (v > 1 + 1e-9).any():
        raise ValueError("normalized entropies must lie in [0, 1]")
    v = np.clip(v, 0.0, 1.0)
    counts, edges = np.histogram(v, bins=bins, range=(0.0, 1.0))
    frac = {float(t): (float((v >= t).mean()) if len(v) else 0.0) for t in taus}
    return EntropyHistogram(tuple(float(e) for e in edges), tuple(int(c) for c in counts), frac)


BUCKETS = ("easy", "medium", "hard")


@dataclass(frozen=True)
class Bucket:
    sr: float  # nan when empty
    tr: float  # mean per-episode thinking ratio, nan when empty
    count: int


def difficulty_bucket(shortest: float, boundaries: tuple[float, float] = (10, 25)) -> str:
    """Half-open convention: easy [0, b1), medium [b1, b2], hard (b2, inf)."""
    b1, b2 = boundaries
    if shortest < b1:
        return "easy"
    if shortest <= b2:
        return "medium"
    return "hard"


def difficulty_stratify(records: Iterable[EpisodeRecord], boundaries: tuple[float, float] = (10, 25)) -> dict[str, Bucket]:
    records = _nonempty(records)
    if boundaries[0] > boundaries[1]:
        raise ValueError("boundaries must be ordered")
    groups: dict[str, list[EpisodeRecord]] = {b: [] for b in BUCKETS}
    for r in records:
        groups[difficulty_bucket(r.shortest, boundaries)].append(r)
    out = {}
    for name, rs in groups.items():
        if rs:
            out[name] = Bucket(success_rate(rs), float(np.mean([r.thinking_ratio for r in rs])), len(rs))
        else:
            out[name] = Bucket(math.nan, math.nan, 0)
    return out


def pass_at_k_task(n: int, c: int, k: int) -> float:
    """Unbiased estimate of P(at least one success in k of n attempts with c successes)."""
    if not 0 <= c <= n:
        raise ValueError(f"need 0 <= c <= n, got n={n}, c={c}")
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must be in [1, n={n}]")
    if n - c < k:
        return 1.0
    return 1.0 - math.comb(n - c, k) / math.comb(n, k)


def pass_at_k(per_task: Sequence[tuple[int, int]], ks: Sequence[int]) -> dict[int, float]:
    if not per_task:
        raise ValueError("no tasks")
    return {int(k): float(np.mean([pass_at_k_task(n, c, k) for n, c in per_task])) for k in ks}
