"""Evaluation protocols that run a policy: strategy comparison, sweeps, robustness, Pass@k."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .. import navsim
from ..gate import GateActor, GateConfig, run_episodes
from ..policy import LN_ACTIONS, ContextBatch, PolicyNet, action_entropy, first_action_probs
from ..records import EpisodeRecord
from ..seeding import derive_seed
from ..semantic_map import AnnotatedMap, render_map
from .metrics import EntropyHistogram, entropy_histogram, q_estimate, success_rate, token_summary


@dataclass
class EvalTasks:
    houses: list[navsim.GridHouse]
    episode_seeds: list[int]


def eval_tasks(master_seed: int, n: int, params: navsim.HouseParams | None = None, split: str = "eval") -> EvalTasks:
    """``n`` held-out houses and episode seeds derived from the master seed.

    House seeds that fail generation are skipped deterministically.
    """
    params = params or navsim.HouseParams()
    houses, seeds = [], []
    k = 0
    while len(houses) < n:
        s = derive_seed(master_seed, split + "-house", k) & 0x7FFFFFFF
        k += 1
        try:
            houses.append(navsim.generate_house(s, params))
        except navsim.GenerationError:
            continue
        seeds.append(derive_seed(master_seed, split + "-episode", len(houses) - 1))
    return EvalTasks(houses, seeds)


def evaluate(
    net: PolicyNet,
    tasks: EvalTasks,
    gate: GateConfig,
    max_steps: int = 600,
    temperature: float = 1.0,
    corruption: tuple[float, float] | None = None,
    keep_maps: bool = False,
) -> list[EpisodeRecord]:
    n_cat = tasks.houses[0].params.n_categories if tasks.houses else 12
    return run_episodes(
        GateActor(net, gate, temperature), tasks.houses, tasks.episode_seeds, max_steps,
        corruption=corruption, keep_maps=keep_maps, window=net.cfg.window, n_categories=n_cat,
    )


@dataclass
class SweepResult:
    parameter: str
    thresholds: list[float]
    mean_q: list[float]
    tokens_per_step: list[float]
    success_rate: list[float]
    thinking_ratio: list[float]
    episodes: list[int]

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ValueError("sweep values must be strictly increasing")

    @property
    def raw_thresholds(self) -> list[float]:
        """Thresholds in nats (normalized value times ln 5)."""
        return [t * LN_ACTIONS for t in self.thresholds]

    def best(self) -> float:
        return self.thresholds[int(np.argmax(self.mean_q))]

    def rows(self) -> list[dict]:
        out = []
        for i, t in enumerate(self.thresholds):
            row = {self.parameter: t, "mean_q": self.mean_q[i], "tokens_per_step": self.tokens_per_step[i],
                   "success_rate": self.success_rate[i], "thinking_ratio": self.thinking_ratio[i],
                   "episodes": self.episodes[i]}
            if self.parameter == "tau":
                row["tau_nats"] = self.raw_thresholds[i]
            out.append(row)
        return out


def _sweep(net, tasks, gates, values, name, gamma, max_steps, temperature) -> SweepResult:
    q, tps, sr, tr, n = [], [], [], [], []
    for g in gates:
        recs = evaluate(net, tasks, g, max_steps, temperature)
        ts = token_summary(recs)
        q.append(q_estimate(recs, gamma))
        tps.append(ts.tokens_per_step)
        tr.append(ts.thinking_ratio)
        sr.append(success_rate(recs))
        n.append(len(recs))
    return SweepResult(name, [float(v) for v in values], q, tps, sr, tr, n)


def q_threshold_sweep(
    net: PolicyNet,
    tasks: EvalTasks,
    thresholds: Sequence[float] = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0),
    gamma: float = 0.99,
    ntw: int = 5,
    max_steps: int = 600,
    temperature: float = 1.0,
    max_trace_len: int = 8,
) -> SweepResult:
    """Hybrid(tau, ntw) over the same tasks and seeds for each tau."""
    gates = [GateConfig("hybrid", tau=t, ntw=ntw, max_trace_len=max_trace_len) for t in thresholds]
    return _sweep(net, tasks, gates, thresholds, "tau", gamma, max_steps, temperature)


def ntw_sweep(
    net: PolicyNet,
    tasks: EvalTasks,
    windows: Sequence[int] = (0, 1, 3, 5, 10),
    tau: float = 0.6,
    gamma: float = 0.99,
    max_steps: int = 600,
    temperature: float = 1.0,
    max_trace_len: int = 8,
) -> SweepResult:
    gates = [GateConfig("hybrid", tau=tau, ntw=k, max_trace_len=max_trace_len) for k in windows]
    return _sweep(net, tasks, gates, windows, "ntw", gamma, max_steps, temperature)


def context_entropies(net: PolicyNet, contexts: ContextBatch) -> np.ndarray:
    probs = first_action_probs(net, contexts)
    return np.array([action_entropy(p / p.sum())[1] for p in probs])


def entropy_histogram_for(net: PolicyNet, contexts: ContextBatch, taus: Sequence[float] = (0.6,)) -> EntropyHistogram:
    return entropy_histogram(context_entropies(net, contexts), taus)


def entropy_heatmap(record: EpisodeRecord, m: AnnotatedMap) -> np.ndarray:
    """Trajectory of ``m`` colored by each step's preliminary entropy."""
    ent = list(record.entropies)
    if any(math.isnan(e) for e in ent):
        raise ValueError("record has steps without a preliminary entropy")
    return render_map(m, overlay=ent)


def robustness_curve(
    net: PolicyNet,
    tasks: EvalTasks,
    grid: Sequence[tuple[float, float]],
    gate: GateConfig | None = None,
    max_steps: int = 600,
    temperature: float = 1.0,
) -> dict[tuple[float, float], float]:
    """SR of the gated policy with the map corrupted at every step, per (p_drop, p_mislabel)."""
    gate = gate or GateConfig()
    out = {}
    for pd, pm in grid:
        corr = None if (pd, pm) == (0.0, 0.0) else (float(pd), float(pm))
        out[(float(pd), float(pm))] = success_rate(evaluate(net, tasks, gate, max_steps, temperature, corr))
    return out


def pass_at_k_counts(
    net: PolicyNet,
    tasks: EvalTasks,
    gate: GateConfig,
    n: int = 16,
    temperature: float = 0.2,
    max_steps: int = 600,
    master_seed: int = 0,
) -> list[tuple[int, int]]:
    """(n, successes) per task from ``n`` independently seeded attempts."""
    houses = [h for h in tasks.houses for _ in range(n)]
    seeds = [derive_seed(master_seed, "attempt", i, a) for i in range(len(tasks.houses)) for a in range(n)]
    recs = evaluate(net, EvalTasks(houses, seeds), gate, max_steps, temperature)
    wins = np.array([r.success for r in recs]).reshape(len(tasks.houses), n)
    return [(n, int(c)) for c in wins.sum(axis=1)]


def compare_strategies(
    net: PolicyNet,
    tasks: EvalTasks,
    gate: GateConfig,
    strategies: Sequence[str] = ("nothink", "dense", "everyk", "hybrid"),
    max_steps: int = 600,
    temperature: float = 1.0,
) -> dict[str, list[EpisodeRecord]]:
    return {s: evaluate(net, tasks, replace(gate, strategy=s), max_steps, temperature) for s in strategies}
