"""Entropy-gated switching between reflexive and deliberate decoding.

Each step first decodes a single action in no-think mode, measures the
normalized entropy of that first action distribution, and re-decodes in
think mode when the entropy clears ``tau`` and at least ``ntw`` steps have
passed since the last thought. Baseline strategies (never think, always
think, think every K steps) share the same episode runner so that results
are comparable under identical seeds.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import navsim
from .navsim import GridHouse, NavAction
from .policy import (
    N_ACTIONS,
    NOTHINK,
    THINK,
    ContextBatch,
    ContextWindow,
    PolicyContext,
    PolicyNet,
    PolicyOutput,
    decode,
)
from .records import EpisodeRecord
from .seeding import counter_uniforms, derive_seed
from .semantic_map import AnnotatedMap, corrupt_map, map_features, update_map

STRATEGIES = ("nothink", "dense", "everyk", "hybrid")
PRELIM, REGEN = 0, 1  # uniform-stream purposes


@dataclass(frozen=True)
class GateConfig:
    strategy: str = "hybrid"
    tau: float = 0.6
    ntw: int = 5
    max_trace_len: int = 8

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.ntw < 0:
            raise ValueError("ntw must be >= 0")
        # tau above 1 is allowed on purpose: it disables thinking entirely
        if self.tau < 0 or math.isnan(self.tau):
            raise ValueError("tau must be >= 0")
        if self.max_trace_len < 0:
            raise ValueError("max_trace_len must be >= 0")


@dataclass(frozen=True)
class GateState:
    """Steps elapsed since the last thought (starts at ``ntw``)."""

    steps_since_think: int

    @classmethod
    def initial(cls, cfg: GateConfig) -> "GateState":
        return cls(cfg.ntw)

    def may_think(self, cfg: GateConfig) -> bool:
        return self.steps_since_think >= cfg.ntw

    def advance(self, thought: bool) -> "GateState":
        # reset on thinking, then count the step just taken
        return GateState(1 if thought else self.steps_since_think + 1)


@dataclass
class StepDecision:
    output: PolicyOutput
    prelim_entropy_norm: float  # nan when no preliminary pass was made
    thought: bool
    tokens_generated: int


def _expert_output(action: int) -> PolicyOutput:
    dist = np.zeros(N_ACTIONS)
    dist[action] = 1.0
    return PolicyOutput(NOTHINK, [action], action, [0.0], dist, 0.0, 0.0, 0.0)


# --------------------------------------------------------------------------- actors


class GateActor:
    """Batched gate decisions for a policy net."""

    def __init__(self, net: PolicyNet, cfg: GateConfig, temperature: float = 1.0):
        self.net = net
        self.cfg = cfg
        self.temperature = temperature

    @property
    def strategy(self) -> str:
        return self.cfg.strategy

    def initial_state(self) -> GateState:
        return GateState.initial(self.cfg)

    def decide(
        self, batch: ContextBatch, states: Sequence[GateState], seeds, clocks, env_states=None
    ) -> tuple[list[StepDecision], list[GateState]]:
        cfg = self.cfg
        b = len(batch)
        cap = cfg.max_trace_len
        prelim = None
        if cfg.strategy != "dense":
            # everyk also runs the no-think pass on every row so that its
            # batches match hybrid's exactly; the extra tokens are not counted
            u = counter_uniforms(seeds, clocks, PRELIM, cap + 1)
            prelim = decode(self.net, batch.with_mode(NOTHINK), self.temperature, u, cap)
        may = np.array([s.may_think(cfg) for s in states], dtype=bool)
        if cfg.strategy == "nothink":
            think = np.zeros(b, dtype=bool)
        elif cfg.strategy == "dense":
            think = np.ones(b, dtype=bool)
        elif cfg.strategy == "everyk":
            think = may
        else:
            ent = np.array([o.entropy_norm for o in prelim])
            think = may & (ent >= cfg.tau)
        regen = {}
        idx = np.nonzero(think)[0]
        if len(idx):
            sub = batch.select(idx).with_mode(THINK)
            u = counter_uniforms(np.asarray(seeds)[idx], np.asarray(clocks)[idx], REGEN, cap + 1)
            for i, out in zip(idx, decode(self.net, sub, self.temperature, u, cap)):
                regen[int(i)] = out
        decisions, new_states = [], []
        for i in range(b):
            pe = math.nan if prelim is None else prelim[i].entropy_norm
            if i in regen:
                out = regen[i]
                tokens = len(out.tokens) + (1 if cfg.strategy == "hybrid" else 0)
                decisions.append(StepDecision(out, pe, True, tokens))
            else:
                decisions.append(StepDecision(prelim[i], pe, False, 1))
            new_states.append(states[i].advance(bool(think[i])))
        return decisions, new_states


class ExpertActor:
    """Privileged shortest-path expert, wrapped as a no-think actor."""

    strategy = "expert"

    def initial_state(self) -> GateState:
        return GateState(0)

    def decide(self, batch, states, seeds, clocks, env_states):
        decisions = []
        for st in env_states:
            a = int(navsim.expert_action(st))
            decisions.append(StepDecision(_expert_output(a), 0.0, False, 1))
        return decisions, [s.advance(False) for s in states]


def decide_and_act(
    net: PolicyNet,
    ctx: PolicyContext,
    cfg: GateConfig,
    gs: GateState,
    temperature: float = 1.0,
    seed: int = 0,
    clock: int = 0,
) -> tuple[StepDecision, GateState]:
    """Single-context gate step; draws match the batched runner for the same (seed, clock)."""
    actor = GateActor(net, cfg, temperature)
    decisions, states = actor.decide(ContextBatch.stack([ctx]), [gs], [seed], [clock])
    return decisions[0], states[0]


# --------------------------------------------------------------------------- episodes


@dataclass
class _Episode:
    house: GridHouse
    seed: int
    env: navsim.EpisodeState
    map: AnnotatedMap
    window: ContextWindow
    gate: GateState
    record: EpisodeRecord
    corrupt_seed: int
    trans: dict | None = field(default=None)


def _new_transitions() -> dict:
    return {k: [] for k in ("instruction", "obs_window", "action_window", "map_feats", "mode", "tokens", "logprobs", "value", "reward", "done")}


def run_episodes(
    actor,
    houses: Sequence[GridHouse],
    seeds: Sequence[int],
    max_steps: int = 600,
    *,
    corruption: tuple[float, float] | None = None,
    collect: bool = False,
    keep_maps: bool = False,
    window: int = 4,
    n_categories: int = 12,
    on_step=None,
) -> list[EpisodeRecord]:
    """Run one episode per (house, seed) in lock-step batches.

    ``collect`` keeps per-step contexts and sampled token sequences for
    training; ``keep_maps`` attaches the final annotated map to each record.
    ``on_step(i, env, map, decision)`` is called before each action is
    executed, with the clean (uncorrupted) map.
    """
    if len(houses) != len(seeds):
        raise ValueError("houses and seeds must have equal length")
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    eps: list[_Episode] = []
    for house, seed in zip(houses, seeds):
        env, obs = navsim.reset(house, max_steps)
        m = update_map(AnnotatedMap.empty_for(house), env.pose, obs, clock=0)
        win = ContextWindow(window, (house.params.view_depth, house.params.view_width))
        win.push_observation(obs)
        rec = EpisodeRecord(
            task_id=int(house.seed),
            success=False,
            steps=0,
            shortest=navsim.shortest_episode_length(house),
            tokens_generated=0,
            thought_steps=0,
            strategy=actor.strategy,
            seed=int(seed),
            poses=[env.pose.as_list()],
        )
        eps.append(
            _Episode(
                house, int(seed), env, m, win, actor.initial_state(), rec,
                derive_seed(int(seed), "corrupt"), _new_transitions() if collect else None,
            )
        )
    active = list(range(len(eps)))
    while active:
        contexts = []
        for i in active:
            e = eps[i]
            m = e.map if corruption is None else corrupt_map(e.map, *corruption, e.corrupt_seed, n_categories)
            contexts.append(e.window.context(e.house.target_category, map_features(m)))
        batch = ContextBatch.stack(contexts)
        decisions, gates = actor.decide(
            batch,
            [eps[i].gate for i in active],
            [eps[i].seed for i in active],
            [eps[i].env.clock for i in active],
            [eps[i].env for i in active],
        )
        still = []
        for j, i in enumerate(active):
            e, d = eps[i], decisions[j]
            out = d.output
            e.gate = gates[j]
            if on_step is not None:
                on_step(i, e.env, e.map, d)
            res = navsim.step(e.env, out.action)
            r = e.record
            r.steps += 1
            r.tokens_generated += d.tokens_generated
            r.thought_steps += int(d.thought)
            r.entropies.append(float(d.prelim_entropy_norm))
            r.rewards.append(res.reward)
            r.actions.append(out.action)
            r.thoughts.append(d.thought)
            r.step_tokens.append(d.tokens_generated)
            r.poses.append(e.env.pose.as_list())
            if e.trans is not None:
                t = e.trans
                for k in ("instruction", "obs_window", "action_window", "map_feats"):
                    t[k].append(getattr(batch, k)[j])
                t["mode"].append(out.mode)
                t["tokens"].append(list(out.tokens))
                t["logprobs"].append(list(out.logprobs))
                t["value"].append(out.value)
                t["reward"].append(res.reward)
                t["done"].append(res.done)
            e.map = update_map(e.map, e.env.pose, res.observation, clock=res.clock, in_place=True)
            e.window.push_action(out.action)
            e.window.push_observation(res.observation)
            if res.done:
                r.success = bool(res.success)
                r.ended = out.action == NavAction.END
            else:
                still.append(i)
        active = still
    records = []
    for e in eps:
        if e.trans is not None:
            e.record.transitions = e.trans
        if keep_maps:
            e.record.final_map = e.map
        records.append(e.record)
    return records


def run_episode(
    net: PolicyNet | None,
    house: GridHouse,
    gate: GateConfig | None = None,
    temperature: float = 1.0,
    seed: int = 0,
    max_steps: int = 600,
    **kw,
) -> EpisodeRecord:
    """One evaluation episode; ``net=None`` runs the privileged expert."""
    actor = ExpertActor() if net is None else GateActor(net, gate or GateConfig(), temperature)
    return run_episodes(actor, [house], [seed], max_steps, **kw)[0]


def token_accounting(record: EpisodeRecord) -> tuple[int, float, float]:
    """(tokens per episode, tokens per step, thinking ratio)."""
    if record.steps < 1:
        raise ValueError("record has no steps")
    return record.tokens_generated, record.tokens_generated / record.steps, record.thought_steps / record.steps
