"""Expert data collection, entropy filtering and reasoning-trace annotation."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import navsim
from ..gate import ExpertActor, run_episodes
from ..navsim import FREE, HEADING_VECTORS, OBJECT_BASE, GenerationError, NavAction
from ..policy import (
    DIR_AHEAD,
    DIR_BEHIND,
    DIR_LEFT,
    DIR_RIGHT,
    DIST_TOKENS,
    EOT,
    FRONTIER_AHEAD,
    FRONTIER_LEFT,
    FRONTIER_NONE,
    FRONTIER_RIGHT,
    NOTHINK,
    THINK,
    TGT_HIDDEN,
    TGT_VISIBLE,
    TOKEN_FAMILIES,
    ContextBatch,
    PolicyContext,
    PolicyNet,
    action_entropy,
    first_action_probs,
)
from ..semantic_map import AnnotatedMap

log = logging.getLogger(__name__)

FAMILY_ORDER = ("visibility", "direction", "distance", "frontier")


# --------------------------------------------------------------------------- samples


@dataclass
class ExpertSample:
    context: PolicyContext
    target_tokens: list[int]
    sample_id: int
    house_seed: int
    clock: int
    expert_action: int
    truth: list[int]  # privileged [visibility, direction, distance, frontier] tokens
    source_entropy: float = math.nan


@dataclass
class SampleSet:
    """Column-oriented store of expert samples."""

    contexts: ContextBatch
    tokens: list[list[int]]
    sample_id: np.ndarray
    house_seed: np.ndarray
    clock: np.ndarray
    expert_action: np.ndarray
    truth: np.ndarray  # (N, 4)
    source_entropy: np.ndarray

    def __len__(self):
        return len(self.tokens)

    def get(self, i: int) -> ExpertSample:
        return ExpertSample(
            self.contexts.get(i), list(self.tokens[i]), int(self.sample_id[i]), int(self.house_seed[i]),
            int(self.clock[i]), int(self.expert_action[i]), self.truth[i].tolist(), float(self.source_entropy[i]),
        )

    def select(self, idx) -> "SampleSet":
        idx = np.asarray(idx, dtype=np.int64)
        return SampleSet(
            self.contexts.select(idx), [self.tokens[i] for i in idx], self.sample_id[idx], self.house_seed[idx],
            self.clock[idx], self.expert_action[idx], self.truth[idx], self.source_entropy[idx],
        )

    @classmethod
    def empty_like(cls, other: "SampleSet") -> "SampleSet":
        return other.select(np.zeros(0, dtype=np.int64))

    @classmethod
    def concat(cls, sets: Sequence["SampleSet"]) -> "SampleSet":
        return cls(
            ContextBatch.concat([s.contexts for s in sets]),
            [t for s in sets for t in s.tokens],
            *(np.concatenate([getattr(s, f) for s in sets]) for f in
              ("sample_id", "house_seed", "clock", "expert_action", "truth", "source_entropy")),
        )


@dataclass
class HybridDataset:
    nrd: SampleSet
    rd: SampleSet | None = None
    meta: dict = field(default_factory=dict)

    def training_set(self) -> SampleSet:
        return self.nrd if self.rd is None or not len(self.rd) else SampleSet.concat([self.nrd, self.rd])


# --------------------------------------------------------------------------- privileged annotation


DIST_EDGES = (1, 4, 9)  # geodesic buckets 0-1, 2-4, 5-9, 10+


def dist_bucket(d: float) -> int:
    for tok, edge in zip(DIST_TOKENS, DIST_EDGES):
        if d <= edge:
            return tok
    return DIST_TOKENS[3]


_DIRECTION_OF = {
    NavAction.MOVE_AHEAD: DIR_AHEAD,
    NavAction.ROTATE_LEFT: DIR_LEFT,
    NavAction.ROTATE_RIGHT: DIR_RIGHT,
    NavAction.MOVE_BACK: DIR_BEHIND,
    NavAction.END: DIR_AHEAD,
}
_ACTION_OF = {DIR_AHEAD: NavAction.MOVE_AHEAD, DIR_LEFT: NavAction.ROTATE_LEFT, DIR_RIGHT: NavAction.ROTATE_RIGHT,
              DIR_BEHIND: NavAction.MOVE_BACK}


def true_direction(state: navsim.EpisodeState) -> int:
    """Which way the expert heads next (ahead / turn left / turn right / back up)."""
    return _DIRECTION_OF[navsim.expert_action(state)]


def frontier_token(m: AnnotatedMap) -> int:
    """Direction (agent frame) of the nearest explored free cell bordering unexplored space."""
    known = m.explored
    pad = np.pad(known, 1, constant_values=True)
    unknown_nb = ~pad[:-2, 1:-1] | ~pad[2:, 1:-1] | ~pad[1:-1, :-2] | ~pad[1:-1, 2:]
    front = known & (m.occupancy == FREE) & unknown_nb
    ys, xs = np.nonzero(front)
    if len(xs) == 0:
        return FRONTIER_NONE
    p = m.current_pose
    d2 = (xs - p.x) ** 2 + (ys - p.y) ** 2
    k = int(np.lexsort((xs, ys, d2))[0])
    dx, dy = int(xs[k] - p.x), int(ys[k] - p.y)
    fx, fy = HEADING_VECTORS[p.heading]
    ahead, right = dx * fx + dy * fy, dx * -fy + dy * fx
    if ahead > 0 and abs(right) <= ahead:
        return FRONTIER_AHEAD
    return FRONTIER_LEFT if right < 0 else FRONTIER_RIGHT


def true_trace(state: navsim.EpisodeState, m: AnnotatedMap) -> list[int]:
    house = state.house
    tgt = OBJECT_BASE + house.target_category
    vis = TGT_VISIBLE if (house.observe(state.pose).ego_view == tgt).any() else TGT_HIDDEN
    return [vis, true_direction(state), dist_bucket(state.geodesic), frontier_token(m)]


def implied_action(trace: Sequence[int]) -> int:
    """Deterministic action a reasoning trace commits to.

    Visible and within the two nearest distance buckets means stop; otherwise
    the direction token picks the move (behind backs up).
    """
    toks = [t for t in trace if t != EOT]
    vis = toks[0] if toks else TGT_HIDDEN
    direction = toks[1] if len(toks) > 1 else DIR_AHEAD
    dist = toks[2] if len(toks) > 2 else DIST_TOKENS[3]
    if vis == TGT_VISIBLE and dist in DIST_TOKENS[:2]:
        return int(NavAction.END)
    return int(_ACTION_OF[direction])


# --------------------------------------------------------------------------- collection


def collect_expert_dataset(
    house_seeds: Sequence[int],
    n_steps: int,
    params: navsim.HouseParams | None = None,
    max_steps: int = 300,
    window: int = 4,
    batch_episodes: int = 64,
) -> HybridDataset:
    """Exactly ``n_steps`` no-think samples from expert rollouts over the given houses.

    Houses are consumed in order; generation failures are skipped and logged.
    Episodes are truncated once the step budget is filled.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    params = params or navsim.HouseParams()
    parts, skipped, used = [], [], []
    total = 0
    it = iter(house_seeds)
    while total < n_steps:
        houses = []
        for s in it:
            try:
                houses.append(navsim.generate_house(int(s), params))
            except GenerationError as err:
                log.warning("skipping house %d: %s", s, err)
                skipped.append(int(s))
                continue
            if len(houses) == batch_episodes:
                break
        if not houses:
            raise ValueError(f"house seeds exhausted after {total} of {n_steps} samples")
        truths: dict[tuple[int, int], list[int]] = {}

        def hook(i, env, m, d, truths=truths):
            truths[(i, env.clock)] = true_trace(env, m)

        recs = run_episodes(
            ExpertActor(), houses, [h.seed for h in houses], max_steps, collect=True, window=window,
            n_categories=params.n_categories, on_step=hook,
        )
        for i, (h, r) in enumerate(zip(houses, recs)):
            if total >= n_steps:
                break
            take = min(r.steps, n_steps - total)
            t = r.transitions
            ctx = ContextBatch(
                np.asarray(t["instruction"][:take], dtype=np.int64),
                np.stack(t["obs_window"][:take]).astype(np.int8),
                np.stack(t["action_window"][:take]).astype(np.int64),
                np.stack(t["map_feats"][:take]).astype(np.float32),
                np.full(take, NOTHINK, dtype=np.int64),
            )
            acts = np.asarray(r.actions[:take], dtype=np.int64)
            parts.append(SampleSet(
                ctx, [[int(a)] for a in acts], np.arange(total, total + take), np.full(take, h.seed),
                np.arange(take), acts, np.array([truths[(i, c)] for c in range(take)], dtype=np.int64),
                np.full(take, math.nan),
            ))
            used.append(int(h.seed))
            total += take
    meta = {"n_steps": n_steps, "house_seeds": used, "skipped_seeds": skipped, "max_steps": max_steps}
    return HybridDataset(SampleSet.concat(parts), None, meta)


# --------------------------------------------------------------------------- filtering


def score_entropy(net: PolicyNet, samples: SampleSet) -> np.ndarray:
    probs = first_action_probs(net, samples.contexts)
    return np.array([action_entropy(p / p.sum())[1] for p in probs])


def entropy_filter(ds: HybridDataset | SampleSet, sft_net: PolicyNet, top_fraction: float = 0.2) -> SampleSet:
    """Highest-entropy ``top_fraction`` of the no-think samples (ties by sample id)."""
    nrd = ds.nrd if isinstance(ds, HybridDataset) else ds
    if not len(nrd):
        raise ValueError("empty dataset")
    if not 0.0 <= top_fraction <= 1.0:
        raise ValueError("top_fraction must be in [0, 1]")
    ent = score_entropy(sft_net, nrd)
    nrd.source_entropy[:] = ent
    k = int(math.floor(top_fraction * len(nrd) + 1e-9))
    order = np.lexsort((nrd.sample_id, -ent))[:k]
    return nrd.select(np.sort(order))


def annotate_reasoning(
    subset: SampleSet, annotator_noise: float = 0.1, max_attempts: int = 8, seed: int = 0
) -> tuple[SampleSet, dict]:
    """Think-mode samples whose sampled trace implies the expert action.

    Each attempt perturbs every privileged token, with probability
    ``annotator_noise``, to a uniform draw from its token family (which may
    return the same token). The first trace whose implied action matches the
    expert is kept; samples with no match after ``max_attempts`` are dropped.
    """
    keep, tokens, attempts_used = [], [], []
    fams = [np.array(TOKEN_FAMILIES[f]) for f in FAMILY_ORDER]
    for i in range(len(subset)):
        sid = int(subset.sample_id[i])
        rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, sid])
        target = int(subset.expert_action[i])
        truth = subset.truth[i]
        for attempt in range(1, max_attempts + 1):
            noisy = rng.random(4) < annotator_noise
            picks = rng.integers(0, [len(f) for f in fams])
            trace = [int(fams[k][picks[k]]) if noisy[k] else int(truth[k]) for k in range(4)]
            if implied_action(trace) == target:
                seq = trace + [EOT, target]
                if implied_action(seq[:-1]) != seq[-1]:  # consistency filter
                    break
                keep.append(i)
                tokens.append(seq)
                attempts_used.append(attempt)
                break
    out = subset.select(keep)
    out.tokens = tokens
    out.contexts = out.contexts.with_mode(THINK)
    stats = {
        "candidates": len(subset),
        "accepted": len(keep),
        "discarded": len(subset) - len(keep),
        "mean_attempts": float(np.mean(attempts_used)) if attempts_used else 0.0,
    }
    log.info("annotation: %s", stats)
    return out, stats


# --------------------------------------------------------------------------- persistence


def save_dataset(ds: HybridDataset, out_dir) -> dict:
    """``samples.jsonl`` (tokens and ids) + ``contexts.npz`` (context arrays) + ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sets = {"nrd": ds.nrd}
    if ds.rd is not None:
        sets["rd"] = ds.rd
    arrays = {}
    with open(out / "samples.jsonl", "w") as f:
        for name, s in sets.items():
            for i in range(len(s)):
                e = float(s.source_entropy[i])
                f.write(json.dumps({
                    "subset": name, "row": i, "sample_id": int(s.sample_id[i]), "house_seed": int(s.house_seed[i]),
                    "clock": int(s.clock[i]), "expert_action": int(s.expert_action[i]), "tokens": s.tokens[i],
                    "truth": s.truth[i].tolist(), "mode": int(s.contexts.mode[i]),
                    "source_entropy": None if math.isnan(e) else e,
                }, sort_keys=True) + "\n")
            for k, v in s.contexts.arrays().items():
                arrays[f"{name}.{k}"] = v
    with open(out / "contexts.npz", "wb") as f:
        np.savez(f, **arrays)
    digest = hashlib.sha256()
    for fn in ("samples.jsonl", "contexts.npz"):
        digest.update((out / fn).read_bytes())
    manifest = {
        "counts": {k: len(v) for k, v in sets.items()},
        "content_sha256": digest.hexdigest(),
        **ds.meta,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset(in_dir) -> HybridDataset:
    d = Path(in_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    rows: dict[str, list[dict]] = {}
    with open(d / "samples.jsonl") as f:
        for line in f:
            r = json.loads(line)
            rows.setdefault(r["subset"], []).append(r)
    npz = np.load(d / "contexts.npz")
    sets = {}
    for name in manifest["counts"]:
        rs = rows.get(name, [])
        ctx = ContextBatch(*(npz[f"{name}.{k}"] for k in ContextBatch._fields()))
        sets[name] = SampleSet(
            ctx, [r["tokens"] for r in rs],
            np.array([r["sample_id"] for r in rs], dtype=np.int64),
            np.array([r["house_seed"] for r in rs], dtype=np.int64),
            np.array([r["clock"] for r in rs], dtype=np.int64),
            np.array([r["expert_action"] for r in rs], dtype=np.int64),
            np.array([r["truth"] for r in rs], dtype=np.int64).reshape(-1, 4),
            np.array([math.nan if r["source_entropy"] is None else r["source_entropy"] for r in rs]),
        )
    meta = {k: v for k, v in manifest.items() if k not in ("counts", "content_sha256")}
    return HybridDataset(sets["nrd"], sets.get("rd"), meta)
