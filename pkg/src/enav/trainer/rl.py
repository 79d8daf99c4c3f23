"""Two-stage masked PPO.

Stage I trains the no-think head alone on no-think rollouts. Stage II
collects rollouts with the entropy gate, applies the clipped surrogate only
to think-mode sequences, and anchors no-think sequences to the stage-I
policy with an exact per-position KL penalty.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .. import navsim
from ..gate import GateActor, GateConfig, run_episodes
from ..policy import THINK, ContextBatch, PolicyNet, clone_net, save_checkpoint
from ..records import EpisodeRecord
from ..seeding import derive_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PPOConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    beta: float = 0.1  # stage II only; stage I always uses 0
    rollout_episodes: int = 48
    minibatch: int = 384
    lr: float = 3e-4
    epochs: int = 4
    updates: int = 10
    vf_coef: float = 0.5
    normalize_adv: bool = True
    max_grad_norm: float = 1.0  # <= 0 disables clipping
    max_steps: int = 300
    temperature: float = 1.0

    def __post_init__(self):
        for name in ("gamma", "lam"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.clip <= 0 or self.beta < 0 or self.lr < 0 or self.vf_coef < 0:
            raise ValueError("clip must be > 0; beta, lr, vf_coef must be >= 0")
        if min(self.rollout_episodes, self.minibatch, self.epochs, self.updates, self.max_steps) < 1:
            raise ValueError("rollout_episodes, minibatch, epochs, updates, max_steps must be >= 1")


# --------------------------------------------------------------------------- buffer


@dataclass
class RolloutBuffer:
    contexts: ContextBatch  # mode = executed mode
    tokens: list[list[int]]
    old_logp: list[list[float]]
    value: np.ndarray
    reward: np.ndarray
    done: np.ndarray
    episode: np.ndarray
    records: list[EpisodeRecord] = field(default_factory=list)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self):
        return len(self.tokens)

    @property
    def think(self) -> np.ndarray:
        """Per-sequence think indicator."""
        return (self.contexts.mode == THINK).astype(np.int64)

    @classmethod
    def from_records(cls, records: Sequence[EpisodeRecord]) -> "RolloutBuffer":
        keys = ("instruction", "obs_window", "action_window", "map_feats", "mode")
        cols = {k: [] for k in keys}
        tokens, logp, value, reward, done, episode = [], [], [], [], [], []
        for e, r in enumerate(records):
            t = r.transitions
            for k in keys:
                cols[k].extend(t[k])
            tokens.extend(t["tokens"])
            logp.extend(t["logprobs"])
            value.extend(t["value"])
            reward.extend(t["reward"])
            done.extend(t["done"])
            episode.extend([e] * len(t["tokens"]))
        ctx = ContextBatch(
            np.asarray(cols["instruction"], dtype=np.int64),
            np.stack(cols["obs_window"]).astype(np.int8),
            np.stack(cols["action_window"]).astype(np.int64),
            np.stack(cols["map_feats"]).astype(np.float32),
            np.asarray(cols["mode"], dtype=np.int64),
        )
        return cls(ctx, tokens, logp, np.asarray(value, float), np.asarray(reward, float), np.asarray(done, bool),
                   np.asarray(episode, np.int64), list(records))

    def select(self, idx) -> "RolloutBuffer":
        idx = np.asarray(idx, dtype=np.int64)
        return RolloutBuffer(
            self.contexts.select(idx), [self.tokens[i] for i in idx], [self.old_logp[i] for i in idx],
            self.value[idx], self.reward[idx], self.done[idx], self.episode[idx], [],
            None if self.advantages is None else self.advantages[idx],
            None if self.returns is None else self.returns[idx],
        )


def gae(rewards, values, dones, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and returns for one flat trajectory stream.

    ``dones[t]`` marks the last step of an episode; nothing is bootstrapped
    across it (time-limit truncation is treated as terminal).
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=bool)
    adv = np.zeros_like(r)
    last = 0.0
    for t in range(len(r) - 1, -1, -1):
        nonterminal = 0.0 if d[t] else 1.0
        next_v = v[t + 1] if t + 1 < len(r) else 0.0
        delta = r[t] + gamma * next_v * nonterminal - v[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv, adv + v


def compute_gae(buf: RolloutBuffer, gamma: float = 0.99, lam: float = 0.95) -> RolloutBuffer:
    """Fill raw (unnormalized) advantages and returns, episode by episode."""
    adv = np.zeros(len(buf))
    ret = np.zeros(len(buf))
    for e in np.unique(buf.episode):
        idx = np.nonzero(buf.episode == e)[0]
        dones = buf.done[idx].copy()
        dones[-1] = True
        adv[idx], ret[idx] = gae(buf.reward[idx], buf.value[idx], dones, gamma, lam)
    buf.advantages, buf.returns = adv, ret
    return buf


# --------------------------------------------------------------------------- rollouts


def stage_gate(stage: int, gate: GateConfig) -> GateConfig:
    if stage == 1:
        return replace(gate, strategy="nothink")
    if stage == 2:
        return replace(gate, strategy="hybrid")
    raise ValueError(f"stage must be 1 or 2, got {stage}")


def collect_rollouts(
    net: PolicyNet,
    house_seeds: Sequence[int],
    stage: int,
    gate: GateConfig,
    seed: int = 0,
    params: navsim.HouseParams | None = None,
    max_steps: int = 300,
    temperature: float = 1.0,
) -> RolloutBuffer:
    """One episode per house seed; stage I forces no-think, stage II the hybrid gate."""
    params = params or navsim.HouseParams()
    houses = [navsim.generate_house(int(s), params) for s in house_seeds]
    ep_seeds = [derive_seed(seed, "episode", i) for i in range(len(houses))]
    actor = GateActor(net, stage_gate(stage, gate), temperature)
    recs = run_episodes(actor, houses, ep_seeds, max_steps, collect=True, n_categories=params.n_categories)
    return RolloutBuffer.from_records(recs)


# --------------------------------------------------------------------------- objective


def _padded(seqs: Sequence[Sequence[float]], width: int) -> torch.Tensor:
    out = torch.zeros((len(seqs), width), dtype=torch.float64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.float64)
    return out


def exact_kl(logp_all: torch.Tensor, ref_logp_all: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
    """KL(p || q) per position over the allowed tokens; shapes (B, L, V) -> (B, L)."""
    p = torch.exp(logp_all)
    diff = torch.where(allowed, logp_all - ref_logp_all, torch.zeros_like(logp_all))
    return (p * diff).sum(dim=-1)


def ppo_loss(
    net: PolicyNet,
    ref_net: PolicyNet | None,
    mb: RolloutBuffer,
    adv: np.ndarray,
    policy_mask: np.ndarray,
    kl_mask: np.ndarray,
    cfg: PPOConfig,
    beta: float,
) -> tuple[torch.Tensor, dict]:
    """Clipped surrogate on ``policy_mask`` rows + beta * exact KL on ``kl_mask`` rows + value loss."""
    sb = net.score(mb.contexts, mb.tokens)
    dtype = sb.logp.dtype
    L = sb.logp.shape[1]
    old = _padded(mb.old_logp, L).to(dtype)
    valid = sb.valid
    pm = torch.as_tensor(policy_mask, dtype=torch.bool)[:, None] & valid
    a = torch.as_tensor(adv, dtype=dtype)[:, None].expand_as(sb.logp)
    ratio = torch.exp(torch.where(pm, sb.logp - old, torch.zeros_like(old)))
    surr = torch.minimum(ratio * a, torch.clamp(ratio, 1 - cfg.clip, 1 + cfg.clip) * a)
    n_pol = int(pm.sum())
    policy_loss = -(surr * pm).sum() / max(n_pol, 1)
    if beta > 0 and kl_mask.any():
        if ref_net is None:
            raise ValueError("KL anchoring needs a reference net")
        with torch.no_grad():
            ref = ref_net.score(mb.contexts, mb.tokens)
        km = torch.as_tensor(kl_mask, dtype=torch.bool)[:, None] & valid
        kl = exact_kl(sb.logp_all, ref.logp_all.to(dtype), sb.allowed)
        kl_loss = (kl * km).sum() / max(int(km.sum()), 1)
    else:
        kl_loss = torch.zeros((), dtype=dtype)
    ret = torch.as_tensor(mb.returns, dtype=dtype)
    value_loss = ((sb.value - ret) ** 2).mean()
    total = policy_loss + beta * kl_loss + cfg.vf_coef * value_loss
    with torch.no_grad():
        clipfrac = float(((ratio - 1).abs() > cfg.clip)[pm].float().mean()) if n_pol else 0.0
    parts = {
        "policy_loss": policy_loss.item(),
        "kl": kl_loss.item(),
        "value_loss": value_loss.item(),
        "clip_frac": clipfrac,
        "max_ratio": ratio.detach()[pm].max().item() if n_pol else 1.0,
    }
    return total, parts


def stage_masks(buf: RolloutBuffer, stage: int) -> tuple[np.ndarray, np.ndarray]:
    """(policy-term rows, KL rows). Stage I optimizes every (no-think) row."""
    think = buf.think.astype(bool)
    if stage == 1:
        return np.ones(len(buf), dtype=bool), np.zeros(len(buf), dtype=bool)
    return think, ~think


def normalized_advantages(buf: RolloutBuffer, mask: np.ndarray, normalize: bool = True) -> np.ndarray:
    adv = buf.advantages.copy()
    if normalize and mask.any():
        sub = adv[mask]
        adv[mask] = (sub - sub.mean()) / (sub.std() + 1e-8)
    return adv


def ppo_update(
    net: PolicyNet,
    ref_net: PolicyNet | None,
    buf: RolloutBuffer,
    cfg: PPOConfig,
    stage: int,
    optimizer: torch.optim.Optimizer | None = None,
    seed: int = 0,
    beta: float | None = None,
) -> dict:
    """Several epochs of minibatch updates on one buffer; returns mean loss parts."""
    if buf.advantages is None:
        raise ValueError("compute_gae must run before ppo_update")
    beta = (cfg.beta if beta is None else beta) if stage == 2 else 0.0
    opt = optimizer or torch.optim.Adam(net.parameters(), lr=cfg.lr)
    pmask, kmask = stage_masks(buf, stage)
    adv = normalized_advantages(buf, pmask, cfg.normalize_adv)
    rng = np.random.default_rng(seed)
    sums: dict[str, float] = {}
    n_mb = 0
    skipped = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(buf))
        for s in range(0, len(buf), cfg.minibatch):
            idx = order[s : s + cfg.minibatch]
            mb = buf.select(idx)
            loss, parts = ppo_loss(net, ref_net, mb, adv[idx], pmask[idx], kmask[idx], cfg, beta)
            if not torch.isfinite(loss) or not math.isfinite(parts["max_ratio"]):
                log.warning("skipping minibatch with non-finite loss/ratio: %s", parts)
                skipped += 1
                continue
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.max_grad_norm > 0:
                torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.max_grad_norm)
            opt.step()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            n_mb += 1
    out = {k: v / max(n_mb, 1) for k, v in sums.items()}
    out["skipped_minibatches"] = skipped
    return out


# --------------------------------------------------------------------------- two-stage loop


def train_seeds(master: int, stage: int, update: int, n: int) -> list[int]:
    return [derive_seed(master, "train-house", stage, update, k) & 0x7FFFFFFF for k in range(n)]


@dataclass
class StageResult:
    best_net: PolicyNet
    best_update: int
    log: list[dict]
    checkpoints: list[PolicyNet]


def run_stage(
    init_net: PolicyNet,
    stage: int,
    cfg: PPOConfig,
    gate: GateConfig,
    master_seed: int = 0,
    ref_net: PolicyNet | None = None,
    params: navsim.HouseParams | None = None,
    out_dir=None,
    beta: float | None = None,
) -> StageResult:
    """``cfg.updates`` PPO updates; checkpoint n is the net after update n.

    Rollouts gathered with checkpoint n both score it (its rollout SR) and
    feed update n + 1. The checkpoint with the highest rollout SR wins
    (earliest on ties).
    """
    name = "I" if stage == 1 else "II"
    if stage == 2 and ref_net is None:
        ref_net = clone_net(init_net)
    if ref_net is not None:
        ref_net = clone_net(ref_net)
        ref_net.requires_grad_(False)
    net = clone_net(init_net)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def rollouts(n):
        seeds = train_seeds(master_seed, stage, n, cfg.rollout_episodes)
        return collect_rollouts(
            net, seeds, stage, gate, derive_seed(master_seed, "rollout", stage, n), params, cfg.max_steps,
            cfg.temperature,
        )

    buf = rollouts(0)
    logs, ckpts = [], []
    for n in range(1, cfg.updates + 1):
        compute_gae(buf, cfg.gamma, cfg.lam)
        parts = ppo_update(net, ref_net, buf, cfg, stage, opt, seed=derive_seed(master_seed, "ppo", stage, n), beta=beta)
        ckpts.append(clone_net(net))
        buf = rollouts(n)
        recs = buf.records
        steps = sum(r.steps for r in recs)
        entry = {
            "stage": name,
            "update_idx": n,
            "rollout_SR": float(np.mean([r.success for r in recs])),
            "mean_reward": float(np.mean([sum(r.rewards) for r in recs])),
            "policy_loss": parts.get("policy_loss", 0.0),
            "value_loss": parts.get("value_loss", 0.0),
            "mean_KL": parts.get("kl", 0.0),
            "tokens_per_step": sum(r.tokens_generated for r in recs) / steps,
            "thinking_ratio": sum(r.thought_steps for r in recs) / steps,
            "clip_frac": parts.get("clip_frac", 0.0),
        }
        logs.append(entry)
        log.info("stage %s update %d: %s", name, n, entry)
        if out is not None:
            save_checkpoint(net, out / f"stage{name}_update{n}.ckpt")
            with open(out / "train_log.jsonl", "a") as f:
                f.write(json.dumps(entry, sort_keys=True) + "\n")
    best = int(np.argmax([e["rollout_SR"] for e in logs]))
    if out is not None:
        save_checkpoint(ckpts[best], out / f"stage{name}_best.ckpt")
    return StageResult(ckpts[best], best + 1, logs, ckpts)


@dataclass
class TwoStageResult:
    stage1: StageResult
    stage2: StageResult

    @property
    def log(self) -> list[dict]:
        return self.stage1.log + self.stage2.log


def train_two_stage(
    init_net: PolicyNet,
    cfg: PPOConfig,
    gate: GateConfig,
    master_seed: int = 0,
    params: navsim.HouseParams | None = None,
    out_dir=None,
) -> TwoStageResult:
    s1 = run_stage(init_net, 1, cfg, gate, master_seed, None, params, out_dir)
    s2 = run_stage(s1.best_net, 2, cfg, gate, master_seed, s1.best_net, params, out_dir)
    return TwoStageResult(s1, s2)


def config_dict(cfg: PPOConfig) -> dict:
    return asdict(cfg)
