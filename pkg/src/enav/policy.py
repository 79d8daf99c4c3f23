"""Two-mode token policy.

A small recurrent decoder conditioned on an encoded context. In no-think
mode it emits a single action token; in think mode it first emits a short
structured reasoning trace (optionally closed by EOT) and then an action
token. Decoding is constrained: trace positions may only produce reasoning
tokens or EOT, the final position only action tokens. All log-probabilities
are taken under the renormalized (masked) distribution at temperature 1;
temperature only changes how tokens are drawn.
"""
from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from collections import deque
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .navsim import N_ACTIONS, Observation
from .seeding import counter_uniforms
from .semantic_map import FEATURE_DIM

# --------------------------------------------------------------------------- vocab

TOKEN_NAMES = (
    "move_ahead", "move_back", "rotate_left", "rotate_right", "end",
    "TGT_VISIBLE", "TGT_HIDDEN",
    "DIR_AHEAD", "DIR_LEFT", "DIR_RIGHT", "DIR_BEHIND",
    "DIST_0", "DIST_1", "DIST_2", "DIST_3",
    "FRONTIER_AHEAD", "FRONTIER_LEFT", "FRONTIER_RIGHT", "FRONTIER_NONE",
    "EOT",
)  # fmt: skip
VOCAB_SIZE = len(TOKEN_NAMES)
TOK = {name: i for i, name in enumerate(TOKEN_NAMES)}
TGT_VISIBLE, TGT_HIDDEN = TOK["TGT_VISIBLE"], TOK["TGT_HIDDEN"]
DIR_AHEAD, DIR_LEFT, DIR_RIGHT, DIR_BEHIND = (TOK[n] for n in ("DIR_AHEAD", "DIR_LEFT", "DIR_RIGHT", "DIR_BEHIND"))
DIST_TOKENS = tuple(TOK[f"DIST_{i}"] for i in range(4))
FRONTIER_AHEAD, FRONTIER_LEFT, FRONTIER_RIGHT, FRONTIER_NONE = (
    TOK[n] for n in ("FRONTIER_AHEAD", "FRONTIER_LEFT", "FRONTIER_RIGHT", "FRONTIER_NONE")
)
EOT = TOK["EOT"]

TOKEN_FAMILIES = {
    "visibility": (TGT_VISIBLE, TGT_HIDDEN),
    "direction": (DIR_AHEAD, DIR_LEFT, DIR_RIGHT, DIR_BEHIND),
    "distance": DIST_TOKENS,
    "frontier": (FRONTIER_AHEAD, FRONTIER_LEFT, FRONTIER_RIGHT, FRONTIER_NONE),
}

ACTION_MASK = np.zeros(VOCAB_SIZE, dtype=bool)
ACTION_MASK[:N_ACTIONS] = True
TRACE_MASK = ~ACTION_MASK  # reasoning tokens + EOT

NOTHINK, THINK = 0, 1
MODE_NAMES = ("nothink", "think")

PAD_LABEL = -1
NULL_ACTION = N_ACTIONS
LN_ACTIONS = math.log(N_ACTIONS)


def is_action(tok: int) -> bool:
    return 0 <= tok < N_ACTIONS


# --------------------------------------------------------------------------- context


@dataclass
class PolicyContext:
    instruction: int
    obs_window: np.ndarray  # (w, depth, width) int8, PAD_LABEL rows for missing history
    action_window: np.ndarray  # (w - 1,) int64, NULL_ACTION for missing history
    map_feats: np.ndarray  # (FEATURE_DIM,) float32
    mode: int = NOTHINK

    def with_mode(self, mode: int) -> "PolicyContext":
        return PolicyContext(self.instruction, self.obs_window, self.action_window, self.map_feats, mode)


@dataclass
class ContextBatch:
    instruction: np.ndarray  # (B,)
    obs_window: np.ndarray  # (B, w, depth, width)
    action_window: np.ndarray  # (B, w - 1)
    map_feats: np.ndarray  # (B, F)
    mode: np.ndarray  # (B,)

    def __len__(self):
        return len(self.instruction)

    @classmethod
    def stack(cls, contexts: Sequence[PolicyContext]) -> "ContextBatch":
        return cls(
            instruction=np.array([c.instruction for c in contexts], dtype=np.int64),
            obs_window=np.stack([c.obs_window for c in contexts]).astype(np.int8),
            action_window=np.stack([c.action_window for c in contexts]).astype(np.int64),
            map_feats=np.stack([c.map_feats for c in contexts]).astype(np.float32),
            mode=np.array([c.mode for c in contexts], dtype=np.int64),
        )

    @classmethod
    def concat(cls, batches: Sequence["ContextBatch"]) -> "ContextBatch":
        return cls(*(np.concatenate([getattr(b, f) for b in batches]) for f in cls._fields()))

    @staticmethod
    def _fields():
        return ("instruction", "obs_window", "action_window", "map_feats", "mode")

    def select(self, idx) -> "ContextBatch":
        return ContextBatch(*(getattr(self, f)[idx] for f in self._fields()))

    def with_mode(self, mode) -> "ContextBatch":
        m = np.broadcast_to(np.asarray(mode, dtype=np.int64), self.mode.shape).copy()
        return ContextBatch(self.instruction, self.obs_window, self.action_window, self.map_feats, m)

    def get(self, i: int) -> PolicyContext:
        return PolicyContext(
            int(self.instruction[i]), self.obs_window[i], self.action_window[i], self.map_feats[i], int(self.mode[i])
        )

    def arrays(self) -> dict:
        return {f: getattr(self, f) for f in self._fields()}


class ContextWindow:
    """Rolling short-term memory: last ``w`` observations and ``w - 1`` actions."""

    def __init__(self, window: int, view_shape: tuple[int, int]):
        self.window = window
        self.view_shape = view_shape
        self.obs: deque[np.ndarray] = deque(maxlen=window)
        self.actions: deque[int] = deque(maxlen=max(window - 1, 0))

    def push_observation(self, obs: Observation) -> None:
        self.obs.append(np.asarray(obs.ego_view, dtype=np.int8))

    def push_action(self, action: int) -> None:
        if self.actions.maxlen:
            self.actions.append(int(action))

    def context(self, instruction: int, map_feats: np.ndarray, mode: int = NOTHINK) -> PolicyContext:
        w = self.window
        frames = np.full((w, *self.view_shape), PAD_LABEL, dtype=np.int8)
        if self.obs:
            frames[w - len(self.obs) :] = np.stack(self.obs)
        acts = np.full((max(w - 1, 0),), NULL_ACTION, dtype=np.int64)
        if self.actions:
            acts[len(acts) - len(self.actions) :] = list(self.actions)
        return PolicyContext(int(instruction), frames, acts, np.asarray(map_feats, dtype=np.float32), mode)


# --------------------------------------------------------------------------- network


@dataclass(frozen=True)
class PolicyConfig:
    window: int = 4
    view_depth: int = 7
    view_width: int = 5
    n_categories: int = 12
    map_dim: int = FEATURE_DIM
    hidden: int = 128
    token_embed: int = 32
    max_trace_len: int = 8

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


N_CELL_CLASSES = 5  # pad, unknown, wall, free, object
_LABEL_CLASS = torch.tensor([0, 1, 2, 3] + [4] * 64, dtype=torch.long)  # indexed by label + 1


class PolicyNet(nn.Module):
    """Context MLP encoder + GRU token core + token-logit head, plus a separate MLP critic."""

    def __init__(self, cfg: PolicyConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg = cfg or PolicyConfig()
        n_cells = cfg.view_depth * cfg.view_width
        in_dim = (
            cfg.window * n_cells * (N_CELL_CLASSES + 1)
            + max(cfg.window - 1, 0) * (N_ACTIONS + 1)
            + cfg.n_categories
            + cfg.map_dim
        )
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.enc1 = nn.Linear(in_dim, cfg.hidden)
            self.mode_embed = nn.Embedding(2, cfg.hidden)
            self.enc2 = nn.Linear(cfg.hidden, cfg.hidden)
            self.tok_embed = nn.Embedding(VOCAB_SIZE + 1, cfg.token_embed)  # last row is BOS
            self.core = nn.GRUCell(cfg.token_embed, cfg.hidden)
            self.head = nn.Linear(cfg.hidden, VOCAB_SIZE)
            # the critic reads the raw context, so value regression cannot
            # overwrite the features the token heads depend on
            self.critic = nn.Sequential(nn.Linear(in_dim, cfg.hidden), nn.Tanh(), nn.Linear(cfg.hidden, 1))
            nn.init.normal_(self.mode_embed.weight, std=0.5)
            with torch.no_grad():
                self.head.weight.mul_(0.01)
                self.head.bias.zero_()
        self.in_dim = in_dim

    @property
    def dtype(self):
        return self.enc1.weight.dtype

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # ------------------------------------------------------------------ encoding
    def context_tensor(self, batch: ContextBatch) -> torch.Tensor:
        cfg = self.cfg
        labels = torch.as_tensor(batch.obs_window, dtype=torch.long)
        b = labels.shape[0]
        cls = _LABEL_CLASS[labels + 1]
        onehot = F.one_hot(cls, N_CELL_CLASSES).to(self.dtype)
        instr = torch.as_tensor(batch.instruction, dtype=torch.long)
        match = (labels == (3 + instr).view(b, 1, 1, 1)).to(self.dtype).unsqueeze(-1)
        obs = torch.cat([onehot, match], dim=-1).reshape(b, -1)
        parts = [obs]
        if cfg.window > 1:
            acts = F.one_hot(torch.as_tensor(batch.action_window, dtype=torch.long), N_ACTIONS + 1)
            parts.append(acts.to(self.dtype).reshape(b, -1))
        parts.append(F.one_hot(instr, cfg.n_categories).to(self.dtype))
        parts.append(torch.as_tensor(batch.map_feats).to(self.dtype))
        return torch.cat(parts, dim=1)

    def encode(self, batch: ContextBatch) -> torch.Tensor:
        return self.encode_with_value(batch, value=False)[0]

    def encode_with_value(self, batch: ContextBatch, value: bool = True) -> tuple[torch.Tensor, torch.Tensor | None]:
        """(decoder initial state, critic value or None)."""
        x = self.context_tensor(batch)
        mode = torch.as_tensor(batch.mode, dtype=torch.long)
        h = torch.tanh(self.enc1(x) + self.mode_embed(mode))
        v = self.critic(x).squeeze(-1) if value else None
        return torch.tanh(self.enc2(h)), v

    def step_logits(self, prev_tokens: torch.Tensor, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.core(self.tok_embed(prev_tokens), h)
        return self.head(h), h

    # ------------------------------------------------------------------ scoring
    def score(
        self, batch: ContextBatch, tokens: Sequence[Sequence[int]], max_trace_len: int | None = None
    ) -> "ScoredBatch":
        """Teacher-forced per-token log-probs and masked distributions."""
        cap = self.cfg.max_trace_len if max_trace_len is None else max_trace_len
        b = len(tokens)
        lengths = [len(t) for t in tokens]
        for i, t in enumerate(tokens):
            check_tokens(t, int(batch.mode[i]), cap)
        L = max(lengths)
        tok = torch.full((b, L), 0, dtype=torch.long)
        allowed = np.zeros((b, L, VOCAB_SIZE), dtype=bool)
        valid = torch.zeros((b, L), dtype=torch.bool)
        for i, t in enumerate(tokens):
            tok[i, : len(t)] = torch.as_tensor(list(t), dtype=torch.long)
            allowed[i, : len(t) - 1] = TRACE_MASK
            allowed[i, len(t) - 1] = ACTION_MASK
            valid[i, : len(t)] = True
        allowed[~valid.numpy()] = True  # padding rows: any finite distribution
        state, value = self.encode_with_value(batch)
        h = state
        prev = torch.full((b,), VOCAB_SIZE, dtype=torch.long)
        logits = []
        for pos in range(L):
            lg, h = self.step_logits(prev, h)
            logits.append(lg)
            prev = tok[:, pos]
        logits = torch.stack(logits, dim=1)
        allowed_t = torch.as_tensor(allowed)
        masked = logits.masked_fill(~allowed_t, -math.inf)
        logp_all = torch.log_softmax(masked, dim=-1)
        logp = logp_all.gather(-1, tok.unsqueeze(-1)).squeeze(-1)
        logp = torch.where(valid, logp, torch.zeros_like(logp))
        return ScoredBatch(logp=logp, logp_all=logp_all, allowed=allowed_t, valid=valid, value=value)


@dataclass
class ScoredBatch:
    logp: torch.Tensor  # (B, L), zero at padding
    logp_all: torch.Tensor  # (B, L, V), -inf outside the legal set
    allowed: torch.Tensor  # (B, L, V) bool
    valid: torch.Tensor  # (B, L) bool
    value: torch.Tensor  # (B,)

    def probs(self) -> torch.Tensor:
        return torch.exp(self.logp_all)


class IllegalTokens(ValueError):
    pass


def check_tokens(tokens: Sequence[int], mode: int, max_trace_len: int) -> None:
    t = list(tokens)
    if not t or not is_action(t[-1]):
        raise IllegalTokens(f"sequence must end with an action token: {t}")
    if mode == NOTHINK:
        if len(t) != 1:
            raise IllegalTokens(f"no-think sequence must be a single action token: {t}")
        return
    trace = t[:-1]
    if any(is_action(x) for x in trace):
        raise IllegalTokens(f"action token inside reasoning trace: {t}")
    if EOT in trace:
        if trace.index(EOT) != len(trace) - 1:
            raise IllegalTokens(f"EOT must directly precede the action: {t}")
        # EOT can only be drawn while fewer than max_trace_len reasoning tokens exist
        if len(trace) - 1 >= max_trace_len:
            raise IllegalTokens(f"EOT after {max_trace_len} reasoning tokens is not decodable: {t}")
    elif len(trace) != max_trace_len:
        raise IllegalTokens(f"trace without EOT must have exactly {max_trace_len} tokens: {t}")


# --------------------------------------------------------------------------- decoding


@dataclass
class PolicyOutput:
    mode: int
    tokens: list[int]
    action: int
    logprobs: list[float]
    first_action_dist: np.ndarray
    entropy_raw: float
    entropy_norm: float
    value: float


def action_entropy(dist) -> tuple[float, float]:
    """Shannon entropy (nats) of an action distribution and its value divided by ln 5."""
    p = np.asarray(dist, dtype=np.float64)
    if p.ndim != 1 or abs(p.sum() - 1.0) > 1e-6 or (p < 0).any():
        raise ValueError(f"not a probability vector: {p}")
    nz = p[p > 0]
    raw = float(-(nz * np.log(nz)).sum())
    raw = min(max(raw, 0.0), LN_ACTIONS)
    return raw, raw / math.log(len(p))


def _masked_probs(logits: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    z = np.where(allowed, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def _draw(probs: np.ndarray, logits: np.ndarray, allowed: np.ndarray, temperature: float, u: np.ndarray) -> np.ndarray:
    """Row-wise draws: argmax (lowest id on ties) at temperature 0, else inverse CDF."""
    if temperature == 0:
        return np.argmax(np.where(allowed, logits, -np.inf), axis=-1)
    p = probs if temperature == 1 else _masked_probs(logits / temperature, allowed)
    c = np.cumsum(p, axis=-1)
    return (c > (u * c[:, -1])[:, None]).argmax(axis=-1)


def uniforms_for(seed: int, n: int, clock: int = 0, purpose: int = 0) -> np.ndarray:
    return counter_uniforms([seed], [clock], purpose, n)[0]


@torch.no_grad()
def decode(
    net: PolicyNet,
    batch: ContextBatch,
    temperature: float,
    uniforms: np.ndarray,
    max_trace_len: int | None = None,
) -> list[PolicyOutput]:
    """Batched constrained decoding; each row follows its own ``batch.mode``.

    ``uniforms`` has shape (B, max_trace_len + 1): row ``i`` supplies the
    draws for sequence ``i`` position by position.
    """
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    cap = net.cfg.max_trace_len if max_trace_len is None else max_trace_len
    b = len(batch)
    state, values = net.encode_with_value(batch)
    values = values.double().numpy()
    h = state
    prev = torch.full((b,), VOCAB_SIZE, dtype=torch.long)
    modes = batch.mode
    tokens = [[] for _ in range(b)]
    logps = [[] for _ in range(b)]
    # phase 0: trace, 1: action, 2: done
    phase = [1 if (modes[i] == NOTHINK or cap == 0) else 0 for i in range(b)]
    phase = np.array(phase)
    n_reason = np.zeros(b, dtype=np.int64)
    first_dist = np.zeros((b, N_ACTIONS))
    pos = 0
    while (phase != 2).any():
        lg, h = net.step_logits(prev, h)
        lg = lg.double().numpy()
        live = np.nonzero(phase != 2)[0]
        allowed = np.where((phase[live] == 1)[:, None], ACTION_MASK, TRACE_MASK)
        p = _masked_probs(lg[live], allowed)
        drawn = _draw(p, lg[live], allowed, temperature, uniforms[live, pos])
        nxt = np.zeros(b, dtype=np.int64)
        nxt[live] = drawn
        for j, i in enumerate(live):
            tok = int(drawn[j])
            tokens[i].append(tok)
            logps[i].append(float(np.log(p[j, tok])))
        acting = phase[live] == 1
        first_dist[live[acting]] = p[acting, :N_ACTIONS]
        tracing = live[~acting]
        eot = drawn[~acting] == EOT
        n_reason[tracing[~eot]] += 1
        phase[live[acting]] = 2
        phase[tracing[eot]] = 1
        phase[tracing[~eot][n_reason[tracing[~eot]] >= cap]] = 1
        prev = torch.as_tensor(nxt)
        pos += 1
    outs = []
    for i in range(b):
        dist = first_dist[i]
        raw, norm = action_entropy(dist / dist.sum())
        outs.append(
            PolicyOutput(
                mode=int(modes[i]), tokens=tokens[i], action=tokens[i][-1], logprobs=logps[i],
                first_action_dist=dist, entropy_raw=raw, entropy_norm=norm, value=float(values[i]),
            )
        )
    return outs


def act_nothink(net: PolicyNet, ctx: PolicyContext, temperature: float = 1.0, seed=0) -> PolicyOutput:
    batch = ContextBatch.stack([ctx.with_mode(NOTHINK)])
    return decode(net, batch, temperature, uniforms_for(seed, 1)[None, :])[0]


def act_think(
    net: PolicyNet, ctx: PolicyContext, max_trace_len: int | None = None, temperature: float = 1.0, seed=0
) -> PolicyOutput:
    cap = net.cfg.max_trace_len if max_trace_len is None else max_trace_len
    batch = ContextBatch.stack([ctx.with_mode(THINK)])
    return decode(net, batch, temperature, uniforms_for(seed, cap + 2)[None, :], max_trace_len=cap)[0]


@torch.no_grad()
def first_action_probs(net: PolicyNet, batch: ContextBatch, chunk: int = 4096) -> np.ndarray:
    """(B, 5) no-think action distributions at temperature 1."""
    out = []
    for s in range(0, len(batch), chunk):
        sub = batch.select(slice(s, s + chunk)).with_mode(NOTHINK)
        h = net.encode(sub)
        lg, _ = net.step_logits(torch.full((len(sub),), VOCAB_SIZE, dtype=torch.long), h)
        out.append(_masked_probs(lg.double().numpy(), ACTION_MASK)[:, :N_ACTIONS])
    return np.concatenate(out) if out else np.zeros((0, N_ACTIONS))


def encode_context(ctx: PolicyContext, net: PolicyNet) -> np.ndarray:
    with torch.no_grad():
        return net.encode(ContextBatch.stack([ctx])).double().numpy()[0]


def forward_logprobs(net: PolicyNet, ctx: PolicyContext, tokens: Sequence[int], max_trace_len: int | None = None):
    """(per-token logprobs, per-position masked distributions, value) for one sequence."""
    with torch.no_grad():
        sb = net.score(ContextBatch.stack([ctx]), [list(tokens)], max_trace_len)
    n = len(tokens)
    return (
        sb.logp[0, :n].double().numpy(),
        sb.probs()[0, :n].double().numpy(),
        float(sb.value[0]),
    )


def backward(net: nn.Module, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of ``loss`` for every named parameter."""
    if not torch.isfinite(loss).all():
        raise FloatingPointError(f"non-finite loss {loss.item()}")
    net.zero_grad(set_to_none=True)
    if loss.requires_grad:
        loss.backward()
    return {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in net.named_parameters()
    }


# --------------------------------------------------------------------------- checkpoints

MAGIC = b"ENAV0001"


def save_checkpoint(net: PolicyNet, path) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(net))


def checkpoint_bytes(net: PolicyNet) -> bytes:
    named = list(net.state_dict().items())
    header = {
        "params": [{"name": k, "shape": list(v.shape)} for k, v in named],
        "vocab": list(TOKEN_NAMES),
        "config": asdict(net.cfg),
        "config_hash": net.cfg.hash(),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    for _, v in named:
        buf.write(v.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    return buf.getvalue()


def load_checkpoint(path) -> PolicyNet:
    with open(path, "rb") as f:
        return checkpoint_from_bytes(f.read())


def checkpoint_from_bytes(data: bytes) -> PolicyNet:
    if data[:8] != MAGIC:
        raise ValueError("not a policy checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + n])
    if tuple(header["vocab"]) != TOKEN_NAMES:
        raise ValueError("checkpoint vocabulary mismatch")
    cfg = PolicyConfig(**header["config"])
    net = PolicyNet(cfg)
    state = {}
    off = 16 + n
    for entry in header["params"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
        off += 4 * count
    if off != len(data):
        raise ValueError("checkpoint payload size mismatch")
    net.load_state_dict(state)
    return net


def clone_net(net: PolicyNet) -> PolicyNet:
    out = PolicyNet(net.cfg)
    out.load_state_dict({k: v.clone() for k, v in net.state_dict().items()})
    return out.to(net.dtype)
