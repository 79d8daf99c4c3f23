"""Plain-text run configuration: one ``section.key = value`` per line.

Blank lines and ``#`` comments are ignored. Unknown keys and out-of-range
values are rejected with the offending line number.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from ..seeding import derive_seed


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None, path: str | None = None):
        where = f"{path or '<config>'}:{line}: " if line is not None else ""
        super().__init__(where + message)
        self.key = key
        self.line = line
        self.path = path

    def record(self) -> dict:
        return {"error": "ConfigError", "message": str(self), "key": self.key, "line": self.line, "path": self.path}


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip())


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _pairs(s: str) -> tuple[tuple[float, float], ...]:
    out = []
    for item in s.split(","):
        if not item.strip():
            continue
        a, b = item.split(":")
        out.append((float(a), float(b)))
    return tuple(out)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ",".join(f"{_fmt(a)}:{_fmt(b)}" for a, b in v)
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass(frozen=True)
class Field:
    parse: Callable[[str], Any]
    default: Any
    check: Callable[[Any], bool] = lambda v: True
    rule: str = ""


def _in(lo, hi):
    return lambda v: lo <= v <= hi


def _all(pred):
    return lambda vs: all(pred(v) for v in vs)


_pos = lambda v: v > 0  # noqa: E731
_nonneg = lambda v: v >= 0  # noqa: E731
_prob = _in(0.0, 1.0)

SCHEMA: dict[str, Field] = {
    "run.seed": Field(int, 0, _nonneg, ">= 0"),
    "run.out": Field(str, "runs"),
    "run.workers": Field(int, 1, _pos, ">= 1"),
    "env.size": Field(int, 16, lambda v: v >= 8, ">= 8"),
    "env.room_count_min": Field(int, 2, _pos, ">= 1"),
    "env.room_count_max": Field(int, 5, _pos, ">= 1"),
    "env.min_room": Field(int, 3, _pos, ">= 1"),
    "env.object_density": Field(float, 0.06, _prob, "in [0, 1]"),
    "env.n_categories": Field(int, 12, lambda v: 2 <= v <= 64, "in [2, 64]"),
    "env.landmark_fraction": Field(float, 0.5, _prob, "in [0, 1]"),
    "env.success_radius": Field(int, 4, _nonneg, ">= 0"),
    "env.min_start_distance": Field(int, 4, _nonneg, ">= 0"),
    "env.train_max_steps": Field(int, 300, _pos, ">= 1"),
    "env.eval_max_steps": Field(int, 600, _pos, ">= 1"),
    "policy.window": Field(int, 4, _pos, ">= 1"),
    "policy.hidden": Field(int, 128, _pos, ">= 1"),
    "policy.token_embed": Field(int, 32, _pos, ">= 1"),
    "policy.max_trace_len": Field(int, 8, lambda v: 4 <= v <= 64, "in [4, 64]"),
    "gate.strategy": Field(str, "hybrid", lambda v: v in ("nothink", "dense", "everyk", "hybrid"),
                           "one of nothink, dense, everyk, hybrid"),
    "gate.tau": Field(float, 0.6, _prob, "in [0, 1]"),
    "gate.ntw": Field(int, 5, _nonneg, ">= 0"),
    "data.expert_steps": Field(int, 50000, _pos, ">= 1"),
    "data.bootstrap_epochs": Field(int, 1, _pos, ">= 1"),
    "data.top_fraction": Field(float, 0.2, _prob, "in [0, 1]"),
    "data.annotator_noise": Field(float, 0.1, _prob, "in [0, 1]"),
    "data.max_attempts": Field(int, 8, _pos, ">= 1"),
    "sft.epochs": Field(int, 1, _pos, ">= 1"),
    "sft.batch": Field(int, 256, _pos, ">= 1"),
    "sft.lr": Field(float, 2e-3, _nonneg, ">= 0"),
    "rl.gamma": Field(float, 0.99, _prob, "in [0, 1]"),
    "rl.lam": Field(float, 0.95, _prob, "in [0, 1]"),
    "rl.clip": Field(float, 0.2, _pos, "> 0"),
    "rl.beta": Field(float, 0.1, _nonneg, ">= 0"),
    "rl.rollout_episodes": Field(int, 48, _pos, ">= 1"),
    "rl.minibatch": Field(int, 384, _pos, ">= 1"),
    "rl.lr": Field(float, 3e-4, _nonneg, ">= 0"),
    "rl.epochs": Field(int, 4, _pos, ">= 1"),
    "rl.updates": Field(int, 10, _pos, ">= 1"),
    "rl.vf_coef": Field(float, 0.5, _nonneg, ">= 0"),
    "rl.normalize_adv": Field(_bool, True),
    "rl.max_grad_norm": Field(float, 1.0, _nonneg, ">= 0"),
    "rl.temperature": Field(float, 1.0, _nonneg, ">= 0"),
    "eval.tasks": Field(int, 200, _pos, ">= 1"),
    "eval.temperature": Field(float, 1.0, _nonneg, ">= 0"),
    "eval.difficulty_b1": Field(float, 10.0, _nonneg, ">= 0"),
    "eval.difficulty_b2": Field(float, 25.0, _nonneg, ">= 0"),
    "eval.sweep_taus": Field(_floats, (0.0, 0.2, 0.4, 0.6, 0.8, 1.0), _all(_prob), "comma list in [0, 1]"),
    "eval.sweep_ntws": Field(_ints, (0, 1, 3, 5, 10), _all(_nonneg), "comma list of ints >= 0"),
    "eval.robustness_grid": Field(_pairs, ((0.0, 0.0), (0.1, 0.05), (0.3, 0.1), (0.5, 0.2), (1.0, 1.0)),
                                  _all(lambda p: _prob(p[0]) and _prob(p[1])), "comma list of p_drop:p_mislabel in [0, 1]"),
    "eval.pass_k_samples": Field(int, 16, _pos, ">= 1"),
    "eval.pass_k_temperature": Field(float, 0.2, _nonneg, ">= 0"),
    "eval.pass_k_tasks": Field(int, 50, _pos, ">= 1"),
    "eval.entropy_taus": Field(_floats, (0.2, 0.4, 0.6, 0.8), _all(_prob), "comma list in [0, 1]"),
}

_CROSS_CHECKS = (
    (("env.room_count_min", "env.room_count_max"), lambda a, b: a <= b, "room_count_min must be <= room_count_max"),
    (("eval.difficulty_b1", "eval.difficulty_b2"), lambda a, b: a <= b, "difficulty_b1 must be <= difficulty_b2"),
    (("eval.sweep_taus",), lambda t: all(b > a for a, b in zip(t, t[1:])), "sweep_taus must be strictly increasing"),
    (("eval.sweep_ntws",), lambda t: all(b > a for a, b in zip(t, t[1:])), "sweep_ntws must be strictly increasing"),
)


class RunConfig:
    """Resolved configuration (every key present)."""

    def __init__(self, values: dict[str, Any]):
        self.values = dict(values)

    def __getitem__(self, key: str):
        return self.values[key]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    def section(self, name: str) -> dict[str, Any]:
        p = name + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(self.values[k])}\n" for k in sorted(self.values))

    def hash(self) -> str:
        """Digest of everything except output location and parallelism."""
        body = {k: _fmt(v) for k, v in self.values.items() if k not in ("run.out", "run.workers")}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:12]

    def seed_for(self, component: str) -> int:
        return derive_seed(self.values["run.seed"], component)

    def with_overrides(self, overrides: dict[str, str]) -> "RunConfig":
        vals = dict(self.values)
        for k, raw in overrides.items():
            vals[k] = _parse_value(k, raw, None, "<flags>")
        _cross_check(vals, {}, "<flags>")
        return RunConfig(vals)


def _parse_value(key: str, raw: str, line: int | None, path: str | None):
    if key not in SCHEMA:
        raise ConfigError(f"unknown key {key!r}", key, line, path)
    f = SCHEMA[key]
    try:
        v = f.parse(raw.strip())
    except (ValueError, TypeError) as err:
        raise ConfigError(f"{key}: cannot parse {raw.strip()!r} ({err})", key, line, path) from None
    if isinstance(v, float) and math.isnan(v):
        raise ConfigError(f"{key}: NaN is not allowed", key, line, path)
    if not f.check(v):
        raise ConfigError(f"{key} = {raw.strip()} out of range (must be {f.rule})", key, line, path)
    return v


def _cross_check(vals: dict, lines: dict, path: str | None):
    for keys, pred, msg in _CROSS_CHECKS:
        if not pred(*(vals[k] for k in keys)):
            line = max((lines.get(k, 0) for k in keys), default=0) or None
            raise ConfigError(msg, keys[-1], line, path)


def parse_config_text(text: str, path: str | None = None) -> RunConfig:
    vals = {k: f.default for k, f in SCHEMA.items()}
    lines: dict[str, int] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", None, n, path)
        key, value = (s.strip() for s in line.split("=", 1))
        if key in lines:
            raise ConfigError(f"duplicate key {key!r} (first set on line {lines[key]})", key, n, path)
        vals[key] = _parse_value(key, value, n, path)
        lines[key] = n
    _cross_check(vals, lines, path)
    return RunConfig(vals)


def validate_config(path=None) -> RunConfig:
    """Parse ``path`` (or nothing) and return the resolved configuration."""
    if path is None:
        return parse_config_text("")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}", None, None, str(p))
    return parse_config_text(p.read_text(), str(p))
