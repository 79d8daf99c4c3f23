"""Per-episode evaluation rows shared by the gate runner, trainer and metrics."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field


@dataclass
class EpisodeRecord:
    task_id: int
    success: bool
    steps: int
    shortest: float
    tokens_generated: int
    thought_steps: int
    strategy: str
    seed: int
    entropies: list[float] = field(default_factory=list)  # prelim normalized entropy, nan if not computed
    rewards: list[float] = field(default_factory=list)
    actions: list[int] = field(default_factory=list)
    thoughts: list[bool] = field(default_factory=list)
    step_tokens: list[int] = field(default_factory=list)
    poses: list[list[int]] = field(default_factory=list)  # start pose + one per step
    ended: bool = False  # terminating action was ``end``
    transitions: dict | None = field(default=None, repr=False, compare=False)
    final_map: object = field(default=None, repr=False, compare=False)

    @property
    def thinking_ratio(self) -> float:
        return self.thought_steps / self.steps if self.steps else 0.0

    def step_log(self):
        """One dict per step in execution order."""
        for t in range(self.steps):
            e = self.entropies[t]
            yield {
                "clock": t,
                "prelim_entropy_norm": None if math.isnan(e) else e,
                "thought": self.thoughts[t],
                "tokens": self.step_tokens[t],
                "action": self.actions[t],
                "reward": self.rewards[t],
            }

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("transitions")
        d.pop("final_map")
        d["entropies"] = [None if math.isnan(e) else e for e in self.entropies]
        d["shortest"] = None if math.isinf(self.shortest) else self.shortest
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeRecord":
        d = dict(d)
        d["entropies"] = [math.nan if e is None else e for e in d.get("entropies", [])]
        d["shortest"] = math.inf if d.get("shortest") is None else d["shortest"]
        return cls(**d)


def save_records(path, records) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def load_records(path) -> list[EpisodeRecord]:
    with open(path) as f:
        return [EpisodeRecord.from_dict(json.loads(line)) for line in f if line.strip()]


def save_step_logs(path, records) -> None:
    with open(path, "w") as f:
        for r in records:
            for row in r.step_log():
                f.write(json.dumps({"task_id": r.task_id, **row}, sort_keys=True) + "\n")
