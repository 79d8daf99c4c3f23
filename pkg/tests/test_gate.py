import math

import numpy as np
import pytest
import torch

from enav import navsim
from enav.gate import (
    GateActor,
    GateConfig,
    GateState,
    decide_and_act,
    run_episode,
    run_episodes,
    token_accounting,
)
from enav.policy import EOT, NOTHINK, THINK, PolicyContext, PolicyNet
from enav.records import EpisodeRecord
from enav.semantic_map import FEATURE_DIM


def fixed_logit_net(bias: dict, seed=0):
    """A net whose logits ignore the context: head weights zero, bias as given."""
    net = PolicyNet(seed=seed)
    with torch.no_grad():
        net.head.weight.zero_()
        net.head.bias.zero_()
        for tok, v in bias.items():
            net.head.bias[tok] = v
    return net


def spread_net(seed=0, scale=300.0):
    """Random net with a wide spread of first-action entropies."""
    net = PolicyNet(seed=seed)
    with torch.no_grad():
        net.head.weight.mul_(scale)
    return net


def ctx(mode=NOTHINK):
    rng = np.random.default_rng(0)
    return PolicyContext(1, rng.integers(0, 4, (4, 7, 5)).astype(np.int8), np.array([0, 2, 0]),
                         np.zeros(FEATURE_DIM, np.float32), mode)


@pytest.fixture(scope="module")
def houses():
    return [navsim.generate_house(1000 + i) for i in range(50)]


def _decisions(records):
    return [(r.actions, r.thoughts) for r in records]


# ---------------------------------------------------------------- config / state


def test_config_validation():
    with pytest.raises(ValueError):
        GateConfig("sometimes")
    with pytest.raises(ValueError):
        GateConfig(ntw=-1)
    with pytest.raises(ValueError):
        GateConfig(tau=-0.1)
    GateConfig(tau=1.5)  # above 1 simply never thinks


def test_state_counter():
    cfg = GateConfig(ntw=3)
    s = GateState.initial(cfg)
    assert s.may_think(cfg)
    s = s.advance(True)
    seq = []
    for _ in range(4):
        seq.append(s.may_think(cfg))
        s = s.advance(False)
    assert seq == [False, False, True, True]


# ---------------------------------------------------------------- single-step examples


def test_low_entropy_does_not_think():
    net = fixed_logit_net({0: 12.0})
    d, _ = decide_and_act(net, ctx(), GateConfig("hybrid", 0.6, 5), GateState(5))
    assert d.prelim_entropy_norm < 0.3
    assert not d.thought and d.tokens_generated == 1 and d.output.mode == NOTHINK


def test_window_blocks_high_entropy():
    net = fixed_logit_net({})
    d, s = decide_and_act(net, ctx(), GateConfig("hybrid", 0.6, 5), GateState(2))
    assert d.prelim_entropy_norm > 0.8
    assert not d.thought and d.tokens_generated == 1 and s.steps_since_think == 3


def test_high_entropy_thinks_and_counts_prelim():
    net = fixed_logit_net({})
    d, s = decide_and_act(net, ctx(), GateConfig("hybrid", 0.6, 5), GateState(5), seed=3)
    assert d.thought and d.output.mode == THINK
    assert d.tokens_generated == 1 + len(d.output.tokens)
    assert s.steps_since_think == 1


def test_dense_has_no_prelim_and_no_extra_token():
    net = fixed_logit_net({})
    d, _ = decide_and_act(net, ctx(), GateConfig("dense"), GateState(0), seed=1)
    assert math.isnan(d.prelim_entropy_norm)
    assert d.thought and d.tokens_generated == len(d.output.tokens)


def test_single_step_matches_batched_runner(houses):
    net = spread_net(1)
    cfg = GateConfig("hybrid", 0.5, 2)
    seen = []

    def hook(i, env, m, d):
        seen.append((env.clock, d))

    run_episodes(GateActor(net, cfg), houses[:1], [77], max_steps=6, on_step=hook)
    state = GateState.initial(cfg)
    win_rec = run_episodes(GateActor(net, cfg), houses[:1], [77], max_steps=6, collect=True)[0]
    t = win_rec.transitions
    for k, (clock, d) in enumerate(seen):
        c = PolicyContext(houses[0].target_category, t["obs_window"][k], t["action_window"][k], t["map_feats"][k])
        single, state = decide_and_act(net, c, cfg, state, seed=77, clock=clock)
        assert single.output.tokens == d.output.tokens and single.thought == d.thought


# ---------------------------------------------------------------- degeneracies


def test_tau_zero_equals_everyk(houses):
    net = spread_net(2)
    seeds = list(range(len(houses)))
    hyb = run_episodes(GateActor(net, GateConfig("hybrid", 0.0, 5)), houses, seeds, max_steps=60)
    evk = run_episodes(GateActor(net, GateConfig("everyk", 0.0, 5)), houses, seeds, max_steps=60)
    assert _decisions(hyb) == _decisions(evk)


def test_tau_above_one_equals_nothink(houses):
    net = spread_net(3)
    seeds = list(range(len(houses)))
    hyb = run_episodes(GateActor(net, GateConfig("hybrid", 1.0 + 1e-9, 5)), houses, seeds, max_steps=60)
    no = run_episodes(GateActor(net, GateConfig("nothink")), houses, seeds, max_steps=60)
    assert [r.poses for r in hyb] == [r.poses for r in no]
    assert _decisions(hyb) == _decisions(no)
    assert all(r.tokens_generated == r.steps for r in hyb)


@pytest.mark.parametrize("k", [0, 1, 3, 5])
def test_ntw_gap(houses, k):
    net = spread_net(4)
    recs = run_episodes(GateActor(net, GateConfig("hybrid", 0.4, k)), houses, range(len(houses)), max_steps=80)
    assert any(r.thought_steps for r in recs)
    for r in recs:
        idx = [i for i, t in enumerate(r.thoughts) if t]
        assert all(b - a >= max(k, 1) for a, b in zip(idx, idx[1:]))


def test_token_bounds(houses):
    net = spread_net(5)
    recs = run_episodes(GateActor(net, GateConfig("hybrid", 0.5, 1)), houses, range(len(houses)), max_steps=50)
    for r in recs:
        _, per_step, tr = token_accounting(r)
        assert 1.0 <= per_step <= 2 + 8 and 0.0 <= tr <= 1.0
        assert all(1 <= n <= 10 for n in r.step_tokens)
        assert all(not math.isnan(e) for e in r.entropies)


# ---------------------------------------------------------------- episodes


def test_expert_episode_is_optimal(houses):
    for h in houses[:10]:
        r = run_episode(None, h, max_steps=600)
        assert r.success and r.steps == navsim.shortest_episode_length(h)


def test_nothink_tokens_equal_steps(houses):
    r = run_episode(spread_net(6), houses[0], GateConfig("nothink"), seed=4, max_steps=40)
    assert r.tokens_generated == r.steps and r.thought_steps == 0


def test_single_step_budget():
    net = fixed_logit_net({0: 30.0})  # always move_ahead
    r = run_episode(net, navsim.generate_house(5), GateConfig("nothink"), max_steps=1)
    assert r.steps == 1 and not r.success and not r.ended


# ---------------------------------------------------------------- accounting


def _record(steps, tokens, thoughts):
    return EpisodeRecord(task_id=0, success=False, steps=steps, shortest=5, tokens_generated=tokens,
                         thought_steps=thoughts, strategy="x", seed=0)


def test_accounting_closed_forms():
    assert token_accounting(_record(10, 10, 0)) == (10, 1.0, 0.0)
    assert token_accounting(_record(10, 90, 10))[2] == 1.0
    with pytest.raises(ValueError):
        token_accounting(_record(0, 0, 0))


def test_accounting_mixed_fixture():
    # uniform over four moves (entropy ln4/ln5 > 0.6), never ends, never stops a trace early
    net = fixed_logit_net({4: -60.0, EOT: -60.0})
    cfg = GateConfig("hybrid", 0.6, 5, max_trace_len=5)
    r = run_episode(net, navsim.generate_house(9), cfg, seed=0, max_steps=10)
    assert r.steps == 10 and r.thoughts == [True] + [False] * 4 + [True] + [False] * 4
    assert r.step_tokens == [7, 1, 1, 1, 1, 7, 1, 1, 1, 1]
    assert token_accounting(r) == (22, 2.2, 0.2)
