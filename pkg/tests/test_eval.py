import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from enav import navsim
from enav.eval import analysis, metrics, report
from enav.gate import GateConfig, run_episode
from enav.policy import ContextBatch, PolicyNet
from enav.records import EpisodeRecord, load_records, save_records
from enav.semantic_map import AnnotatedMap, heat_color

GOLDEN_CSV = (
    "strategy,episodes,success_rate,sel,tokens_per_episode,tokens_per_step,thinking_ratio\n"
    "nothink,2,0.500000,0.500000,15.000000,1.000000,0.000000\n"
    "hybrid,2,1.000000,0.750000,15.000000,1.250000,0.083333\n"
)


def rec(success, shortest, steps, tokens=None, thoughts=0, rewards=None, strategy="x", task=0):
    return EpisodeRecord(
        task_id=task, success=bool(success), steps=steps, shortest=shortest,
        tokens_generated=steps if tokens is None else tokens, thought_steps=thoughts, strategy=strategy, seed=0,
        rewards=list(rewards or []), ended=bool(success),
    )


def fixture_results():
    return {
        "nothink": [rec(1, 10, 10, 10), rec(0, 5, 20, 20)],
        "hybrid": [rec(1, 10, 20, 26, 2), rec(1, 4, 4, 4)],
    }


def constant_net(bias):
    net = PolicyNet(seed=0)
    with torch.no_grad():
        net.head.weight.zero_()
        net.head.bias.zero_()
        for k, v in bias.items():
            net.head.bias[k] = v
    return net


@pytest.fixture(scope="module")
def tasks():
    return analysis.eval_tasks(0, 24)


@pytest.fixture(scope="module")
def spread_net():
    net = PolicyNet(seed=11)
    with torch.no_grad():
        net.head.weight.mul_(300)
    return net


# ---------------------------------------------------------------- SR / SEL


def test_success_rate_examples():
    assert metrics.success_rate([rec(1, 5, 5), rec(1, 5, 5), rec(0, 5, 5), rec(0, 5, 5)]) == 0.5
    assert metrics.success_rate([rec(1, 5, 5)] * 3) == 1.0
    assert metrics.success_rate([rec(0, 5, 5)] * 3) == 0.0
    with pytest.raises(ValueError):
        metrics.success_rate([])


def test_sel_examples():
    assert metrics.sel([rec(1, 10, 10)]) == 1.0
    assert metrics.sel([rec(1, 10, 10), rec(1, 10, 20), rec(0, 5, 600)]) == 0.5
    assert metrics.sel([rec(1, 10, 7)]) == 1.0
    with pytest.raises(ValueError):
        metrics.sel([])
    with pytest.raises(ValueError):
        metrics.sel([rec(0, math.inf, 5)])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(1, 50), st.integers(1, 80)), min_size=1, max_size=20))
def test_sel_never_exceeds_sr(rows):
    recs = [rec(s, w, e) for s, w, e in rows]
    sr, sl = metrics.success_rate(recs), metrics.sel(recs)
    assert sl <= sr + 1e-12
    if all(e <= w for s, w, e in rows if s):
        assert sl == pytest.approx(sr)
    elif any(s and e > w for s, w, e in rows):
        assert sl < sr


# ---------------------------------------------------------------- Q estimate


def test_q_two_step_fixture():
    assert metrics.q_estimate([rec(1, 2, 2, rewards=[0.99, 9.99])], 0.99) == pytest.approx(10.8801, abs=1e-12)


def test_q_all_failure_fixture():
    net = constant_net({2: 30.0})  # always rotate_left: never moves, never ends
    recs = [run_episode(net, navsim.generate_house(s), GateConfig("nothink"), seed=s, max_steps=10) for s in range(3)]
    expected = sum(0.99**t * -0.01 for t in range(10))
    assert expected == pytest.approx(-0.0956, abs=1e-4)
    assert metrics.q_estimate(recs, 0.99) == pytest.approx(expected, abs=1e-12)


def test_tau_sweep_tokens_weakly_decrease(spread_net, tasks):
    sw = analysis.q_threshold_sweep(spread_net, tasks, (0.0, 0.2, 0.4, 0.6, 0.8, 1.0), max_steps=40)
    assert all(b <= a + 1e-12 for a, b in zip(sw.tokens_per_step, sw.tokens_per_step[1:]))
    assert sw.episodes == [24] * 6
    assert sw.raw_thresholds[-1] == pytest.approx(math.log(5))
    assert sw.best() in sw.thresholds


def test_sweep_requires_increasing():
    with pytest.raises(ValueError):
        analysis.SweepResult("tau", [0.2, 0.2], [0, 0], [1, 1], [0, 0], [0, 0], [1, 1])


# ---------------------------------------------------------------- entropy analyses


def test_histogram_fixtures():
    h = metrics.entropy_histogram([0.0] * 10)
    assert h.counts[0] == 10 and h.total == 10 and len(h.counts) == 20
    h = metrics.entropy_histogram([1.0] * 10)
    assert h.counts[-1] == 10
    h = metrics.entropy_histogram([0.0] * 5 + [1.0] * 5 + [math.nan], taus=(0.6,))
    assert h.fraction_at_least[0.6] == 0.5 and h.total == 10
    with pytest.raises(ValueError):
        metrics.entropy_histogram([1.5])


def test_histogram_from_contexts():
    ctx = ContextBatch.stack([_ctx(i) for i in range(6)])
    assert metrics.entropy_histogram is not None
    h = analysis.entropy_histogram_for(constant_net({0: 40.0}), ctx)
    assert h.counts[0] == 6
    h = analysis.entropy_histogram_for(constant_net({}), ctx)
    assert h.counts[-1] == 6 and h.fraction_at_least[0.6] == 1.0


def _ctx(seed):
    from enav.policy import PolicyContext
    from enav.semantic_map import FEATURE_DIM

    rng = np.random.default_rng(seed)
    return PolicyContext(1, rng.integers(-1, 6, (4, 7, 5)).astype(np.int8), np.array([0, 1, 2]),
                         rng.random(FEATURE_DIM).astype(np.float32))


def test_heatmap_colors_and_errors():
    h = navsim.generate_house(3)
    r = run_episode(constant_net({0: 5.0}), h, GateConfig("hybrid", tau=1.5), seed=0, max_steps=6, keep_maps=True)
    r.entropies = [0.0] * r.steps
    img = analysis.entropy_heatmap(r, r.final_map)
    p = r.final_map.trajectory[0]
    from enav.semantic_map import CELL_PX

    c = CELL_PX // 2
    assert tuple(img[p.y * CELL_PX + c, p.x * CELL_PX + c]) == heat_color(0.0)
    with pytest.raises(ValueError):
        analysis.entropy_heatmap(EpisodeRecord(0, False, 1, 3, 1, 0, "x", 0, entropies=[0.1, 0.2]), r.final_map)
    r.entropies[0] = math.nan
    with pytest.raises(ValueError):
        analysis.entropy_heatmap(r, r.final_map)


# ---------------------------------------------------------------- stratification


def test_stratify_fixtures():
    recs = [rec(1, 3, 3), rec(0, 9, 20), rec(1, 10, 10), rec(1, 25, 30), rec(0, 26, 80), rec(1, 40, 50)]
    s = metrics.difficulty_stratify(recs, (10, 25))
    assert [s[b].count for b in metrics.BUCKETS] == [2, 2, 2]
    assert s["easy"].sr == 0.5 and s["medium"].sr == 1.0 and s["hard"].sr == 0.5
    assert metrics.difficulty_bucket(10, (10, 25)) == "medium"
    assert metrics.difficulty_bucket(25, (10, 25)) == "medium"
    s = metrics.difficulty_stratify([rec(1, 3, 3)], (10, 25))
    assert s["medium"].count == 0 and math.isnan(s["medium"].sr) and s["hard"].count == 0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 60), min_size=1, max_size=30))
def test_stratify_counts_sum(ws):
    s = metrics.difficulty_stratify([rec(1, w, w) for w in ws])
    assert sum(b.count for b in s.values()) == len(ws)


# ---------------------------------------------------------------- pass@k


def test_pass_at_k_closed_forms():
    assert metrics.pass_at_k_task(16, 16, 4) == 1.0
    assert metrics.pass_at_k_task(16, 0, 8) == 0.0
    assert metrics.pass_at_k_task(2, 1, 1) == 0.5
    assert metrics.pass_at_k_task(4, 1, 2) == pytest.approx(1 - 3 / 6)
    with pytest.raises(ValueError):
        metrics.pass_at_k_task(4, 1, 5)
    with pytest.raises(ValueError):
        metrics.pass_at_k([], [1])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 16), min_size=1, max_size=10))
def test_pass_at_k_monotone(cs):
    per = [(16, c) for c in cs]
    curve = metrics.pass_at_k(per, [1, 2, 4, 8, 16])
    vals = [curve[k] for k in (1, 2, 4, 8, 16)]
    assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))
    assert curve[1] == pytest.approx(np.mean([c / 16 for c in cs]))


def test_pass_at_k_counts_shape(spread_net, tasks):
    sub = analysis.EvalTasks(tasks.houses[:3], tasks.episode_seeds[:3])
    counts = analysis.pass_at_k_counts(spread_net, sub, GateConfig(), n=4, temperature=0.2, max_steps=30)
    assert len(counts) == 3 and all(n == 4 and 0 <= c <= 4 for n, c in counts)


# ---------------------------------------------------------------- robustness


def test_robustness_clean_point_matches_plain_eval(spread_net, tasks):
    gate = GateConfig()
    curve = analysis.robustness_curve(spread_net, tasks, [(0.0, 0.0), (1.0, 1.0)], gate, max_steps=40)
    plain = metrics.success_rate(analysis.evaluate(spread_net, tasks, gate, 40))
    assert curve[(0.0, 0.0)] == plain
    one = analysis.robustness_curve(spread_net, tasks, [(0.3, 0.1)], gate, max_steps=40)
    corrupted = analysis.evaluate(spread_net, tasks, gate, 40, corruption=(0.3, 0.1))
    assert one == {(0.3, 0.1): metrics.success_rate(corrupted)}


def test_eval_tasks_deterministic():
    a, b = analysis.eval_tasks(5, 10), analysis.eval_tasks(5, 10)
    assert a.houses == b.houses and a.episode_seeds == b.episode_seeds
    assert analysis.eval_tasks(6, 10).houses != a.houses


# ---------------------------------------------------------------- report


def test_strategy_csv_golden():
    rows = report.strategy_rows(fixture_results())
    assert report.csv_text(report.STRATEGY_COLUMNS, rows) == GOLDEN_CSV


def test_empty_report_is_header_only(tmp_path):
    report.emit_report({}, tmp_path)
    assert (tmp_path / "strategies.csv").read_text() == ",".join(report.STRATEGY_COLUMNS) + "\n"
    assert (tmp_path / "records.jsonl").read_text() == ""


def _full_results():
    hist = metrics.entropy_histogram([0.1, 0.5, 0.7, 0.9])
    sw = analysis.SweepResult("tau", [0.0, 0.6, 1.0], [1.0, 2.0, 1.5], [3.0, 1.5, 1.0], [0.5, 0.6, 0.55], [0.3, 0.1, 0.0], [2, 2, 2])
    return {"strategies": fixture_results(), "histogram": hist, "sweeps": [sw], "pass_at_k": {1: 0.4, 2: 0.55, 4: 0.7},
            "robustness": {(0.0, 0.0): 0.6, (0.3, 0.1): 0.5}, "boundaries": (10, 25)}


def test_report_is_byte_identical(tmp_path):
    a = report.emit_report(_full_results(), tmp_path / "a")
    b = report.emit_report(_full_results(), tmp_path / "b")
    assert [p.name for p in a] == [p.name for p in b]
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()
    names = {p.name for p in a}
    assert {"strategies.csv", "stratified.csv", "entropy_histogram.svg", "sweep_tau.csv", "pass_at_k.svg",
            "robustness.csv"} <= names
    assert (tmp_path / "a" / "strategies.csv").read_text() == GOLDEN_CSV
    svg = (tmp_path / "a" / "sweep_tau.svg").read_text()
    assert svg.startswith("<svg") and "<desc>" in svg


def test_report_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        report.emit_report({}, blocker / "sub")


def test_records_roundtrip(tmp_path):
    recs = fixture_results()["hybrid"]
    recs[0].entropies = [math.nan, 0.5]
    save_records(tmp_path / "r.jsonl", recs)
    assert load_records(tmp_path / "r.jsonl") == recs
