import json
from pathlib import Path

import pytest

from enav.cli.config import SCHEMA, ConfigError, parse_config_text, validate_config
from enav.cli.main import main

TINY = [
    "--set", "data.expert_steps=300", "--set", "sft.batch=64", "--set", "policy.hidden=16",
    "--set", "policy.token_embed=8", "--set", "rl.updates=1", "--set", "rl.rollout_episodes=2",
    "--set", "rl.minibatch=64", "--set", "rl.epochs=1", "--set", "env.train_max_steps=20",
    "--set", "eval.tasks=3", "--set", "env.eval_max_steps=20", "--set", "eval.pass_k_tasks=2",
    "--set", "eval.pass_k_samples=2", "--set", "eval.sweep_taus=0.0,1.0", "--set", "eval.robustness_grid=0:0,0.3:0.1",
]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == 0 else json.loads(err))


# ---------------------------------------------------------------- config


def test_empty_config_gives_defaults(tmp_path):
    (tmp_path / "c.txt").write_text("")
    cfg = validate_config(tmp_path / "c.txt")
    assert cfg.values == {k: f.default for k, f in SCHEMA.items()}
    assert cfg == validate_config(None)
    assert cfg["gate.tau"] == 0.6 and cfg["gate.ntw"] == 5 and cfg["gate.strategy"] == "hybrid"


def test_out_of_range_names_key_and_line():
    with pytest.raises(ConfigError) as e:
        parse_config_text("# comment\n\ngate.tau = 1.5\n", "c.txt")
    assert e.value.key == "gate.tau" and e.value.line == 3
    assert "gate.tau" in str(e.value) and "c.txt:3" in str(e.value)


@pytest.mark.parametrize("text, key, line", [
    ("gate.tauu = 0.5\n", "gate.tauu", 1),
    ("gate.ntw = 3\ngate.ntw = 4\n", "gate.ntw", 2),
    ("rl.gamma = abc\n", "rl.gamma", 1),
    ("gate.tau = nan\n", "gate.tau", 1),
    ("eval.sweep_taus = 0.4,0.2\n", "eval.sweep_taus", 1),
    ("env.room_count_min = 6\n", "env.room_count_max", 1),
])
def test_config_rejections(text, key, line):
    with pytest.raises(ConfigError) as e:
        parse_config_text(text)
    assert e.value.key == key and e.value.line == line


def test_missing_equals_sign():
    with pytest.raises(ConfigError) as e:
        parse_config_text("gate.tau 0.5\n")
    assert e.value.line == 1


def test_config_roundtrip():
    cfg = parse_config_text("gate.tau = 0.3\nrl.normalize_adv = no\neval.robustness_grid = 0:0, 0.5:0.25\nrun.out = x/y\n")
    again = parse_config_text(cfg.to_text())
    assert again == cfg and again.to_text() == cfg.to_text()
    assert again["eval.robustness_grid"] == ((0.0, 0.0), (0.5, 0.25)) and again["rl.normalize_adv"] is False


def test_hash_ignores_output_location():
    a = parse_config_text("run.out = a\n")
    assert a.hash() == parse_config_text("run.out = b\nrun.workers = 3\n").hash()
    assert a.hash() != parse_config_text("run.seed = 1\n").hash()


def test_flags_override_file(tmp_path):
    from enav.cli.main import build_parser, resolve

    (tmp_path / "c.txt").write_text("gate.tau = 0.2\nrun.seed = 4\n")
    args = build_parser().parse_args(["eval", "--config", str(tmp_path / "c.txt"), "--tau", "0.7", "--set", "gate.ntw=2"])
    cfg = resolve(args)
    assert cfg["gate.tau"] == 0.7 and cfg["gate.ntw"] == 2 and cfg["run.seed"] == 4


# ---------------------------------------------------------------- exit codes and errors


def test_config_error_exit_code_two(tmp_path, capsys):
    code, err = run(capsys, "eval", "--out", str(tmp_path), "--tau", "1.5")
    assert code == 2 and err["error"] == "ConfigError" and err["key"] == "gate.tau"


def test_bad_config_file_exit_code_two(tmp_path, capsys):
    (tmp_path / "c.txt").write_text("gate.ntw = 5\nbogus.key = 1\n")
    code, err = run(capsys, "eval", "--config", str(tmp_path / "c.txt"), "--out", str(tmp_path))
    assert code == 2 and err["line"] == 2 and err["key"] == "bogus.key"


def test_stage_two_without_stage_one_names_file(tmp_path, capsys):
    (tmp_path / "up").mkdir()
    code, err = run(capsys, "rl", "--stage", "2", "--from", str(tmp_path / "up"), "--out", str(tmp_path / "o"))
    assert code == 1 and err["error"] == "MissingArtifact"
    assert "stageI_best.ckpt" in err["message"]


def test_eval_without_policy(tmp_path, capsys):
    code, err = run(capsys, "eval", "--out", str(tmp_path))
    assert code == 1 and "--checkpoint" in err["message"]


def test_run_id_collision_rejected(tmp_path, capsys):
    (tmp_path / "up").mkdir()
    args = ["report", "--from", str(tmp_path / "up"), "--out", str(tmp_path / "o"), "--run-id", "r"]
    assert run(capsys, *args)[0] == 0
    code, err = run(capsys, *args)
    assert code == 1 and err["error"] == "RunDirExists"


def test_usage_error_exits_two():
    with pytest.raises(SystemExit) as e:
        main(["rl"])
    assert e.value.code == 2


# ---------------------------------------------------------------- end to end


def _pipeline(root: Path, capsys, tag: str):
    base = ["--out", str(root), "--seed", "3", *TINY]
    runs = {}
    for name, argv in [
        ("data", ["gen-data"]),
        ("sft", ["sft", "--from", "{data}"]),
        ("rl1", ["rl", "--stage", "1", "--from", "{sft}"]),
        ("rl2", ["rl", "--stage", "2", "--from", "{rl1}"]),
        ("eval", ["eval", "--from", "{rl2}", "--strategy", "hybrid"]),
        ("sweep", ["sweep", "qvalue", "--from", "{sft}"]),
        ("robust", ["sweep", "robustness", "--from", "{sft}"]),
        ("analyze", ["analyze", "--from", "{sft}"]),
        ("report", ["report", "--from", "{eval}", "--inputs", "{sweep}", "{robust}", "{analyze}"]),
    ]:
        argv = [a.format(**runs) for a in argv]
        code, res = run(capsys, *argv, *base, "--run-id", f"{tag}-{name}")
        assert code == 0, res
        runs[name] = res["run_dir"]
    return runs


def test_tiny_pipeline_end_to_end_and_deterministic(tmp_path, capsys):
    a = _pipeline(tmp_path / "a", capsys, "x")
    b = _pipeline(tmp_path / "b", capsys, "x")
    for name in a:
        da, db = Path(a[name]), Path(b[name])
        assert (da / "config.txt").exists() and (da / "run.json").exists()
        meta = json.loads((da / "run.json").read_text())
        assert meta["seed"] == 3 and meta["build"]["source_sha256"]
        fa = sorted(p.relative_to(da) for p in da.rglob("*") if p.is_file())
        fb = sorted(p.relative_to(db) for p in db.rglob("*") if p.is_file())
        assert fa == fb
        for rel in fa:
            if rel.name in ("run.json", "config.txt", "result.json"):
                continue  # these embed the output root
            assert (da / rel).read_bytes() == (db / rel).read_bytes(), (name, rel)
    assert (Path(a["rl2"]) / "stageII_best.ckpt").exists()
    assert (Path(a["rl2"]) / "stageI_best.ckpt").exists()
    summary = json.loads((Path(a["eval"]) / "summary.json").read_text())
    assert summary["strategy"] == "hybrid" and summary["tau"] == 0.6 and summary["ntw"] == 5 and summary["episodes"] == 3
    rep = Path(a["report"]) / "report"
    assert (rep / "strategies.csv").read_text().splitlines()[0].startswith("strategy,episodes,success_rate")
    assert (rep / "robustness.csv").exists() and (rep / "sweep_tau.csv").exists()
    # upstream artifacts are not touched by downstream stages
    assert sorted(p.name for p in Path(a["sft"]).iterdir()) == ["config.txt", "result.json", "run.json", "sft.ckpt",
                                                                  "sft_loss.json"]
