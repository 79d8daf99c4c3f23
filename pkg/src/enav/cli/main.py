"""Command-line entry point: one subcommand per pipeline stage.

Every invocation writes into a fresh ``<run.out>/<timestamp>-<config hash>``
directory containing the resolved config, build info, the seed and the
stage's artifacts. Downstream stages point at an upstream run with
``--from``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import subprocess
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .. import __version__, navsim
from ..eval import analysis, metrics, report
from ..gate import GateConfig
from ..policy import PolicyConfig, PolicyNet, load_checkpoint, save_checkpoint
from ..records import load_records, save_records, save_step_logs
from ..seeding import derive_seed
from ..semantic_map import write_ppm
from ..trainer import data, rl, sft
from .config import SCHEMA, ConfigError, RunConfig, validate_config

log = logging.getLogger("enav")


class MissingArtifact(FileNotFoundError):
    pass


class RunDirExists(FileExistsError):
    pass


# --------------------------------------------------------------------------- config -> objects


def house_params(cfg: RunConfig) -> navsim.HouseParams:
    e = cfg.section("env")
    return navsim.HouseParams(
        size=e["size"], room_count=(e["room_count_min"], e["room_count_max"]), min_room=e["min_room"],
        object_density=e["object_density"], n_categories=e["n_categories"], landmark_fraction=e["landmark_fraction"],
        success_radius=e["success_radius"], min_start_distance=e["min_start_distance"],
    )


def policy_config(cfg: RunConfig) -> PolicyConfig:
    p = cfg.section("policy")
    return PolicyConfig(window=p["window"], n_categories=cfg["env.n_categories"], hidden=p["hidden"],
                        token_embed=p["token_embed"], max_trace_len=p["max_trace_len"])


def gate_config(cfg: RunConfig) -> GateConfig:
    return GateConfig(cfg["gate.strategy"], cfg["gate.tau"], cfg["gate.ntw"], cfg["policy.max_trace_len"])


def ppo_config(cfg: RunConfig) -> rl.PPOConfig:
    r = cfg.section("rl")
    return rl.PPOConfig(max_steps=cfg["env.train_max_steps"], **r)


# --------------------------------------------------------------------------- run directories


def build_info() -> dict:
    src = Path(__file__).resolve().parents[1]
    h = hashlib.sha256()
    for f in sorted(src.rglob("*.py")):
        h.update(f.relative_to(src).as_posix().encode())
        h.update(f.read_bytes())
    try:
        describe = subprocess.run(
            ["git", "describe", "--always", "--dirty"], cwd=src, capture_output=True, text=True, timeout=10,
        ).stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        describe = "unknown"
    return {"version": __version__, "git_describe": describe, "source_sha256": h.hexdigest(),
            "torch": torch.__version__, "numpy": np.__version__}


def make_run_dir(cfg: RunConfig, command: str, run_id: str | None = None) -> Path:
    rid = run_id or f"{time.strftime('%Y%m%d-%H%M%S')}-{cfg.hash()}"
    path = Path(cfg["run.out"]) / rid
    if path.exists():
        raise RunDirExists(f"run directory already exists: {path}")
    path.mkdir(parents=True)
    (path / "config.txt").write_text(cfg.to_text())
    (path / "run.json").write_text(json.dumps(
        {"command": command, "seed": cfg["run.seed"], "config_hash": cfg.hash(), "build": build_info()},
        indent=2, sort_keys=True) + "\n")
    return path


def require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {what}: {path}")
    return path


def resolve_checkpoint(args) -> Path:
    if args.checkpoint:
        return require(Path(args.checkpoint), "checkpoint")
    if not args.source:
        raise MissingArtifact("no policy given: pass --checkpoint FILE or --from RUN_DIR")
    src = Path(args.source)
    for name in ("stageII_best.ckpt", "stageI_best.ckpt", "sft.ckpt"):
        if (src / name).exists():
            return src / name
    raise MissingArtifact(f"missing checkpoint in {src}: none of stageII_best.ckpt, stageI_best.ckpt, sft.ckpt")


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------- subcommands


def cmd_gen_data(cfg: RunConfig, args, out: Path) -> dict:
    """Expert rollouts -> bootstrap no-think SFT -> entropy filter -> annotated think samples."""
    d = cfg.section("data")
    seed = cfg.seed_for("data")
    house_seeds = (derive_seed(seed, "expert-house", i) & 0x7FFFFFFF for i in range(10**9))
    ds = data.collect_expert_dataset(house_seeds, d["expert_steps"], house_params(cfg), cfg["env.train_max_steps"],
                                     cfg["policy.window"])
    boot = PolicyNet(policy_config(cfg), seed=cfg.seed_for("bootstrap-init") & 0x7FFFFFFF)
    boot, curve = sft.hsft_train(boot, ds.nrd, d["bootstrap_epochs"], cfg["sft.batch"], cfg["sft.lr"],
                                 seed=cfg.seed_for("bootstrap-sft"))
    sub = data.entropy_filter(ds, boot, d["top_fraction"])
    rd, stats = data.annotate_reasoning(sub, d["annotator_noise"], d["max_attempts"], seed=cfg.seed_for("annotate"))
    ds.rd = rd
    ds.meta.update({"top_fraction": d["top_fraction"], "annotator_noise": d["annotator_noise"],
                    "max_attempts": d["max_attempts"], "annotation": stats, "bootstrap_loss": curve,
                    "seed": cfg["run.seed"]})
    ds.meta.pop("house_seeds", None)
    manifest = data.save_dataset(ds, out / "dataset")
    save_checkpoint(boot, out / "bootstrap.ckpt")
    return {"nrd": len(ds.nrd), "rd": len(rd), "content_sha256": manifest["content_sha256"]}


def cmd_sft(cfg: RunConfig, args, out: Path) -> dict:
    src = Path(args.source) if args.source else None
    if src is None:
        raise MissingArtifact("sft needs --from <gen-data run dir>")
    ds = data.load_dataset(require(src / "dataset", "dataset directory"))
    net = PolicyNet(policy_config(cfg), seed=cfg.seed_for("policy-init") & 0x7FFFFFFF)
    s = cfg.section("sft")
    net, curve = sft.hsft_train(net, ds, s["epochs"], s["batch"], s["lr"], seed=cfg.seed_for("sft"))
    save_checkpoint(net, out / "sft.ckpt")
    write_json(out / "sft_loss.json", {"epoch_loss": curve})
    return {"epoch_loss": curve, "samples": len(ds.training_set())}


def cmd_rl(cfg: RunConfig, args, out: Path) -> dict:
    if not args.source:
        raise MissingArtifact("rl needs --from <upstream run dir>")
    src = Path(args.source)
    ppo = ppo_config(cfg)
    gate = gate_config(cfg)
    if args.stage == 1:
        init = load_checkpoint(require(src / "sft.ckpt", "H-SFT checkpoint"))
        res = rl.run_stage(init, 1, ppo, gate, cfg.seed_for("rl"), None, house_params(cfg), out)
    else:
        ref_path = require(src / "stageI_best.ckpt", "stage-I best checkpoint")
        init = load_checkpoint(ref_path)
        shutil.copyfile(ref_path, out / "stageI_best.ckpt")
        res = rl.run_stage(init, 2, ppo, gate, cfg.seed_for("rl"), init, house_params(cfg), out)
    return {"best_update": res.best_update, "rollout_SR": [e["rollout_SR"] for e in res.log]}


def _tasks(cfg: RunConfig) -> analysis.EvalTasks:
    return analysis.eval_tasks(cfg.seed_for("eval"), cfg["eval.tasks"], house_params(cfg))


def cmd_eval(cfg: RunConfig, args, out: Path) -> dict:
    net = load_checkpoint(resolve_checkpoint(args))
    gate = gate_config(cfg)
    recs = analysis.evaluate(net, _tasks(cfg), gate, cfg["env.eval_max_steps"], cfg["eval.temperature"])
    save_records(out / "records.jsonl", recs)
    save_step_logs(out / "steps.jsonl", recs)
    (out / "strategies.csv").write_text(report.csv_text(report.STRATEGY_COLUMNS, report.strategy_rows({gate.strategy: recs})))
    ts = metrics.token_summary(recs)
    summary = {"strategy": gate.strategy, "tau": gate.tau, "ntw": gate.ntw, "episodes": len(recs),
               "success_rate": metrics.success_rate(recs), "sel": metrics.sel(recs), **asdict(ts)}
    write_json(out / "summary.json", summary)
    return summary


def cmd_sweep(cfg: RunConfig, args, out: Path) -> dict:
    net = load_checkpoint(resolve_checkpoint(args))
    tasks = _tasks(cfg)
    ms, temp, cap = cfg["env.eval_max_steps"], cfg["eval.temperature"], cfg["policy.max_trace_len"]
    if args.kind in ("tau", "qvalue"):
        sw = analysis.q_threshold_sweep(net, tasks, cfg["eval.sweep_taus"], cfg["rl.gamma"], cfg["gate.ntw"], ms, temp, cap)
    elif args.kind == "ntw":
        sw = analysis.ntw_sweep(net, tasks, cfg["eval.sweep_ntws"], cfg["gate.tau"], cfg["rl.gamma"], ms, temp, cap)
    else:
        curve = analysis.robustness_curve(net, tasks, cfg["eval.robustness_grid"], gate_config(cfg), ms, temp)
        rows = [{"p_drop": k[0], "p_mislabel": k[1], "success_rate": v} for k, v in curve.items()]
        write_json(out / "robustness.json", rows)
        return {"robustness": rows}
    rows = sw.rows()
    write_json(out / f"sweep_{args.kind}.json", {"parameter": sw.parameter, "rows": rows})
    return {"parameter": sw.parameter, "rows": rows, "best": sw.best()}


def cmd_analyze(cfg: RunConfig, args, out: Path) -> dict:
    net = load_checkpoint(resolve_checkpoint(args))
    tasks = _tasks(cfg)
    ms, temp = cfg["env.eval_max_steps"], cfg["eval.temperature"]
    nothink = analysis.evaluate(net, tasks, GateConfig("nothink", max_trace_len=cfg["policy.max_trace_len"]), ms, temp)
    hist = metrics.entropy_histogram([e for r in nothink for e in r.entropies], cfg["eval.entropy_taus"])
    write_json(out / "entropy_histogram.json", {"edges": hist.edges, "counts": hist.counts,
                                                "fraction_at_least": {str(k): v for k, v in hist.fraction_at_least.items()}})
    hybrid = analysis.evaluate(net, tasks, gate_config(cfg), ms, temp, keep_maps=True)
    save_records(out / "records.jsonl", hybrid)
    if hybrid[0].strategy != "dense":
        write_ppm(out / "entropy_heatmap_task0.ppm", analysis.entropy_heatmap(hybrid[0], hybrid[0].final_map))
    strat = metrics.difficulty_stratify(hybrid, (cfg["eval.difficulty_b1"], cfg["eval.difficulty_b2"]))
    write_json(out / "stratified.json", {k: asdict(v) for k, v in strat.items()})
    n_tasks = min(cfg["eval.pass_k_tasks"], len(tasks.houses))
    sub = analysis.EvalTasks(tasks.houses[:n_tasks], tasks.episode_seeds[:n_tasks])
    n = cfg["eval.pass_k_samples"]
    counts = analysis.pass_at_k_counts(net, sub, gate_config(cfg), n, cfg["eval.pass_k_temperature"], ms,
                                       cfg.seed_for("pass-at-k"))
    ks = [k for k in (1, 2, 4, 8, 16, 32) if k <= n]
    pk = metrics.pass_at_k(counts, ks)
    write_json(out / "pass_at_k.json", {"counts": counts, "pass_at_k": {str(k): v for k, v in pk.items()}})
    return {"fraction_at_least": {str(k): v for k, v in hist.fraction_at_least.items()},
            "pass_at_k": {str(k): v for k, v in pk.items()}}


def cmd_report(cfg: RunConfig, args, out: Path) -> dict:
    sources = [Path(s) for s in (args.inputs or [])]
    if args.source:
        sources.insert(0, Path(args.source))
    if not sources:
        raise MissingArtifact("report needs one or more run directories (--from / --inputs)")
    results: dict = {"strategies": {}, "sweeps": [], "boundaries": (cfg["eval.difficulty_b1"], cfg["eval.difficulty_b2"])}
    for src in sources:
        require(src, "run directory")
        if (src / "summary.json").exists():
            recs = load_records(src / "records.jsonl")
            results["strategies"][recs[0].strategy if recs else src.name] = recs
        for f in sorted(src.glob("sweep_*.json")):
            sw = json.loads(f.read_text())
            rows = sw["rows"]
            p = sw["parameter"]
            results["sweeps"].append(analysis.SweepResult(
                p, [r[p] for r in rows], [r["mean_q"] for r in rows], [r["tokens_per_step"] for r in rows],
                [r["success_rate"] for r in rows], [r["thinking_ratio"] for r in rows], [r["episodes"] for r in rows]))
        if (src / "entropy_histogram.json").exists():
            h = json.loads((src / "entropy_histogram.json").read_text())
            results["histogram"] = metrics.EntropyHistogram(
                tuple(h["edges"]), tuple(h["counts"]), {float(k): v for k, v in h["fraction_at_least"].items()})
        if (src / "pass_at_k.json").exists():
            results["pass_at_k"] = {int(k): v for k, v in json.loads((src / "pass_at_k.json").read_text())["pass_at_k"].items()}
        if (src / "robustness.json").exists():
            results["robustness"] = {(r["p_drop"], r["p_mislabel"]): r["success_rate"]
                                     for r in json.loads((src / "robustness.json").read_text())}
    files = report.emit_report(results, out / "report")
    return {"files": [f.name for f in files]}


COMMANDS = {
    "gen-data": cmd_gen_data, "sft": cmd_sft, "rl": cmd_rl, "eval": cmd_eval, "sweep": cmd_sweep,
    "analyze": cmd_analyze, "report": cmd_report,
}


# --------------------------------------------------------------------------- argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file (section.key = value lines)")
    common.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
    common.add_argument("--out", help="output root (overrides run.out)")
    common.add_argument("--workers", type=int, help="torch threads for batched episodes (overrides run.workers)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    common.add_argument("--run-id", help="explicit run directory name (must not exist)")
    common.add_argument("--from", dest="source", help="upstream run directory")
    common.add_argument("--checkpoint", help="policy checkpoint file (eval/sweep/analyze)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="enav", description="Entropy-gated hybrid reasoning for gridworld object search.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="collect expert data and build the hybrid dataset")
    sub.add_parser("sft", parents=[common], help="hybrid supervised fine-tuning")
    r = sub.add_parser("rl", parents=[common], help="one PPO stage")
    r.add_argument("--stage", type=int, choices=(1, 2), required=True)
    e = sub.add_parser("eval", parents=[common], help="evaluate one strategy")
    e.add_argument("--strategy", choices=("nothink", "dense", "everyk", "hybrid"))
    e.add_argument("--tau", type=float)
    e.add_argument("--ntw", type=int)
    s = sub.add_parser("sweep", parents=[common], help="threshold / window / robustness sweeps")
    s.add_argument("kind", choices=("tau", "ntw", "qvalue", "robustness"))
    s.add_argument("--strategy", choices=("nothink", "dense", "everyk", "hybrid"), help="strategy for robustness")
    s.add_argument("--tau", type=float)
    s.add_argument("--ntw", type=int)
    sub.add_parser("analyze", parents=[common], help="entropy histogram, heatmap, stratification, Pass@k")
    rep = sub.add_parser("report", parents=[common], help="CSV / SVG report from earlier run directories")
    rep.add_argument("--inputs", nargs="*", help="additional run directories")
    return p


def resolve(args) -> RunConfig:
    cfg = validate_config(args.config)
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}", None, None, "<flags>")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v
    for flag, key in (("seed", "run.seed"), ("out", "run.out"), ("workers", "run.workers"),
                      ("strategy", "gate.strategy"), ("tau", "gate.tau"), ("ntw", "gate.ntw")):
        v = getattr(args, flag, None)
        if v is not None:
            overrides[key] = str(v)
    return cfg.with_overrides(overrides)


def error_record(err: BaseException) -> dict:
    if isinstance(err, ConfigError):
        return err.record()
    return {"error": type(err).__name__, "message": str(err)}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = resolve(args)
        torch.set_num_threads(cfg["run.workers"])
        out = make_run_dir(cfg, args.command, args.run_id)
        result = COMMANDS[args.command](cfg, args, out)
        write_json(out / "result.json", result)
        print(json.dumps({"ok": True, "command": args.command, "run_dir": str(out), "result": result}, sort_keys=True))
        return 0
    except (ConfigError, MissingArtifact, RunDirExists, ValueError, OSError, FloatingPointError) as err:
        print(json.dumps(error_record(err), sort_keys=True), file=sys.stderr)
        return 2 if isinstance(err, ConfigError) else 1


__all__ = ["main", "build_parser", "SCHEMA"]
