"""Command-line interface: train, eval, crossplay, report.

Exit codes: 0 success, 2 usage/config error, 3 numerical abort. Every output
file embeds the config hash; eval refuses checkpoints whose world hash does
not match the run's world.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, evaluate, training
from .autodiff import NumericalError
from .checkpoint import CheckpointError, load_checkpoint
from .config import (
    ConfigError, TrainConfig, apply_overrides, config_hash, desk_config,
    load_config, save_config,
)
from .params import ParameterStore
from .rng import make_rng
from .runio import atomic_write_json, write_json, write_table_csv
from .svgplot import bar_chart_svg, heatmap_svg, line_band_svg
from .world import world_hash, zipf_bias

METHODS = ("ours",) + training.BASELINE_KINDS
SUITES = ("accuracy", "bleu", "oracle", "stats", "robustness")


def _output_root(args) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(os.environ.get("REFPOP_OUTPUT_ROOT", "runs"))


def _load_cfg(args) -> TrainConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        cfg = desk_config()
    cfg = apply_overrides(cfg, getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    method = args.ablation if args.ablation else args.method
    run_dir = _output_root(args) / (args.name or f"{method}_seed{cfg.seed}")
    run_dir.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    world = training.build_world(cfg)
    manifest = {
        "tool": "refpop",
        "version": __version__,
        "command": "train",
        "method": method,
        "config": cfg.to_dict(),
        "config_hash": chash,
        "world_hash": world.hash,
        "seed": cfg.seed,
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "outputs": {"metrics": "metrics.csv", "summary": "summary.json",
                    "checkpoints": "checkpoints/"},
    }
    atomic_write_json(run_dir / "manifest.json", manifest)
    save_config(cfg, run_dir / "config.ini")
    (run_dir / "dataset.json").write_text(world.dataset.to_json())

    if args.ablation:
        result = training.run_ablation(args.ablation, cfg, run_dir=run_dir)
    elif args.method == "ours":
        result = training.run_algorithm1(cfg, run_dir=run_dir)
    else:
        result = training.run_baseline(args.method, cfg, run_dir=run_dir)

    summary = {
        "method": method,
        "seed": cfg.seed,
        "config_hash": chash,
        "world_hash": world.hash,
        "iterations": len(result.metrics),
        "final_val_accuracy": result.final_val_acc,
        "final_test_accuracy": result.final_test_acc,
        "buffer_history": result.buffer_history,
    }
    write_json(run_dir / "summary.json", summary)
    manifest["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    atomic_write_json(run_dir / "manifest.json", manifest)
    print(run_dir)
    return 0


def _load_run_pair(run_dir: Path):
    """Load the evaluable (speaker, listener) checkpoints of a run."""
    ckpt_dir = run_dir / "checkpoints"
    speaker_path = ckpt_dir / "meta_speaker_final.ckpt"
    if not speaker_path.exists():
        speaker_path = ckpt_dir / "speaker_final.ckpt"
    listener_path = ckpt_dir / "meta_listener_final.ckpt"
    if not listener_path.exists():
        listener_path = ckpt_dir / "listener_final.ckpt"
    kind_s, s_arch, s_store, s_header = load_checkpoint(speaker_path)
    kind_l, l_arch, l_store, l_header = load_checkpoint(listener_path)
    if kind_s != "speaker" or kind_l != "listener":
        raise CheckpointError(f"{run_dir}: unexpected checkpoint kinds")
    if s_header["world_hash"] != l_header["world_hash"]:
        raise CheckpointError(f"{run_dir}: speaker/listener world hashes differ")
    return (s_arch, s_store), (l_arch, l_store), s_header["world_hash"]


def _run_world(run_dir: Path):
    cfg = load_config(run_dir / "config.ini")
    return cfg, training.build_world(cfg)


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    cfg, world = _run_world(run_dir)
    speaker, listener, ckpt_hash = _load_run_pair(run_dir)
    if ckpt_hash and ckpt_hash != world.hash:
        raise CheckpointError(
            f"world hash mismatch: checkpoints {ckpt_hash} vs config {world.hash}")
    episodes = args.episodes or cfg.eval_episodes
    rng = make_rng(args.seed if args.seed is not None else cfg.seed, "cmd_eval",
                   args.suite)
    speaker_eval = (speaker[0], speaker[1].frozen())
    listener_eval = (listener[0], listener[1].frozen())

    if args.suite == "accuracy":
        acc = evaluate.referential_accuracy(
            world.spec, speaker_eval, listener_eval, world.split.test,
            cfg.n_distractors, episodes, rng,
            distractor_mode=cfg.distractor_mode, hard_threshold=cfg.hard_threshold)
        report = {"suite": "accuracy", "accuracy": acc, "episodes": episodes,
                  "n_distractors": cfg.n_distractors}
    elif args.suite == "bleu":
        from .world import PAD, EOS, canonical_batch
        from .agents import decode_beam, decode_topk, strip_special
        arch, params = speaker_eval
        if args.decoding == "greedy":
            hyps = evaluate.greedy_messages(world.spec, speaker_eval, world.split.test)
        elif args.decoding == "beam":
            hyps = [strip_special(decode_beam(arch, params, obj, n_beams=args.beams),
                                  arch.pad_id, arch.eos_id)
                    for obj in world.split.test]
        else:  # top-k sampling
            toks = decode_topk(arch, params, world.split.test, k=args.topk, rng=rng)
            hyps = [strip_special(row, arch.pad_id, arch.eos_id) for row in toks]
        refs = [strip_special(r, PAD, EOS)
                for r in canonical_batch(world.spec, world.split.test)]
        report = {"suite": "bleu", "bleu": evaluate.bleu(hyps, refs),
                  "decoding": args.decoding, "sentences": len(hyps)}
    elif args.suite == "oracle":
        report = {"suite": "oracle"} | evaluate.oracle_eval(
            world.spec, speaker_eval, listener_eval, world.split.test,
            cfg.n_distractors, episodes, rng)
    elif args.suite == "stats":
        from .world import PAD, EOS, canonical_batch
        from .agents import strip_special
        hyps = evaluate.greedy_messages(world.spec, speaker_eval, world.split.test)
        refs = [strip_special(r, PAD, EOS)
                for r in canonical_batch(world.spec, world.split.test)]
        length_ratio, unique_ratio = evaluate.corpus_stats(hyps, refs)
        report = {"suite": "stats", "length_ratio": length_ratio,
                  "unique_token_ratio": unique_ratio, "sentences": len(hyps)}
    else:  # robustness: this pair on its own world vs the biased variant
        cfg_b = cfg.replace(bias_zipf=args.zipf)
        world_b = training.build_world(cfg_b)
        within = evaluate.referential_accuracy(
            world.spec, speaker_eval, listener_eval, world.split.test,
            cfg.n_distractors, episodes, rng)
        cross = evaluate.referential_accuracy(
            world_b.spec, speaker_eval, listener_eval, world_b.split.test,
            cfg.n_distractors, episodes, make_rng(cfg.seed, "cmd_eval", "cross"))
        report = {"suite": "robustness", "within_world_accuracy": within,
                  "cross_world_accuracy": cross, "zipf_exponent": args.zipf,
                  "episodes": episodes}

    chash = config_hash(cfg)
    out_base = run_dir / f"eval_{args.suite}"
    write_json(out_base.with_suffix(".json"), report, config_hash=chash)
    columns = [k for k in report if k != "suite"]
    write_table_csv(out_base.with_suffix(".csv"), columns,
                    [{c: report[c] for c in columns}], chash)
    print(json.dumps(report))
    return 0


def cmd_crossplay(args) -> int:
    run_dirs = [Path(r) for r in args.runs]
    if len(run_dirs) == 1:
        print("warning: single run gives a 1x1 cross-play matrix", file=sys.stderr)
    speakers, listeners = [], []
    hashes = set()
    cfg = None
    world = None
    for rd in run_dirs:
        run_cfg, run_world = _run_world(rd)
        speaker, listener, ckpt_hash = _load_run_pair(rd)
        hashes.add(ckpt_hash or run_world.hash)
        speakers.append((speaker[0], speaker[1].frozen()))
        listeners.append((listener[0], listener[1].frozen()))
        cfg, world = run_cfg, run_world
    if len(hashes) != 1:
        raise CheckpointError(f"runs span different worlds: {sorted(hashes)}")
    episodes = args.episodes or 1000
    matrix = evaluate.crossplay(world.spec, speakers, listeners, world.split.test,
                                cfg.n_distractors, episodes,
                                base_seed=args.seed if args.seed is not None else 0,
                                distractor_mode=cfg.distractor_mode,
                                hard_threshold=cfg.hard_threshold)
    out_dir = Path(args.out) if args.out else run_dirs[0]
    chash = config_hash(cfg)
    summary = matrix.summary()
    write_json(out_dir / "crossplay.json",
               {"matrix": matrix.accuracies.tolist(), **summary}, config_hash=chash)
    rows = [{"speaker": i, **{f"listener_{j}": float(matrix.accuracies[i, j])
                              for j in range(len(run_dirs))}}
            for i in range(len(run_dirs))]
    write_table_csv(out_dir / "crossplay.csv",
                    ["speaker"] + [f"listener_{j}" for j in range(len(run_dirs))],
                    rows, chash)
    heatmap_svg(out_dir / "crossplay.svg", matrix.accuracies,
                "cross-play referential accuracy", config_hash=chash)
    print(json.dumps(summary))
    return 0


def cmd_report(args) -> int:
    run_dirs = [Path(r) for r in args.runs]
    if not run_dirs:
        raise ConfigError("report needs at least one run directory")
    by_method: dict[str, list[float]] = {}
    chash = ""
    for rd in run_dirs:
        with open(rd / "summary.json") as f:
            summary = json.load(f)
        by_method.setdefault(summary["method"], []).append(
            summary["final_test_accuracy"])
        chash = summary.get("config_hash", chash)
    rows = []
    for method, accs in by_method.items():
        stats = evaluate.mean_std(accs)
        rows.append({"method": method, "mean_accuracy": stats["mean"],
                     "std_accuracy": stats["std"], "seeds": stats["n"]})
    rows.sort(key=lambda r: -r["mean_accuracy"])
    out_dir = Path(args.out) if args.out else run_dirs[0].parent
    out_dir.mkdir(parents=True, exist_ok=True)
    write_table_csv(out_dir / "comparison.csv",
                    ["method", "mean_accuracy", "std_accuracy", "seeds"], rows, chash)
    bar_chart_svg(out_dir / "comparison.svg", [r["method"] for r in rows],
                  [r["mean_accuracy"] for r in rows],
                  [r["std_accuracy"] for r in rows],
                  "test accuracy by method", config_hash=chash)

    if args.diversity:
        rd = Path(args.diversity)
        cfg, world = _run_world(rd)
        _, listener, _ = _load_run_pair(rd)
        listener_eval = (listener[0], listener[1].frozen())
        by_fingerprint = {}
        for p in sorted((rd / "checkpoints").glob("speaker_iter_*.ckpt")):
            _, arch, store, _ = load_checkpoint(p)
            by_fingerprint[store.fingerprint()] = (arch, store.frozen())
        with open(rd / "summary.json") as f:
            history = json.load(f)["buffer_history"]
        members = [(rec["iteration"],
                    [by_fingerprint[fp] for fp in rec["speakers"]
                     if fp in by_fingerprint])
                   for rec in history]
        curve = evaluate.diversity_curve(world.spec, listener_eval, members,
                                         world.split.test, cfg.n_distractors,
                                         args.episodes or 500,
                                         base_seed=cfg.seed)
        write_table_csv(out_dir / "diversity.csv",
                        ["iteration", "mean", "std", "min", "max"],
                        curve.rows(), config_hash(cfg))
        line_band_svg(out_dir / "diversity.svg", curve.iterations, curve.mean,
                      curve.low, curve.high,
                      "meta-listener accuracy across buffered speakers",
                      config_hash=config_hash(cfg))
    print(out_dir / "comparison.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="refpop",
        description="dynamic population-based meta-learning for referential games")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a method, baseline, or ablation")
    p_train.add_argument("--config", help="config file (INI; defaults otherwise)")
    p_train.add_argument("--method", choices=METHODS, default="ours")
    p_train.add_argument("--ablation", choices=training.ABLATION_KINDS)
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--set", action="append", metavar="KEY=VALUE",
                         help="override a config field")
    p_train.add_argument("--out", help="output root (default $REFPOP_OUTPUT_ROOT or ./runs)")
    p_train.add_argument("--name", help="run directory name")
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a finished run")
    p_eval.add_argument("--run", required=True, help="run directory")
    p_eval.add_argument("--suite", choices=SUITES, required=True)
    p_eval.add_argument("--episodes", type=int)
    p_eval.add_argument("--seed", type=int)
    p_eval.add_argument("--zipf", type=float, default=1.0,
                        help="bias exponent of the robustness world")
    p_eval.add_argument("--decoding", choices=("greedy", "beam", "topk"),
                        default="greedy", help="speaker decoding for the bleu suite")
    p_eval.add_argument("--beams", type=int, default=2)
    p_eval.add_argument("--topk", type=int, default=5)
    p_eval.set_defaults(fn=cmd_eval)

    p_cross = sub.add_parser("crossplay", help="cross-play matrix over runs")
    p_cross.add_argument("--runs", nargs="+", required=True)
    p_cross.add_argument("--episodes", type=int)
    p_cross.add_argument("--seed", type=int)
    p_cross.add_argument("--out")
    p_cross.set_defaults(fn=cmd_crossplay)

    p_rep = sub.add_parser("report", help="aggregate runs into a comparison table")
    p_rep.add_argument("--runs", nargs="+", required=True)
    p_rep.add_argument("--out")
    p_rep.add_argument("--diversity", metavar="RUN",
                       help="also emit the diversity curve of this run")
    p_rep.add_argument("--episodes", type=int)
    p_rep.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
