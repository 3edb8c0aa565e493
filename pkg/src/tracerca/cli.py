"""Command-line entry point wiring the full pipeline.

Subcommands: simulate | train | prune | diagnose | evaluate | indicators.
Global flags --config/--seed/--verbose; the TRACERCA_CONFIG environment
variable supplies a config path when --config is absent. Config files are
toml or json with sections: generator, train, rca, diagnose.

Exit codes: 0 success, 2 usage/config errors, 1 pipeline failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Optional

log = logging.getLogger("tracerca")

CONFIG_ENV_VAR = "TRACERCA_CONFIG"


class CliError(Exception):
    """Configuration or usage problem; maps to exit code 2."""


def _load_config(path: Optional[str]) -> dict:
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR)
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {p}")
    text = p.read_text()
    if p.suffix == ".json":
        return json.loads(text)
    try:
        import tomllib  # py311+
    except ModuleNotFoundError:
        import tomli as tomllib
    try:
        return tomllib.loads(text)
    except Exception as exc:
        raise CliError(f"cannot parse config {p}: {exc}") from exc


def _dataclass_from(section: dict, cls, **overrides):
    permitted = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - permitted
    if unknown:
        raise CliError(f"unknown {cls.__name__} options: {sorted(unknown)}")
    merged = {**section, **{k: v for k, v in overrides.items() if v is not None}}
    try:
        return cls(**merged)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad {cls.__name__}: {exc}") from exc


def _train_config(config: dict, args) -> "TrainConfig":
    from tracerca.rl.env import RcaEvalConfig
    from tracerca.rl.train import TrainConfig

    section = dict(config.get("train", {}))
    rca_section = section.pop("rca", config.get("rca", {}))
    rca = _dataclass_from(rca_section, RcaEvalConfig)
    return _dataclass_from(
        section,
        TrainConfig,
        seed=args.seed,
        episodes=getattr(args, "episodes", None),
        rca=rca,
    )


def _diagnose_params(config: dict, args) -> dict:
    section = dict(config.get("diagnose", {}))
    params = {
        "n_samples": section.get("n_samples", 10_000),
        "exact_max_players": section.get("exact_max_players", 12),
        "n_permutations": section.get("n_permutations", 200),
        "min_fit_buckets": section.get("min_fit_buckets", 8),
    }
    if getattr(args, "samples", None) is not None:
        params["n_samples"] = args.samples
    return params


def _load_tree(path: str):
    from tracerca.ingest import read_json
    from tracerca.pruning import tree_from_json

    p = Path(path)
    if not p.exists():
        raise CliError(f"tree file not found: {p}")
    return tree_from_json(read_json(p))


def _load_case(path: str):
    from tracerca.ingest import load_case

    p = Path(path)
    if not p.exists():
        raise CliError(f"case file not found: {p}")
    return load_case(p)


def _case_files(directory: str) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise CliError(f"not a directory: {d}")
    files = sorted(d.glob("*.case.json"))
    if not files:
        raise CliError(f"no *.case.json files in {d}")
    return files


def _case_seed(seed: int, case_id: str) -> int:
    import zlib

    return seed ^ zlib.crc32(case_id.encode())


def cmd_simulate(args, config: dict) -> int:
    from tracerca.ingest import case_to_json, write_json
    from tracerca.simgen import GenConfig, generate_suite

    gen = _dataclass_from(config.get("generator", {}), GenConfig, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cases = generate_suite(gen, args.cases, out_dir=out)
    for gc in cases:
        write_json(case_to_json(gc.case), out / f"{gc.case.case_id}.case.json")
        log.info(
            "wrote %s: %d traces, %d spans, causes=%s",
            gc.case.case_id,
            gc.n_traces,
            gc.n_spans,
            sorted(gc.case.true_root_causes),
        )
    print(f"simulated {len(cases)} case(s) into {out}")
    return 0


def cmd_train(args, config: dict) -> int:
    from tracerca.ingest import write_json
    from tracerca.pruning import tree_to_json
    from tracerca.rl.train import (
        TrainingDivergedError,
        load_policy,
        save_policy,
        train_ppo,
        write_history_csv,
    )

    cfg = _train_config(config, args)
    cases = [_load_case(str(f)) for f in _case_files(args.cases)]
    unlabeled = [c.case_id for c in cases if not c.true_root_causes]
    if unlabeled:
        raise CliError(f"training cases must be labelled; missing truth: {unlabeled}")
    resume = None
    out = Path(args.out)
    if args.resume:
        if not out.exists():
            raise CliError(f"--resume given but {out} does not exist")
        resume, _ = load_policy(out)
        log.info("resuming from %s at episode %d", out, resume.episodes_done)
    try:
        result = train_ppo(cases, cfg, resume=resume)
    except TrainingDivergedError as exc:
        snap = out.with_suffix(".diverged.json")
        snap.write_text(json.dumps(exc.snapshot, sort_keys=True, indent=1) + "\n")
        log.error("training diverged; snapshot at %s", snap)
        return 1
    save_policy(out, result, cfg)
    tree_out = Path(args.tree_out) if args.tree_out else out.with_suffix(".tree.json")
    write_json(tree_to_json(result.best_tree), tree_out)
    log_out = Path(args.log) if args.log else out.with_suffix(".log.csv")
    write_history_csv(result.history, log_out)
    print(
        f"trained {result.episodes_done} episodes; best reward {result.best_reward:.4f}; "
        f"policy -> {out}, tree -> {tree_out}, log -> {log_out}"
    )
    return 0


def cmd_prune(args, config: dict) -> int:
    from tracerca.indicators import compute_indicators
    from tracerca.ingest import write_json
    from tracerca.pruning import execute

    case = _load_case(args.case)
    tree = _load_tree(args.tree)
    result = execute(tree, case.graph, compute_indicators(case.graph))
    payload = {
        "case_id": case.case_id,
        "kept": sorted(result.kept),
        "removed": sorted(result.removed),
        "edges": [list(e) for e in result.pruned_graph.sorted_edges()],
        "per_leaf_removed": {str(k): v for k, v in result.per_leaf_removed.items()},
    }
    if args.out:
        write_json(payload, args.out)
    else:
        print(json.dumps(payload, sort_keys=True, indent=1))
    log.info("kept %d, removed %d", len(result.kept), len(result.removed))
    return 0


def cmd_diagnose(args, config: dict) -> int:
    from tracerca.causal import diagnose
    from tracerca.ingest import write_json

    case = _load_case(args.case)
    tree = None if args.no_prune else _load_tree(args.tree)
    params = _diagnose_params(config, args)
    report, _ = diagnose(
        case, tree, seed=_case_seed(args.seed, case.case_id), **params
    )
    report_path = Path(args.report)
    write_json(report.to_json(), report_path)
    text = report.render_text()
    report_path.with_suffix(".txt").write_text(text + "\n")
    print(text)
    return 0


def cmd_evaluate(args, config: dict) -> int:
    from tracerca.causal import diagnose
    from tracerca.metrics import hit_root_cause, pr_at_k, pr_avg, rca_rank_score

    tree = _load_tree(args.tree)
    params = _diagnose_params(config, args)
    rows = []
    failures = 0
    for f in _case_files(args.cases):
        case = _load_case(str(f))
        if not case.true_root_causes:
            log.warning("case %s has no ground truth; skipping", case.case_id)
            continue
        try:
            report, _ = diagnose(
                case, tree, seed=_case_seed(args.seed, case.case_id), **params
            )
            pred = list(report.ranking)
            truth = case.true_root_causes
            rows.append(
                (
                    case.case_id,
                    pr_at_k(pred, truth, 1),
                    pr_at_k(pred, truth, 3),
                    pr_at_k(pred, truth, 5),
                    pr_avg(pred, truth),
                    rca_rank_score(pred, truth),
                    hit_root_cause(set(report.kept), truth),
                    len(report.kept),
                )
            )
        except Exception as exc:
            failures += 1
            log.warning("case %s failed: %s", case.case_id, exc)
            rows.append((case.case_id, *(float("nan"),) * 6, 0))
    if not rows:
        raise CliError("no labelled cases to evaluate")
    header = "case_id,pr@1,pr@3,pr@5,pr@avg,rankscore,hitrootcause,kept_nodes"
    lines = [header]
    for row in rows:
        lines.append(",".join([row[0]] + [repr(x) for x in row[1:-1]] + [str(row[-1])]))
    ok = [r for r in rows if not math.isnan(r[1])]
    if ok:
        means = [sum(r[i] for r in ok) / len(ok) for i in range(1, 8)]
        lines.append(
            ",".join(["mean"] + [repr(x) for x in means[:-1]] + [repr(means[-1])])
        )
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"evaluated {len(rows)} case(s) ({failures} failed) -> {args.out}")
    return 0


def cmd_indicators(args, config: dict) -> int:
    from tracerca.indicators import compute_indicators, indicators_to_json
    from tracerca.ingest import write_json

    case = _load_case(args.case)
    payload = indicators_to_json(compute_indicators(case.graph))
    if args.out:
        write_json(payload, args.out)
    else:
        print(json.dumps(payload, sort_keys=True, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tracerca",
        description="Root-cause analysis on microservice traces: learned graph "
        "pruning plus causal latency attribution.",
    )
    parser.add_argument("--config", help=f"toml/json config (or ${CONFIG_ENV_VAR})")
    parser.add_argument("--seed", type=int, default=0, help="global random seed")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate synthetic incident cases")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--cases", type=int, default=1, help="number of cases")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="learn a pruning policy from labelled cases")
    p.add_argument("--cases", required=True, help="directory of *.case.json files")
    p.add_argument("--out", required=True, help="output policy file (json)")
    p.add_argument("--tree-out", help="output best-tree file (default: <out>.tree.json)")
    p.add_argument("--log", help="output training-log csv (default: <out>.log.csv)")
    p.add_argument("--episodes", type=int, help="override episode budget")
    p.add_argument("--resume", action="store_true", help="continue from existing --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("prune", help="apply a filtering tree to one case")
    p.add_argument("--case", required=True)
    p.add_argument("--tree", required=True)
    p.add_argument("--out", help="output json (default: stdout)")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("diagnose", help="full root-cause diagnosis of one case")
    p.add_argument("--case", required=True)
    p.add_argument("--tree", help="filtering-tree file (required unless --no-prune)")
    p.add_argument("--report", required=True, help="output report json path")
    p.add_argument("--no-prune", action="store_true", help="attribute on the full graph")
    p.add_argument("--samples", type=int, help="simulation samples for attribution")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("evaluate", help="batch diagnosis metrics over a case directory")
    p.add_argument("--cases", required=True)
    p.add_argument("--tree", required=True)
    p.add_argument("--out", required=True, help="output csv path")
    p.add_argument("--samples", type=int, help="simulation samples for attribution")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("indicators", help="dump per-component indicators for one case")
    p.add_argument("--case", required=True)
    p.add_argument("--out", help="output json (default: stdout)")
    p.set_defaults(func=cmd_indicators)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command == "diagnose" and not args.no_prune and not args.tree:
        print("error: --tree is required unless --no-prune is given", file=sys.stderr)
        return 2
    try:
        config = _load_config(args.config)
        return args.func(args, config)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pipeline failure
        log.error("%s", exc, exc_info=args.verbose)
        print(f"pipeline failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
