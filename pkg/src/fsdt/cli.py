"""Command-line drivers: data generation, training, evaluation, experiments.

Exit codes: 0 success, 2 configuration error, 3 numeric contract
violation (NaN/Inf encountered where finiteness is required).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

from .autodiff import NumericError
from .envs import (DatasetTier, baseline_returns, generate_dataset,
                   load_training_data, save_dataset, shipped_specs, write_manifest)
from .federation import (ConfigError, FederationConfig, load_config_file,
                         parameter_breakdown, read_metrics, run,
                         save_checkpoint, load_checkpoint, write_metrics,
                         write_run_manifest)
from .evaluation import (evaluate_all, experiment_clients,
                         experiment_context_length, experiment_rounds)

MANIFEST_NAME = "manifest.txt"
METRICS_NAME = "metrics.jsonl"
CHECKPOINT_NAME = "checkpoint.bin"


def _build_config(args) -> FederationConfig:
    if args.config:
        cfg = load_config_file(args.config)
    elif args.profile == "paper":
        cfg = FederationConfig.paper_profile()
    else:
        cfg = FederationConfig.desk_profile()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    cfg.validate()
    return cfg


def _out_dir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _grid(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad grid value {text!r}") from exc
    if not values:
        raise ConfigError(f"empty grid {text!r}")
    return values


def cmd_gen_data(args) -> int:
    cfg = _build_config(args)
    out = _out_dir(args)
    specs = shipped_specs()
    entries = {}
    for type_id in sorted(specs):
        spec = specs[type_id]
        paths = {}
        for tier in DatasetTier:
            episodes = generate_dataset(spec, tier, cfg.episodes_per_tier, cfg.seed)
            fname = f"{type_id}-{tier.name.lower()}.fsdt"
            save_dataset(os.path.join(out, fname), spec, tier, episodes, cfg.seed)
            paths[tier] = fname
        j_random, j_expert = baseline_returns(spec, cfg.baseline_episodes, cfg.seed)
        entries[type_id] = {"paths": paths, "j_random": j_random, "j_expert": j_expert}
        print(f"{type_id}: {cfg.episodes_per_tier} episodes/tier, "
              f"J_random={j_random:.2f} J_expert={j_expert:.2f}")
    write_manifest(os.path.join(out, MANIFEST_NAME), entries)
    print(f"wrote datasets and {MANIFEST_NAME} to {out}")
    return 0


def _load_data(args):
    manifest = os.path.join(args.out, MANIFEST_NAME)
    if not os.path.exists(manifest):
        raise ConfigError(f"no {MANIFEST_NAME} in {args.out}; run gen-data first")
    data = load_training_data(manifest)
    missing = sorted(set(shipped_specs()) - set(data))
    if missing:
        raise ConfigError(f"manifest lacks datasets for agent types: {missing}")
    return data


def cmd_train(args) -> int:
    cfg = _build_config(args)
    out = _out_dir(args)
    data = _load_data(args)

    def report(event, round_idx, state):
        if event == "round":
            print(f"round {round_idx}/{cfg.rounds} done")

    result = run(cfg, data, on_phase=report)
    write_metrics(os.path.join(out, METRICS_NAME), result.metrics)
    save_checkpoint(os.path.join(out, CHECKPOINT_NAME), result)
    write_run_manifest(os.path.join(out, "run.json"), result)
    breakdown = parameter_breakdown(result.server, result.globals_by_type)
    print(f"server parameters: {breakdown['server']} "
          f"({100 * breakdown['server_share']:.1f}% of total)")
    if result.metrics and result.metrics[-1].scores:
        for type_id, score in sorted(result.metrics[-1].scores.items()):
            print(f"final score {type_id}: {score:.1f}")
    print(f"total bytes on the wire: {result.ledger.total()}")
    return 0


def cmd_eval(args) -> int:
    cfg = _build_config(args)
    data = _load_data(args)
    ckpt = os.path.join(args.out, CHECKPOINT_NAME)
    if not os.path.exists(ckpt):
        raise ConfigError(f"no {CHECKPOINT_NAME} in {args.out}; run train first")
    result = load_checkpoint(ckpt, data)
    cfg = dataclasses.replace(result.config, eval_episodes=cfg.eval_episodes, seed=cfg.seed)
    reports = evaluate_all(data, result.globals_by_type, result.server, cfg)
    payload = {}
    for type_id, rep in sorted(reports.items()):
        print(f"{type_id}: return {rep.mean_return:.2f} +- {rep.std_return:.2f}, "
              f"score {rep.normalized_score:.1f}")
        payload[type_id] = dataclasses.asdict(rep)
    with open(os.path.join(args.out, "eval.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
    return 0


def cmd_exp_rounds(args) -> int:
    cfg = _build_config(args)
    out = _out_dir(args)
    data = _load_data(args)
    result, series = experiment_rounds(cfg, data)
    write_metrics(os.path.join(out, METRICS_NAME), result.metrics)
    save_checkpoint(os.path.join(out, CHECKPOINT_NAME), result)
    path = os.path.join(out, "scores_vs_rounds.csv")
    types = sorted(data)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round"] + [f"score_{t}" for t in types])
        for round_idx, scores in series:
            writer.writerow([round_idx] + [repr(scores[t]) for t in types])
    print(f"wrote {path} ({len(series)} evaluation points)")
    return 0


def cmd_exp_context(args) -> int:
    cfg = _build_config(args)
    out = _out_dir(args)
    data = _load_data(args)
    rows = experiment_context_length(cfg, data, _grid(cfg.context_grid))
    path = os.path.join(out, "scores_vs_context.csv")
    types = sorted(data)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["h", "mean_score"] + [f"score_{t}" for t in types]
                        + ["activation_bytes", "total_bytes"])
        for row in rows:
            writer.writerow([row["h"], repr(row["mean_score"])]
                            + [repr(row["scores"][t]) for t in types]
                            + [row["activation_bytes"], row["total_bytes"]])
    print(f"wrote {path} ({len(rows)} context lengths)")
    return 0


def cmd_exp_clients(args) -> int:
    cfg = _build_config(args)
    out = _out_dir(args)
    rows = experiment_clients(cfg, _grid(cfg.clients_grid), cfg.episodes_per_tier)
    path = os.path.join(out, "scores_vs_clients.csv")
    types = sorted(shipped_specs())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n_clients", "per_type_clients"] + [f"score_{t}" for t in types])
        for row in rows:
            writer.writerow([row["n_clients"], row["per_type_clients"]]
                            + [repr(row["scores"][t]) for t in types])
    print(f"wrote {path} ({len(rows)} client counts)")
    return 0


def cmd_report(args) -> int:
    metrics_path = os.path.join(args.out, METRICS_NAME)
    if not os.path.exists(metrics_path):
        raise ConfigError(f"no {METRICS_NAME} in {args.out}; run train first")
    records = read_metrics(metrics_path)
    if not records:
        raise ConfigError("metrics file is empty")
    types = sorted(records[0]["stage1_loss"])
    ledger_keys = sorted(records[0]["ledger"])
    path = os.path.join(args.out, "metrics.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round"] + [f"stage1_loss_{t}" for t in types] + ["stage2_loss"]
                        + [f"score_{t}" for t in types] + ledger_keys)
        for rec in records:
            scores = rec["scores"] or {}
            writer.writerow(
                [rec["round"]]
                + [repr(rec["stage1_loss"][t]) for t in types]
                + [repr(rec["stage2_loss"])]
                + [repr(scores[t]) if t in scores else "" for t in types]
                + [rec["ledger"][k] for k in ledger_keys])
    print(f"wrote {path} ({len(records)} rounds)")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "exp-rounds": cmd_exp_rounds,
    "exp-context": cmd_exp_context,
    "exp-clients": cmd_exp_clients,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fsdt",
        description="Federated split decision-transformer training simulator.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--profile", choices=("desk", "paper"), default="desk")
        p.add_argument("--out", default="runs", help="working directory for data and results")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric contract violation: {exc}", file=sys.stderr)
        return 3


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
