"""Command-line surface: data generation, ingestion, sampling, training,
evaluation, theorem verification and ablation sweeps.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 numeric abort during training.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import numcore as nc
from .model import AblationFlags, GelModel, ModelConfig
from .oracles import ALL_CHECKS, run_suite
from .relstore import (RelGraph, SchemaError, TableDataError, build_graph,
                       load_schema, load_tables)
from .sampler import SamplingConfig, sample, subgraph_to_dict
from .synthgen import SynthConfig, temporal_split, write_db
from .trainer import (EmbeddingCache, NumericAbort, TrainConfig, predict_rows,
                      train, write_metrics_jsonl)

EXIT_OK = 0
EXIT_VERIFY_FAIL = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

SPLIT_FRACTIONS = (0.6, 0.2, 0.2)


class ConfigError(ValueError):
    pass


def _load_json(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _build_dataclass(cls, raw: dict, overrides: dict | None = None):
    known = {f.name for f in dataclasses.fields(cls)}
    merged = dict(raw)
    if overrides:
        merged.update({k: v for k, v in overrides.items() if v is not None})
    bad = set(merged) - known
    if bad:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(bad)}")
    try:
        return cls(**merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


def _load_dataset(data_dir: str):
    schema = load_schema(os.path.join(data_dir, "schema.json"))
    tables = load_tables(schema, data_dir)
    graph = build_graph(schema, tables)
    return schema, tables, graph


def _run_configs(args, raw: dict):
    model_cfg = _build_dataclass(ModelConfig, raw.get("model", {}),
                                 {"init_seed": getattr(args, "seed", None)})
    train_cfg = _build_dataclass(TrainConfig, raw.get("train", {}),
                                 {"rng_seed": getattr(args, "seed", None)})
    samp_cfg = _build_dataclass(SamplingConfig, raw.get("sampling", {}))
    ablation = AblationFlags(
        no_structural_sampling=args.no_structural_sampling,
        no_semantic_refinement=args.no_semantic_refinement,
        no_gaussian_bias=args.no_gaussian_bias,
        no_gnn_branch=args.no_gnn_branch)
    model_cfg.no_gaussian_bias = ablation.no_gaussian_bias
    model_cfg.no_gnn_branch = ablation.no_gnn_branch
    return model_cfg, train_cfg, samp_cfg, ablation


def _ablation_name(ablation: AblationFlags) -> str:
    parts = [f.name.replace("_", "-") for f in dataclasses.fields(ablation)
             if getattr(ablation, f.name)]
    return "+".join(f"no-{p[3:]}" if p.startswith("no-") else p for p in parts) \
        if parts else "full"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    raw = _load_json(args.config)
    cfg = _build_dataclass(SynthConfig, raw, {"rng_seed": args.seed})
    write_db(cfg, args.out)
    print(json.dumps({"out": args.out, "n_entities": cfg.n_entities,
                      "rng_seed": cfg.rng_seed}))
    return EXIT_OK


def cmd_ingest(args) -> int:
    schema, tables, graph = _load_dataset(args.data)
    n_edges = sum(len(nbrs) for adj in graph.adjacency.values() for nbrs in adj) // 2
    print(json.dumps({
        "tables": {t: tables.tables[t].n_rows for t in schema.table_names()},
        "n_nodes": graph.n_nodes,
        "n_edges": n_edges,
        "edge_types": graph.edge_types,
        "dangling_foreign_keys": graph.dangling_fk_count,
    }))
    return EXIT_OK


def cmd_sample(args) -> int:
    schema, tables, graph = _load_dataset(args.data)
    model = GelModel(ModelConfig(d=32, n_layers=1, pe_dim=8,
                                 init_seed=args.seed), schema, tables)
    embed = EmbeddingCache(model, graph, tables)
    samp_cfg = _build_dataclass(SamplingConfig, _load_json(args.config))
    task = schema.task
    tc = tables.tables[task.target_table]
    if not 0 <= args.row < tc.n_rows:
        raise ConfigError(f"row {args.row} out of range [0, {tc.n_rows})")
    node = graph.node_id(task.target_table, args.row)
    seed_time = float(tc.timestamps[task.seed_time_column][args.row])
    sub = sample(graph, node, seed_time, embed, samp_cfg,
                 skip_refinement=args.no_semantic_refinement)
    payload = json.dumps(subgraph_to_dict(sub))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(payload + "\n")
    else:
        print(payload)
    return EXIT_OK


def cmd_train(args) -> int:
    schema, tables, graph = _load_dataset(args.data)
    model_cfg, train_cfg, samp_cfg, ablation = _run_configs(args, _load_json(args.config))
    model = GelModel(model_cfg, schema, tables)
    splits = temporal_split(schema, tables, SPLIT_FRACTIONS)
    os.makedirs(args.out, exist_ok=True)
    result = train(model, graph, schema, tables, splits, train_cfg, samp_cfg,
                   ablation, progress=not args.quiet)
    name = _ablation_name(ablation)
    for rec in result.records:
        rec["ablation"] = name
    write_metrics_jsonl(result.records, os.path.join(args.out, "metrics.jsonl"))
    nc.save_checkpoint(model.parameters(), os.path.join(args.out, "checkpoint"))
    print(json.dumps({"ablation": name, "best_val_metric": result.best_metric,
                      "test_metric": result.test_metric}))
    return EXIT_OK


def cmd_eval(args) -> int:
    schema, tables, graph = _load_dataset(args.data)
    model_cfg, train_cfg, samp_cfg, ablation = _run_configs(args, _load_json(args.config))
    model = GelModel(model_cfg, schema, tables)
    nc.load_checkpoint(model.parameters(), args.checkpoint)
    splits = temporal_split(schema, tables, SPLIT_FRACTIONS)
    test_rows = splits[2]
    embed = EmbeddingCache(model, graph, tables)
    rng = np.random.default_rng(train_cfg.rng_seed)
    scores = predict_rows(model, graph, schema, tables, test_rows, embed,
                          samp_cfg, ablation, train_cfg.rng_seed, rng)
    from .trainer import _target_values, auc, mae
    targets = _target_values(schema, tables)[test_rows]
    if schema.task.kind == "binary_classification":
        metric = {"auc": auc(scores, targets.astype(int))}
    else:
        metric = {"mae": mae(scores, targets)}
    print(json.dumps({"n_test": len(test_rows), **metric}))
    return EXIT_OK


def cmd_verify(args) -> int:
    try:
        reports = run_suite(args.only or None)
    except KeyError as exc:
        raise ConfigError(str(exc)) from exc
    payload = json.dumps(reports, indent=1)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(payload + "\n")
    print(payload)
    failing = [r["check"] for r in reports if not r["passed"]]
    if failing:
        print(f"FAILED checks: {', '.join(failing)}", file=sys.stderr)
        return EXIT_VERIFY_FAIL
    return EXIT_OK


def cmd_ablate(args) -> int:
    schema, tables, graph = _load_dataset(args.data)
    raw = _load_json(args.config)
    splits = temporal_split(schema, tables, SPLIT_FRACTIONS)
    variants = [
        AblationFlags(),
        AblationFlags(no_structural_sampling=True),
        AblationFlags(no_semantic_refinement=True),
        AblationFlags(no_gaussian_bias=True),
        AblationFlags(no_gnn_branch=True),
    ]
    os.makedirs(args.out, exist_ok=True)
    summary = []
    for ablation in variants:
        model_cfg = _build_dataclass(ModelConfig, raw.get("model", {}),
                                     {"init_seed": args.seed})
        train_cfg = _build_dataclass(TrainConfig, raw.get("train", {}),
                                     {"rng_seed": args.seed})
        samp_cfg = _build_dataclass(SamplingConfig, raw.get("sampling", {}))
        model_cfg.no_gaussian_bias = ablation.no_gaussian_bias
        model_cfg.no_gnn_branch = ablation.no_gnn_branch
        model = GelModel(model_cfg, schema, tables)
        result = train(model, graph, schema, tables, splits, train_cfg,
                       samp_cfg, ablation)
        name = _ablation_name(ablation)
        for rec in result.records:
            rec["ablation"] = name
        write_metrics_jsonl(result.records,
                            os.path.join(args.out, f"metrics_{name}.jsonl"))
        summary.append({"ablation": name, "best_val_metric": result.best_metric,
                        "test_metric": result.test_metric})
    payload = json.dumps(summary, indent=1)
    with open(os.path.join(args.out, "ablation_summary.json"), "w") as fh:
        fh.write(payload + "\n")
    print(payload)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------


def _add_ablation_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--no-structural-sampling", action="store_true")
    p.add_argument("--no-semantic-refinement", action="store_true")
    p.add_argument("--no-gaussian-bias", action="store_true")
    p.add_argument("--no-gnn-branch", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relgauss")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic relational database")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("ingest", help="load CSVs and report the built graph")
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("sample", help="sample one seed-centered subgraph")
    p.add_argument("--data", required=True)
    p.add_argument("--row", type=int, required=True)
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-semantic-refinement", action="store_true")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--quiet", action="store_true")
    _add_ablation_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score the test split from a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    _add_ablation_flags(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("verify", help="run the analytical verification suite")
    p.add_argument("--only", action="append", choices=sorted(ALL_CHECKS))
    p.add_argument("--out")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("ablate", help="train all ablation variants")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, SchemaError, TableDataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
