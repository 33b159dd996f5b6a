"""Command-line entry points: stagewise subcommands and full experiment runs.

Exit codes: 0 success, 2 configuration error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from zsdgen.detection_eval import EvaluationError, evaluate_pipeline
from zsdgen.domain import (
    DomainError,
    build_eval_set,
    build_training_set,
    export_embeddings_jsonl,
    export_features_jsonl,
    make_world,
)
from zsdgen.experiment import (
    MODE_ABLATION,
    MODE_FULL,
    MODE_GZSD,
    SWEEP_COMPONENTS,
    SWEEPS,
    STREAM_EVAL_SEEN,
    STREAM_EVAL_UNSEEN,
    STREAM_TRAIN_SET,
    ExperimentConfig,
    ExperimentError,
    apply_overrides,
    load_config,
    load_head_json,
    loss_variant_config,
    run_ablation,
    run_full,
    run_gzsd,
    save_head_json,
    seed_stream,
    write_report,
)
from zsdgen.heads import HeadError
from zsdgen.synthesizer import (
    SynthesisError,
    load_model,
    save_model,
    synthesize,
    train_synthesizer,
    write_losses_csv,
)
from zsdgen.transfer import TransferError, build_variant_head

_CONFIG_ERRORS = (ExperimentError, DomainError, SynthesisError, TransferError, HeadError, EvaluationError)


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="experiment config JSON (defaults apply when omitted)")
    parser.add_argument(
        "--set", action="append", default=[], metavar="PATH=VALUE",
        help="dotted config override, e.g. --set train.n_critic=3",
    )
    parser.add_argument("--out", help="output directory (overrides config out_dir)")
    parser.add_argument("--seed", type=int, help="run a single seed, overriding the config list")
    parser.add_argument("--dry-run", action="store_true", help="validate the config and exit")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zsdgen", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def cmd(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        _common(p)
        return p

    cmd("gen-domain", "generate the synthetic domain and export its JSONL artifacts")
    cmd("train", "train the three-unit feature synthesizer; writes model.bin and losses.csv")
    p = cmd("synthesize", "sample features from a trained synthesizer into JSONL")
    p.add_argument("--model", required=True, help="model.bin checkpoint")
    p.add_argument("--class-id", type=int, required=True)
    p = cmd("transfer", "train the unseen-class head from a trained synthesizer")
    p.add_argument("--model", required=True, help="model.bin checkpoint")
    p = cmd("eval", "evaluate a stored head on a regenerated eval split")
    p.add_argument("--head", required=True, help="head.json from the transfer step")
    p.add_argument("--split", default="test-unseen", choices=("test-seen", "test-unseen"))
    cmd("run-full", "full pipeline per seed: domain, synthesizer, transfer, evaluation")
    p = cmd("ablate", "train once per seed and evaluate every pipeline variant")
    p.add_argument("--sweep", default=SWEEP_COMPONENTS, choices=SWEEPS)
    cmd("gzsd", "evaluate the concatenated seen+unseen head on a mixed eval set")
    p = sub.add_parser("report", help="consolidate completed run manifests into tables")
    p.add_argument("manifests", nargs="+", help="manifest.json paths")
    p.add_argument("--out", required=True, help="directory for report.csv / report.md / series.csv")
    return parser


def _experiment_config(args: argparse.Namespace, mode: str | None = None) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    config = apply_overrides(config, args.set)
    updates: dict = {}
    if mode is not None:
        updates["mode"] = mode
    if args.out:
        updates["out_dir"] = args.out
    if args.seed is not None:
        updates["seeds"] = (int(args.seed),)
    if updates:
        config = replace(config, **updates)
    config.validate()
    return config


def _out_dir(config: ExperimentConfig) -> Path:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_gen_domain(config: ExperimentConfig) -> int:
    out = _out_dir(config)
    seed = int(config.seeds[0])
    world = make_world(replace(config.domain, seed=seed))
    train_set = build_training_set(world, seed_stream(seed, STREAM_TRAIN_SET))
    export_features_jsonl(train_set, out / "features.jsonl")
    export_embeddings_jsonl(world, out / "embeddings.jsonl")
    print(f"wrote {out / 'features.jsonl'} ({len(train_set.records)} records)")
    print(f"wrote {out / 'embeddings.jsonl'} ({world.config.num_classes} classes)")
    return 0


def _train_on_domain(config: ExperimentConfig, seed: int):
    world = make_world(replace(config.domain, seed=seed))
    train_set = build_training_set(world, seed_stream(seed, STREAM_TRAIN_SET))
    train_cfg = replace(loss_variant_config(config.train, config.loss_variant), seed=seed)
    model, seen_head, history = train_synthesizer(train_set, world, train_cfg)
    return world, train_set, train_cfg, model, seen_head, history


def _cmd_train(config: ExperimentConfig) -> int:
    out = _out_dir(config)
    seed = int(config.seeds[0])
    _, _, train_cfg, model, seen_head, history = _train_on_domain(config, seed)
    save_model(out / "model.bin", model, seen_head, train_cfg)
    write_losses_csv(history, out / "losses.csv")
    print(f"wrote {out / 'model.bin'} and {out / 'losses.csv'} ({len(history)} loss rows)")
    return 0


def _cmd_synthesize(config: ExperimentConfig, args: argparse.Namespace) -> int:
    out = _out_dir(config)
    seed = int(config.seeds[0])
    model, _, _ = load_model(args.model)
    world = make_world(replace(config.domain, seed=seed))
    counts = {
        "gt_like": config.transfer.gt_like,
        "fg": config.transfer.fg,
        "bg": config.transfer.bg,
    }
    class_id = int(args.class_id)
    batches = synthesize(model, world.embedding(class_id), class_id, counts, seed_stream(seed, 6))
    path = out / "synth.jsonl"
    with open(path, "w") as fh:
        for kind, batch in zip(("gt_like", "fg", "bg"), batches):
            for row in batch.features:
                fh.write(json.dumps({"class_id": class_id, "kind": kind, "feature": row.tolist()}) + "\n")
    print(f"wrote {path} ({sum(counts.values())} rows)")
    return 0


def _cmd_transfer(config: ExperimentConfig, args: argparse.Namespace) -> int:
    out = _out_dir(config)
    seed = int(config.seeds[0])
    model, _, _ = load_model(args.model)
    world = make_world(replace(config.domain, seed=seed))
    train_set = build_training_set(world, seed_stream(seed, STREAM_TRAIN_SET))
    head = build_variant_head(
        config.variant, model, world, train_set, replace(config.transfer, seed=seed)
    )
    save_head_json(out / "head.json", head)
    print(f"wrote {out / 'head.json'} (variant {config.variant})")
    return 0


def _cmd_eval(config: ExperimentConfig, args: argparse.Namespace) -> int:
    out = _out_dir(config)
    seed = int(config.seeds[0])
    head = load_head_json(args.head)
    world = make_world(replace(config.domain, seed=seed))
    stream = STREAM_EVAL_SEEN if args.split == "test-seen" else STREAM_EVAL_UNSEEN
    eval_set = build_eval_set(world, args.split, seed_stream(seed, stream))
    report = evaluate_pipeline(head, eval_set)
    report.write_json(out / "metrics.json")
    print(f"wrote {out / 'metrics.json'}")
    print(f"recall@100@0.5 = {report.recall['0.5']:.4f}  map@0.5 = {report.map_50:.4f}")
    return 0


def _print_manifest_summary(manifest) -> None:
    print(f"run {manifest.run_id}: {manifest.status} ({len(manifest.seeds)} seeds)")


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)

    try:
        if args.command == "report":
            config = None
        else:
            mode = {
                "run-full": MODE_FULL,
                "ablate": MODE_ABLATION,
                "gzsd": MODE_GZSD,
            }.get(args.command)
            config = _experiment_config(args, mode)
    except _CONFIG_ERRORS as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2

    if args.command != "report" and args.dry_run:
        print(f"config ok: mode={config.mode} seeds={list(config.seeds)} out={config.out_dir}")
        return 0

    try:
        if args.command == "gen-domain":
            return _cmd_gen_domain(config)
        if args.command == "train":
            return _cmd_train(config)
        if args.command == "synthesize":
            return _cmd_synthesize(config, args)
        if args.command == "transfer":
            return _cmd_transfer(config, args)
        if args.command == "eval":
            return _cmd_eval(config, args)
        if args.command == "run-full":
            _print_manifest_summary(run_full(config))
            return 0
        if args.command == "ablate":
            _print_manifest_summary(run_ablation(config, args.sweep))
            return 0
        if args.command == "gzsd":
            _print_manifest_summary(run_gzsd(config))
            return 0
        if args.command == "report":
            try:
                tables = write_report(args.manifests, args.out)
            except ExperimentError as e:  # unreadable manifest = unusable input
                print(f"config error: {e}", file=sys.stderr)
                return 2
            print(f"wrote report for {len(args.manifests)} manifest(s) to {args.out}")
            print(f"{len(tables['rows'])} rows, {len(tables['medians'])} median entries")
            return 0
        raise AssertionError(f"unhandled command {args.command}")
    except Exception as e:  # noqa: BLE001 - the contract is an exit code, not a traceback
        print(f"run failed: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
