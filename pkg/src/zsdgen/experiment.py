"""Experiment orchestration: one JSON config drives seeded runs and reports.

A run executes, per seed: domain generation, synthesizer training, transfer
head training, detection evaluation. Artifacts land under one output
directory with fixed names (config.json, manifest.json, metrics.json, plus
per-seed model.bin / losses.csv). metrics.json holds no timings or
timestamps, so identical (config, seed) runs reproduce it bitwise.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from zsdgen.detection_eval import evaluate_pipeline
from zsdgen.domain import (
    KIND_BG,
    DomainConfig,
    build_eval_set,
    build_holdout_records,
    build_training_set,
    make_world,
    merge_eval_sets,
)
from zsdgen.heads import LinearHead, NearestEmbeddingHead, label_columns
from zsdgen.synthesizer import TrainConfig, save_model, train_synthesizer, write_losses_csv
from zsdgen.transfer import (
    ABLATION_VARIANTS,
    VARIANT_BASELINE,
    VARIANT_FULL,
    TransferConfig,
    build_gzsd_head,
    build_variant_head,
)

SCHEMA_VERSION = 1

MODE_FULL = "full"
MODE_ABLATION = "ablation"
MODE_GZSD = "gzsd"
MODES = (MODE_FULL, MODE_ABLATION, MODE_GZSD)

LOSS_WGAN_ONLY = "wgan_only"
LOSS_CLS = "+cls"
LOSS_EMB = "+emb"
LOSS_CLS_EMB = "+cls+emb"
LOSS_VARIANTS = (LOSS_WGAN_ONLY, LOSS_CLS, LOSS_EMB, LOSS_CLS_EMB)

SWEEP_COMPONENTS = "components"
SWEEP_LOSSES = "losses"
SWEEPS = (SWEEP_COMPONENTS, SWEEP_LOSSES)

# per-seed sub-streams; world generation itself consumes the bare domain seed
STREAM_TRAIN_SET = 100
STREAM_EVAL_SEEN = 101
STREAM_EVAL_UNSEEN = 102
STREAM_HOLDOUT = 103

HOLDOUT_PER_CLASS = 150


class ExperimentError(ValueError):
    """Bad configuration or unusable inputs (CLI exit code 2)."""


class RunFailure(RuntimeError):
    """A pipeline stage failed at runtime (CLI exit code 1)."""


def seed_stream(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((int(seed), int(stream))))


@dataclass(frozen=True)
class ExperimentConfig:
    domain: DomainConfig = field(default_factory=DomainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    transfer: TransferConfig = field(default_factory=TransferConfig)
    mode: str = MODE_FULL
    variant: str = VARIANT_FULL  # pipeline for single-variant modes
    loss_variant: str = LOSS_CLS_EMB
    seeds: tuple[int, ...] = (0,)
    out_dir: str = "run-out"

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ExperimentError(f"unknown mode '{self.mode}' (want one of {MODES})")
        if self.variant not in ABLATION_VARIANTS:
            raise ExperimentError(f"unknown variant '{self.variant}'")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ExperimentError(f"unknown loss variant '{self.loss_variant}'")
        if not self.seeds:
            raise ExperimentError("at least one seed is required")
        if any(int(s) < 0 for s in self.seeds):
            raise ExperimentError("seeds must be non-negative")
        self.domain.validate()
        self.train.validate()
        self.transfer.validate()

    def to_dict(self) -> dict:
        return {
            "domain": asdict(self.domain),
            "train": asdict(self.train),
            "transfer": asdict(self.transfer),
            "mode": self.mode,
            "variant": self.variant,
            "loss_variant": self.loss_variant,
            "seeds": list(int(s) for s in self.seeds),
            "out_dir": self.out_dir,
        }

    @staticmethod
    def from_dict(obj: dict) -> "ExperimentConfig":
        if not isinstance(obj, dict):
            raise ExperimentError("config must be a JSON object")
        known = {f.name for f in fields(ExperimentConfig)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ExperimentError(f"unknown config keys {unknown}")
        kwargs: dict = {}
        for name, cls in (("domain", DomainConfig), ("train", TrainConfig), ("transfer", TransferConfig)):
            if name in obj:
                kwargs[name] = _section_from_dict(cls, obj[name], name)
        for name in ("mode", "variant", "loss_variant", "out_dir"):
            if name in obj:
                kwargs[name] = obj[name]
        if "seeds" in obj:
            kwargs["seeds"] = tuple(int(s) for s in obj["seeds"])
        return ExperimentConfig(**kwargs)


def _section_from_dict(cls, obj, section: str):
    if not isinstance(obj, dict):
        raise ExperimentError(f"config section '{section}' must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(obj) - known)
    if unknown:
        raise ExperimentError(f"unknown config keys {[f'{section}.{k}' for k in unknown]}")
    coerced = {k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()}
    return cls(**coerced)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ExperimentError(f"config file not found: {p}")
    try:
        obj = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ExperimentError(f"config is not valid JSON: {p}: {e}") from None
    return ExperimentConfig.from_dict(obj)


def apply_overrides(config: ExperimentConfig, assignments) -> ExperimentConfig:
    """Dotted-path overrides, e.g. 'train.n_critic=3' or 'seeds=[0,1,2]'."""
    obj = config.to_dict()
    for raw in assignments:
        if "=" not in raw:
            raise ExperimentError(f"override '{raw}' is not of the form path=value")
        path, text = raw.split("=", 1)
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text  # bare strings need no quoting
        parts = path.strip().split(".")
        target = obj
        for part in parts[:-1]:
            if part not in target or not isinstance(target[part], dict):
                raise ExperimentError(f"unknown config path '{path}'")
            target = target[part]
        if parts[-1] not in target:
            raise ExperimentError(f"unknown config path '{path}'")
        target[parts[-1]] = value
    return ExperimentConfig.from_dict(obj)


def config_hash(config: ExperimentConfig) -> str:
    """Content hash of the run's inputs (the output directory is not one)."""
    echo = config.to_dict()
    echo.pop("out_dir")
    canon = json.dumps(echo, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def loss_variant_config(train: TrainConfig, variant: str) -> TrainConfig:
    """Mask the auxiliary-loss weights down to the requested loss variant."""
    if variant not in LOSS_VARIANTS:
        raise ExperimentError(f"unknown loss variant '{variant}'")
    kwargs: dict = {}
    if variant not in (LOSS_CLS, LOSS_CLS_EMB):
        kwargs.update(beta1=0.0, beta2=0.0, beta3=0.0)
    if variant not in (LOSS_EMB, LOSS_CLS_EMB):
        kwargs.update(gamma1=0.0, gamma2=0.0, gamma3=0.0)
    return replace(train, **kwargs) if kwargs else train


# --- classifier-head JSON round trip (CLI handoff between transfer and eval) ---


def save_head_json(path, head) -> None:
    if isinstance(head, LinearHead):
        obj = {
            "kind": "linear",
            "weight": head.weight.tolist(),
            "bias": head.bias.tolist(),
            "class_ids": list(head.class_ids),
            "has_background": head.has_background,
        }
    elif isinstance(head, NearestEmbeddingHead):
        obj = {
            "kind": "nearest",
            "projection": head.projection.tolist(),
            "bias": head.bias.tolist(),
            "embeddings": head.embeddings.tolist(),
            "class_ids": list(head.class_ids),
        }
    else:
        raise ExperimentError(f"cannot serialize head of type {type(head).__name__}")
    Path(path).write_text(json.dumps(obj, sort_keys=True) + "\n")


def load_head_json(path):
    p = Path(path)
    if not p.is_file():
        raise ExperimentError(f"head file not found: {p}")
    obj = json.loads(p.read_text())
    kind = obj.get("kind")
    if kind == "linear":
        return LinearHead(
            weight=np.array(obj["weight"]),
            bias=np.array(obj["bias"]),
            class_ids=[int(c) for c in obj["class_ids"]],
            has_background=bool(obj["has_background"]),
        )
    if kind == "nearest":
        return NearestEmbeddingHead(
            projection=np.array(obj["projection"]),
            bias=np.array(obj["bias"]),
            embeddings=np.array(obj["embeddings"]),
            class_ids=[int(c) for c in obj["class_ids"]],
        )
    raise ExperimentError(f"unknown head kind '{kind}'")


# --- manifest ---


@dataclass
class RunManifest:
    run_id: str
    mode: str
    sweep: str | None
    config: dict
    config_hash: str
    seeds: list[int]
    status: str = "running"
    results: dict = field(default_factory=dict)  # str(seed) -> {label: metrics dict}
    timings_sec: dict = field(default_factory=dict)  # str(seed) -> {stage: seconds}
    artifacts: dict = field(default_factory=dict)  # str(seed) -> {name: relative path}
    error: dict | None = None
    started_at: str = ""
    finished_at: str | None = None
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "run_id": self.run_id,
            "mode": self.mode,
            "sweep": self.sweep,
            "status": self.status,
            "config": self.config,
            "config_hash": self.config_hash,
            "seeds": self.seeds,
            "results": self.results,
            "timings_sec": self.timings_sec,
            "artifacts": self.artifacts,
            "error": self.error,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
        }

    def write(self, out_dir) -> None:
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")


def load_manifest(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ExperimentError(f"manifest not found: {p}")
    obj = json.loads(p.read_text())
    version = obj.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ExperimentError(f"manifest schema {version} unsupported (want {SCHEMA_VERSION})")
    return obj


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class _StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


def _timed_stage(timings: dict, stage: str, fn):
    start = time.perf_counter()
    try:
        out = fn()
    except Exception as e:  # noqa: BLE001 - stage name must reach the manifest
        raise _StageFailure(stage, e) from e
    timings[stage] = round(time.perf_counter() - start, 3)
    return out


# --- per-seed pipeline pieces ---


def _seed_world(config: ExperimentConfig, seed: int):
    world = make_world(replace(config.domain, seed=seed))
    train_set = build_training_set(world, seed_stream(seed, STREAM_TRAIN_SET))
    return world, train_set


def _holdout_accuracy(head: LinearHead, world, seed: int) -> float:
    """Classifier accuracy on real holdout rows the head never trained on."""
    ds = build_holdout_records(
        world, tuple(sorted(world.unseen_ids)), HOLDOUT_PER_CLASS,
        seed_stream(seed, STREAM_HOLDOUT), "holdout-unseen",
    )
    feats = np.stack([r.feature for r in ds.records])
    labels = np.array([r.class_id for r in ds.records])
    is_bg = np.array([r.kind == KIND_BG for r in ds.records])
    labels[is_bg] = head.class_ids[0]  # placeholder; masked to background below
    want = label_columns(head, labels, background_mask=is_bg)
    got = head.logits(feats).argmax(axis=1)
    return float(np.mean(got == want))


def _prepare_out(config: ExperimentConfig, mode: str, sweep: str | None) -> tuple[Path, RunManifest]:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = config_hash(config)
    (out / "config.json").write_text(json.dumps(config.to_dict(), sort_keys=True, indent=2) + "\n")
    manifest = RunManifest(
        run_id=f"{digest[:12]}-{mode}",
        mode=mode,
        sweep=sweep,
        config=config.to_dict(),
        config_hash=digest,
        seeds=[int(s) for s in config.seeds],
        started_at=_now(),
    )
    manifest.write(out)  # pre-training manifest: crash evidence
    return out, manifest


def _finish(out: Path, manifest: RunManifest, config: ExperimentConfig, median: dict) -> RunManifest:
    manifest.status = "complete"
    manifest.finished_at = _now()
    manifest.write(out)
    metrics = {
        "schema_version": SCHEMA_VERSION,
        "mode": manifest.mode,
        "sweep": manifest.sweep,
        "variant": config.variant,
        "loss_variant": config.loss_variant,
        "config_hash": manifest.config_hash,
        "seeds": manifest.seeds,
        "per_seed": manifest.results,
        "median": median,
    }
    (out / "metrics.json").write_text(json.dumps(metrics, sort_keys=True, indent=2) + "\n")
    return manifest


def _fail(out: Path, manifest: RunManifest, seed: int, failure: _StageFailure) -> None:
    manifest.status = "failed"
    manifest.error = {"seed": int(seed), "stage": failure.stage, "message": str(failure.__cause__)}
    manifest.finished_at = _now()
    manifest.write(out)


def _median_over_seeds(results: dict, pick) -> float:
    return float(np.median([pick(per_seed) for per_seed in results.values()]))


def _median_block(results: dict, labels) -> dict:
    """Median recall per threshold and median mAP, per result label."""
    block: dict = {"recall_at_100": {}, "map_50": {}}
    sample = next(iter(results.values()))
    for label in labels:
        thresholds = sorted(sample[label]["recall_at_100"])
        block["recall_at_100"][label] = {
            thr: _median_over_seeds(results, lambda r, t=thr, lb=label: r[lb]["recall_at_100"][t])
            for thr in thresholds
        }
        block["map_50"][label] = _median_over_seeds(results, lambda r, lb=label: r[lb]["map_50"])
    return block


def run_full(config: ExperimentConfig) -> RunManifest:
    """Pipeline per seed: domain → synthesizer → transfer head → evaluation."""
    config.validate()
    out, manifest = _prepare_out(config, MODE_FULL, None)
    train_cfg = loss_variant_config(config.train, config.loss_variant)
    for seed in config.seeds:
        timings: dict = {}
        key = str(int(seed))
        try:
            world, train_set = _timed_stage(timings, "domain", lambda: _seed_world(config, seed))
            seed_train = replace(train_cfg, seed=int(seed))
            model, seen_head, history = _timed_stage(
                timings, "synthesizer", lambda: train_synthesizer(train_set, world, seed_train)
            )
            seed_dir = out / f"seed-{int(seed)}"
            seed_dir.mkdir(exist_ok=True)
            save_model(seed_dir / "model.bin", model, seen_head, seed_train)
            write_losses_csv(history, seed_dir / "losses.csv")
            head = _timed_stage(
                timings, "transfer",
                lambda: build_variant_head(
                    config.variant, model, world, train_set, replace(config.transfer, seed=int(seed))
                ),
            )

            def _eval():
                ev = build_eval_set(world, "test-unseen", seed_stream(seed, STREAM_EVAL_UNSEEN))
                entry = evaluate_pipeline(head, ev).to_dict()
                if isinstance(head, LinearHead):
                    entry["holdout_accuracy"] = _holdout_accuracy(head, world, seed)
                return entry

            entry = _timed_stage(timings, "evaluate", _eval)
            manifest.results[key] = {config.variant: entry}
            manifest.timings_sec[key] = timings
            manifest.artifacts[key] = {
                "model": f"seed-{int(seed)}/model.bin",
                "losses": f"seed-{int(seed)}/losses.csv",
            }
            manifest.write(out)
        except _StageFailure as failure:
            _fail(out, manifest, seed, failure)
            raise RunFailure(str(failure)) from failure
    median = _median_block(manifest.results, [config.variant])
    if all(config.variant in r and "holdout_accuracy" in r[config.variant] for r in manifest.results.values()):
        median["holdout_accuracy"] = _median_over_seeds(
            manifest.results, lambda r: r[config.variant]["holdout_accuracy"]
        )
    return _finish(out, manifest, config, median)


def run_ablation(config: ExperimentConfig, sweep: str = SWEEP_COMPONENTS) -> RunManifest:
    """Each seed shares one world and eval set across all swept variants.

    components: one synthesizer per seed; the four heads draw on unit
    subsets (unit training streams are independent, so a subset's units
    match a subset-only training run bitwise).
    losses: one synthesizer per loss variant per seed, all-unit head.
    """
    config.validate()
    if sweep not in SWEEPS:
        raise ExperimentError(f"unknown sweep '{sweep}' (want one of {SWEEPS})")
    out, manifest = _prepare_out(config, MODE_ABLATION, sweep)
    for seed in config.seeds:
        timings: dict = {}
        key = str(int(seed))
        try:
            world, train_set = _timed_stage(timings, "domain", lambda: _seed_world(config, seed))
            ev = build_eval_set(world, "test-unseen", seed_stream(seed, STREAM_EVAL_UNSEEN))
            transfer_cfg = replace(config.transfer, seed=int(seed))
            entry: dict = {}
            artifacts: dict = {}
            if sweep == SWEEP_COMPONENTS:
                seed_train = replace(loss_variant_config(config.train, config.loss_variant), seed=int(seed))
                model, seen_head, history = _timed_stage(
                    timings, "synthesizer", lambda: train_synthesizer(train_set, world, seed_train)
                )
                seed_dir = out / f"seed-{int(seed)}"
                seed_dir.mkdir(exist_ok=True)
                save_model(seed_dir / "model.bin", model, seen_head, seed_train)
                write_losses_csv(history, seed_dir / "losses.csv")
                artifacts = {
                    "model": f"seed-{int(seed)}/model.bin",
                    "losses": f"seed-{int(seed)}/losses.csv",
                }
                for variant in ABLATION_VARIANTS:
                    head = _timed_stage(
                        timings, f"transfer:{variant}",
                        lambda v=variant: build_variant_head(v, model, world, train_set, transfer_cfg),
                    )
                    entry[variant] = _timed_stage(
                        timings, f"evaluate:{variant}",
                        lambda h=head: evaluate_pipeline(h, ev).to_dict(),
                    )
                    if variant == VARIANT_FULL and isinstance(head, LinearHead):
                        entry[variant]["holdout_accuracy"] = _holdout_accuracy(
                            head, world, int(seed)
                        )
            else:
                for variant in LOSS_VARIANTS:
                    seed_train = replace(loss_variant_config(config.train, variant), seed=int(seed))
                    model, seen_head, history = _timed_stage(
                        timings, f"synthesizer:{variant}",
                        lambda c=seed_train: train_synthesizer(train_set, world, c),
                    )
                    var_dir = out / f"seed-{int(seed)}" / variant
                    var_dir.mkdir(parents=True, exist_ok=True)
                    save_model(var_dir / "model.bin", model, seen_head, seed_train)
                    write_losses_csv(history, var_dir / "losses.csv")
                    artifacts[variant] = {
                        "model": f"seed-{int(seed)}/{variant}/model.bin",
                        "losses": f"seed-{int(seed)}/{variant}/losses.csv",
                    }
                    head = _timed_stage(
                        timings, f"transfer:{variant}",
                        lambda m=model: build_variant_head(VARIANT_FULL, m, world, train_set, transfer_cfg),
                    )
                    entry[variant] = _timed_stage(
                        timings, f"evaluate:{variant}",
                        lambda h=head: evaluate_pipeline(h, ev).to_dict(),
                    )
            manifest.results[key] = entry
            manifest.timings_sec[key] = timings
            manifest.artifacts[key] = artifacts
            manifest.write(out)
        except _StageFailure as failure:
            _fail(out, manifest, seed, failure)
            raise RunFailure(str(failure)) from failure
    labels = ABLATION_VARIANTS if sweep == SWEEP_COMPONENTS else LOSS_VARIANTS
    median = _median_block(manifest.results, labels)
    if sweep == SWEEP_COMPONENTS:
        med = median["recall_at_100"]
        median["ordering_ok"] = bool(
            med[VARIANT_BASELINE]["0.5"] < med["cfu"]["0.5"]
            < med["cfu_ffu"]["0.5"] < med[VARIANT_FULL]["0.5"]
        )
        if all(
            VARIANT_FULL in r and "holdout_accuracy" in r[VARIANT_FULL]
            for r in manifest.results.values()
        ):
            median["holdout_accuracy"] = _median_over_seeds(
                manifest.results, lambda r: r[VARIANT_FULL]["holdout_accuracy"]
            )
    return _finish(out, manifest, config, median)


def run_gzsd(config: ExperimentConfig) -> RunManifest:
    """Concatenated seen+unseen head on a mixed eval set, plus the paired ZSD run."""
    config.validate()
    out, manifest = _prepare_out(config, MODE_GZSD, None)
    train_cfg = loss_variant_config(config.train, config.loss_variant)
    for seed in config.seeds:
        timings: dict = {}
        key = str(int(seed))
        try:
            world, train_set = _timed_stage(timings, "domain", lambda: _seed_world(config, seed))
            seed_train = replace(train_cfg, seed=int(seed))
            model, seen_head, history = _timed_stage(
                timings, "synthesizer", lambda: train_synthesizer(train_set, world, seed_train)
            )
            seed_dir = out / f"seed-{int(seed)}"
            seed_dir.mkdir(exist_ok=True)
            save_model(seed_dir / "model.bin", model, seen_head, seed_train)
            write_losses_csv(history, seed_dir / "losses.csv")
            transfer_cfg = replace(config.transfer, seed=int(seed))
            unseen_head = _timed_stage(
                timings, "transfer",
                lambda: build_variant_head(VARIANT_FULL, model, world, train_set, transfer_cfg),
            )

            def _eval():
                ev_seen = build_eval_set(world, "test-seen", seed_stream(seed, STREAM_EVAL_SEEN))
                ev_unseen = build_eval_set(world, "test-unseen", seed_stream(seed, STREAM_EVAL_UNSEEN))
                merged = merge_eval_sets(ev_seen, ev_unseen)
                gzsd_head = build_gzsd_head(seen_head, unseen_head)
                groups = {
                    "seen": {int(c) for c in world.seen_ids},
                    "unseen": {int(c) for c in world.unseen_ids},
                }
                gzsd = evaluate_pipeline(gzsd_head, merged, groups=groups).to_dict()
                zsd = evaluate_pipeline(unseen_head, ev_unseen).to_dict()
                return {"gzsd": gzsd, "zsd_unseen": zsd}

            manifest.results[key] = _timed_stage(timings, "evaluate", _eval)
            manifest.timings_sec[key] = timings
            manifest.artifacts[key] = {
                "model": f"seed-{int(seed)}/model.bin",
                "losses": f"seed-{int(seed)}/losses.csv",
            }
            manifest.write(out)
        except _StageFailure as failure:
            _fail(out, manifest, seed, failure)
            raise RunFailure(str(failure)) from failure
    median = _median_block(manifest.results, ["gzsd", "zsd_unseen"])
    median["columns"] = {  # the two-column summary: recall@100 at IoU 0.5 per group
        "Seen": _median_over_seeds(
            manifest.results, lambda r: r["gzsd"]["group_recall_at_100"]["seen"]["0.5"]
        ),
        "Unseen": _median_over_seeds(
            manifest.results, lambda r: r["gzsd"]["group_recall_at_100"]["unseen"]["0.5"]
        ),
    }
    return _finish(out, manifest, config, median)


# --- consolidated reporting over completed manifests ---


_REPORT_COLUMNS = ("recall@100@0.4", "recall@100@0.5", "recall@100@0.6", "map@0.5")


def _metric_row(entry: dict) -> dict:
    row = {
        f"recall@100@{thr}": value for thr, value in sorted(entry["recall_at_100"].items())
    }
    row["map@0.5"] = entry["map_50"]
    if "group_recall_at_100" in entry:
        for group, recs in sorted(entry["group_recall_at_100"].items()):
            row[f"{group}@0.5"] = recs["0.5"]
    if "holdout_accuracy" in entry:
        row["holdout_accuracy"] = entry["holdout_accuracy"]
    return row


def build_report(manifest_paths) -> dict:
    """Merge completed manifests into flat per-seed rows plus per-run medians."""
    rows: list[dict] = []
    medians: list[dict] = []
    for path in manifest_paths:
        man = load_manifest(path)
        run_id = man["run_id"]
        for seed_key in sorted(man["results"], key=int):
            for label, entry in sorted(man["results"][seed_key].items()):
                rows.append(
                    {"run_id": run_id, "mode": man["mode"], "seed": int(seed_key), "label": label}
                    | _metric_row(entry)
                )
        labels = sorted({r["label"] for r in rows if r["run_id"] == run_id})
        for label in labels:
            mine = [r for r in rows if r["run_id"] == run_id and r["label"] == label]
            med = {"run_id": run_id, "mode": man["mode"], "label": label, "seeds": len(mine)}
            for col in mine[0]:
                if col in ("run_id", "mode", "seed", "label"):
                    continue
                med[col] = float(np.median([r[col] for r in mine]))
            medians.append(med)
    return {"rows": rows, "medians": medians}


def _format_md_table(headers, rows) -> str:
    lines = ["| " + " | ".join(headers) + " |", "|" + "|".join(" --- " for _ in headers) + "|"]
    for row in rows:
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines)


def write_report(manifest_paths, out_dir) -> dict:
    """report.csv (per-seed rows), report.md (medians), series.csv (recall-vs-threshold)."""
    tables = build_report(manifest_paths)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    columns = ["run_id", "mode", "seed", "label"]
    extra = sorted({k for r in tables["rows"] for k in r} - set(columns))
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns + extra, restval="")
        writer.writeheader()
        for row in tables["rows"]:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})

    with open(out / "series.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run_id", "label", "seed", "iou_threshold", "recall_at_100"])
        for row in tables["rows"]:
            for col in _REPORT_COLUMNS[:3]:
                writer.writerow(
                    [row["run_id"], row["label"], row["seed"], col.rsplit("@", 1)[1], repr(row[col])]
                )

    sections = ["# Consolidated run report", ""]
    for run_id in dict.fromkeys(m["run_id"] for m in tables["medians"]):
        mine = [m for m in tables["medians"] if m["run_id"] == run_id]
        mode = mine[0]["mode"]
        sections.append(f"## {run_id} ({mode}, median over {mine[0]['seeds']} seeds)")
        sections.append("")
        if mode == MODE_GZSD:
            gz = next(m for m in mine if m["label"] == "gzsd")
            headers = ["Seen", "Unseen"]  # recall@100 at IoU 0.5 per group
            sections.append(_format_md_table(headers, [[f"{gz['seen@0.5']:.4f}", f"{gz['unseen@0.5']:.4f}"]]))
        else:
            headers = ["variant", *(_REPORT_COLUMNS)]
            body = [
                [m["label"], *(f"{m[c]:.4f}" for c in _REPORT_COLUMNS)]
                for m in mine
            ]
            sections.append(_format_md_table(headers, body))
        sections.append("")
    sections.append("Loss-curve series live in each run's per-seed losses.csv artifacts.")
    (out / "report.md").write_text("\n".join(sections) + "\n")
    return tables
