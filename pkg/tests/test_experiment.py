"""Experiment orchestration: config plumbing, artifacts, manifests, reports."""

import json
from dataclasses import replace

import numpy as np
import pytest

from zsdgen.domain import DomainConfig
from zsdgen.experiment import (
    LOSS_CLS,
    LOSS_CLS_EMB,
    LOSS_EMB,
    LOSS_VARIANTS,
    LOSS_WGAN_ONLY,
    SWEEP_LOSSES,
    ExperimentConfig,
    ExperimentError,
    RunFailure,
    apply_overrides,
    build_report,
    config_hash,
    load_config,
    load_head_json,
    load_manifest,
    loss_variant_config,
    run_ablation,
    run_full,
    run_gzsd,
    save_head_json,
    write_report,
)
from zsdgen.heads import LinearHead, NearestEmbeddingHead
from zsdgen.synthesizer import SynthesisError, TrainConfig
from zsdgen.transfer import ABLATION_VARIANTS, TransferConfig


def tiny_config(out_dir, **kwargs) -> ExperimentConfig:
    base = dict(
        domain=DomainConfig(num_gt=120, n_s=2, eval_images=6, eval_clutter_per_image=60),
        train=TrainConfig(epochs=2, batch_size=16, hidden=32, head_epochs=3),
        transfer=TransferConfig(gt_like=40, fg=40, bg=40, epochs=5),
        seeds=(0,),
        out_dir=str(out_dir),
    )
    return ExperimentConfig(**{**base, **kwargs})


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("full")
    config = tiny_config(out)
    manifest = run_full(config)
    return config, manifest, out


@pytest.fixture(scope="module")
def gzsd_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("gzsd")
    config = tiny_config(out, mode="gzsd")
    manifest = run_gzsd(config)
    return config, manifest, out


# --- config plumbing ---


@pytest.mark.parametrize(
    "kwargs",
    [
        {"mode": "sideways"},
        {"variant": "cfu_ffu_bfu_xxl"},
        {"loss_variant": "all"},
        {"seeds": ()},
        {"seeds": (-1,)},
    ],
)
def test_config_rejects_bad_fields(tmp_path, kwargs):
    with pytest.raises(ExperimentError):
        tiny_config(tmp_path, **kwargs).validate()


def test_config_dict_round_trip(tmp_path):
    config = tiny_config(tmp_path, seeds=(3, 1), mode="ablation")
    assert ExperimentConfig.from_dict(config.to_dict()) == config


def test_config_rejects_unknown_keys():
    with pytest.raises(ExperimentError, match="unknown config keys"):
        ExperimentConfig.from_dict({"modes": "full"})
    with pytest.raises(ExperimentError, match="domain.bogus"):
        ExperimentConfig.from_dict({"domain": {"bogus": 1}})
    with pytest.raises(ExperimentError, match="section"):
        ExperimentConfig.from_dict({"train": 7})


def test_load_config_errors(tmp_path):
    with pytest.raises(ExperimentError, match="not found"):
        load_config(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ExperimentError, match="valid JSON"):
        load_config(bad)


def test_apply_overrides(tmp_path):
    config = tiny_config(tmp_path)
    out = apply_overrides(config, ["train.n_critic=3", "seeds=[1,2]", "mode=gzsd"])
    assert out.train.n_critic == 3
    assert out.seeds == (1, 2)
    assert out.mode == "gzsd"
    assert out.train.epochs == config.train.epochs  # untouched fields survive
    with pytest.raises(ExperimentError, match="unknown config path"):
        apply_overrides(config, ["nosuch.key=1"])
    with pytest.raises(ExperimentError, match="path=value"):
        apply_overrides(config, ["train.n_critic"])


def test_config_hash_ignores_out_dir(tmp_path):
    a = tiny_config(tmp_path / "a")
    b = tiny_config(tmp_path / "b")
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(replace(a, train=replace(a.train, epochs=3)))


def test_loss_variant_masks_weights():
    train = TrainConfig()
    only = loss_variant_config(train, LOSS_WGAN_ONLY)
    assert (only.beta1, only.beta2, only.beta3) == (0.0, 0.0, 0.0)
    assert (only.gamma1, only.gamma2, only.gamma3) == (0.0, 0.0, 0.0)
    cls = loss_variant_config(train, LOSS_CLS)
    assert cls.beta1 == train.beta1 and cls.gamma1 == 0.0
    emb = loss_variant_config(train, LOSS_EMB)
    assert emb.beta1 == 0.0 and emb.gamma1 == train.gamma1
    assert loss_variant_config(train, LOSS_CLS_EMB) == train
    with pytest.raises(ExperimentError):
        loss_variant_config(train, "wgan")


# --- head JSON round trip ---


def test_linear_head_json_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    head = LinearHead(rng.normal(size=(6, 3)), rng.normal(size=(1, 3)), [2, 9], True)
    save_head_json(tmp_path / "head.json", head)
    back = load_head_json(tmp_path / "head.json")
    assert isinstance(back, LinearHead)
    assert np.array_equal(back.weight, head.weight)
    assert np.array_equal(back.bias, head.bias)
    assert back.class_ids == head.class_ids
    assert back.has_background


def test_nearest_head_json_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    head = NearestEmbeddingHead(
        projection=rng.normal(size=(6, 4)),
        bias=rng.normal(size=(1, 4)),
        embeddings=rng.normal(size=(2, 4)),
        class_ids=[3, 5],
    )
    save_head_json(tmp_path / "head.json", head)
    back = load_head_json(tmp_path / "head.json")
    assert isinstance(back, NearestEmbeddingHead)
    assert np.array_equal(back.projection, head.projection)
    assert np.array_equal(back.embeddings, head.embeddings)


def test_head_json_errors(tmp_path):
    with pytest.raises(ExperimentError, match="not found"):
        load_head_json(tmp_path / "nope.json")
    bad = tmp_path / "odd.json"
    bad.write_text(json.dumps({"kind": "quadratic"}))
    with pytest.raises(ExperimentError, match="unknown head kind"):
        load_head_json(bad)


# --- runs and artifacts ---


def test_run_full_artifacts(full_run):
    config, manifest, out = full_run
    assert manifest.status == "complete"
    for name in ("config.json", "manifest.json", "metrics.json"):
        assert (out / name).is_file()
    assert (out / "seed-0" / "model.bin").is_file()
    assert (out / "seed-0" / "losses.csv").is_file()
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["schema_version"] == 1
    entry = metrics["per_seed"]["0"][config.variant]
    assert set(entry["recall_at_100"]) == {"0.4", "0.5", "0.6"}
    assert 0.0 <= entry["map_50"] <= 1.0
    assert 0.0 <= entry["holdout_accuracy"] <= 1.0
    assert "holdout_accuracy" in metrics["median"]


def test_run_full_metrics_deterministic(tmp_path, full_run):
    config, _, out = full_run
    rerun = run_full(replace(config, out_dir=str(tmp_path / "again")))
    assert rerun.status == "complete"
    assert (tmp_path / "again" / "metrics.json").read_bytes() == (out / "metrics.json").read_bytes()


def test_run_full_timings_and_echo(full_run):
    config, manifest, out = full_run
    stages = set(manifest.timings_sec["0"])
    assert stages == {"domain", "synthesizer", "transfer", "evaluate"}
    echo = json.loads((out / "config.json").read_text())
    assert ExperimentConfig.from_dict(echo) == config  # tuples arrive as JSON lists


def test_stage_failure_lands_in_manifest(tmp_path, monkeypatch):
    import zsdgen.experiment as exp

    def boom(*args, **kwargs):
        raise SynthesisError("boom")

    monkeypatch.setattr(exp, "train_synthesizer", boom)
    config = tiny_config(tmp_path)
    with pytest.raises(RunFailure, match="synthesizer"):
        run_full(config)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["status"] == "failed"
    assert manifest["error"]["stage"] == "synthesizer"
    assert manifest["error"]["message"] == "boom"
    assert manifest["error"]["seed"] == 0


def test_run_ablation_components_shape(tmp_path):
    config = tiny_config(tmp_path, mode="ablation", train=TrainConfig(epochs=1, batch_size=16, hidden=32, head_epochs=3))
    manifest = run_ablation(config)
    assert set(manifest.results["0"]) == set(ABLATION_VARIANTS)
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert isinstance(metrics["median"]["ordering_ok"], bool)
    for variant in ABLATION_VARIANTS:
        assert set(metrics["per_seed"]["0"][variant]["recall_at_100"]) == {"0.4", "0.5", "0.6"}


def test_run_ablation_loss_sweep_shape(tmp_path):
    config = tiny_config(tmp_path, mode="ablation", train=TrainConfig(epochs=1, batch_size=16, hidden=32, head_epochs=3))
    manifest = run_ablation(config, sweep=SWEEP_LOSSES)
    assert set(manifest.results["0"]) == set(LOSS_VARIANTS)
    for variant in LOSS_VARIANTS:
        assert (tmp_path / "seed-0" / variant / "model.bin").is_file()
    with pytest.raises(ExperimentError, match="unknown sweep"):
        run_ablation(config, sweep="everything")


def test_run_gzsd_columns(gzsd_run):
    _, manifest, out = gzsd_run
    metrics = json.loads((out / "metrics.json").read_text())
    assert set(metrics["median"]["columns"]) == {"Seen", "Unseen"}
    entry = metrics["per_seed"]["0"]
    assert set(entry) == {"gzsd", "zsd_unseen"}
    assert set(entry["gzsd"]["group_recall_at_100"]) == {"seen", "unseen"}


# --- consolidated report ---


def test_report_merges_runs_with_run_id(tmp_path, full_run, gzsd_run):
    _, full_manifest, full_out = full_run
    _, gzsd_manifest, gzsd_out = gzsd_run
    tables = write_report([full_out / "manifest.json", gzsd_out / "manifest.json"], tmp_path)
    run_ids = {r["run_id"] for r in tables["rows"]}
    assert run_ids == {full_manifest.run_id, gzsd_manifest.run_id}
    assert (tmp_path / "report.csv").is_file()
    assert (tmp_path / "series.csv").is_file()
    md = (tmp_path / "report.md").read_text()
    assert "| Seen | Unseen |" in md


def test_report_medians_match_recompute(tmp_path, full_run):
    config, manifest, out = full_run
    tables = build_report([out / "manifest.json"])
    metrics = json.loads((out / "metrics.json").read_text())
    for med in tables["medians"]:
        label = med["label"]
        raw = [
            metrics["per_seed"][str(s)][label]["recall_at_100"]["0.5"]
            for s in metrics["seeds"]
        ]
        assert med["recall@100@0.5"] == pytest.approx(float(np.median(raw)), abs=0)


def test_report_rejects_missing_and_mismatched(tmp_path):
    with pytest.raises(ExperimentError, match="nope.json"):
        build_report([tmp_path / "nope.json"])
    odd = tmp_path / "manifest.json"
    odd.write_text(json.dumps({"schema_version": 7}))
    with pytest.raises(ExperimentError, match=r"schema 7 unsupported \(want 1\)"):
        load_manifest(odd)
