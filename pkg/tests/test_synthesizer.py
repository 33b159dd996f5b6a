"""Synthesizer units: loss analytics, gradient checks, training invariants, checkpoint."""

import csv
from dataclasses import replace

import numpy as np
import pytest

from oracles import finite_difference_gradients, max_relative_error, nll_log_sum_exp
from zsdgen.autodiff import AdamState, Tape, TrainingDiverged
from zsdgen.domain import DomainConfig, build_training_set, make_world
from zsdgen.heads import LinearHead
from zsdgen.synthesizer import (
    ALL_UNITS,
    FeatureSynthesizer,
    SynthesisError,
    TrainConfig,
    UnitParams,
    _classification_nodes,
    _critic_nodes,
    _discriminator_tape,
    _embedding_nodes,
    _generator_tape,
    _mean,
    classification_loss,
    embedding_loss,
    embedding_loss_with_counts,
    generator_forward,
    init_unit,
    load_model,
    save_model,
    synthesize,
    train_synthesizer,
    wgan_loss,
    write_losses_csv,
)

D_V, D_E, D_Z = 6, 4, 3


def _linear_disc(w_feat, w_emb=None, bias=0.0):
    w = np.zeros((D_V + D_E, 1))
    w[:D_V, 0] = w_feat
    if w_emb is not None:
        w[D_V:, 0] = w_emb
    return {"w0": w, "b0": np.array([[bias]])}


def _unit_with_disc(disc):
    gen = {"w0": np.zeros((1, 1))}
    return UnitParams("class", gen, disc, AdamState.for_params(gen), AdamState.for_params(disc))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# --- config validation ---


@pytest.mark.parametrize(
    "kwargs",
    [
        {"alpha_c": -1.0},
        {"gamma2": -0.5},
        {"n_critic": 0},
        {"batch_size": 1},
        {"epochs": 0},
        {"learning_rate": 0.0},
        {"bfu_cls_target": "nearest"},
    ],
)
def test_train_config_rejects_bad_values(kwargs):
    with pytest.raises(SynthesisError):
        TrainConfig(**kwargs).validate()


# --- adversarial loss analytics ---


def test_linear_critic_with_unit_feature_weight_gives_zero(rng):
    unit = _unit_with_disc(_linear_disc(np.array([1.0, 0, 0, 0, 0, 0])))
    real = rng.normal(size=(16, D_V))
    cond = rng.normal(size=(16, D_E))
    critic, gen, penalty = wgan_loss(unit, real, real.copy(), cond, 10.0, rng)
    assert abs(critic) <= 1e-9
    assert abs(penalty) <= 1e-9


@pytest.mark.parametrize("norm,alpha", [(2.0, 10.0), (0.5, 10.0), (3.0, 4.0)])
def test_linear_critic_penalty_is_alpha_times_squared_norm_gap(rng, norm, alpha):
    w = np.zeros(D_V)
    w[0] = norm
    unit = _unit_with_disc(_linear_disc(w, w_emb=rng.normal(size=D_E)))
    real = rng.normal(size=(12, D_V))
    cond = rng.normal(size=(12, D_E))
    critic, _, penalty = wgan_loss(unit, real, real.copy(), cond, alpha, rng)
    assert abs(penalty - alpha * (norm - 1.0) ** 2) <= 1e-9
    assert abs(critic - penalty) <= 1e-9  # score terms cancel on identical batches


def test_penalty_nonnegative_on_random_discriminators(rng):
    for _ in range(100):
        unit = init_unit("class", D_Z + D_E, D_V, D_E, 8, rng)
        real = rng.normal(size=(6, D_V))
        fake = rng.normal(size=(6, D_V))
        cond = rng.normal(size=(6, D_E))
        _, _, penalty = wgan_loss(unit, real, fake, cond, 10.0, rng)
        assert penalty >= 0.0


def test_wgan_loss_rejects_mismatched_rows(rng):
    unit = _unit_with_disc(_linear_disc(np.ones(D_V)))
    with pytest.raises(SynthesisError, match="row counts"):
        wgan_loss(unit, rng.normal(size=(4, D_V)), rng.normal(size=(5, D_V)),
                  rng.normal(size=(4, D_E)), 10.0, rng)


def test_wgan_loss_reports_unit_on_divergence(rng):
    disc = _linear_disc(np.ones(D_V), bias=np.nan)
    unit = _unit_with_disc(disc)
    with pytest.raises(TrainingDiverged, match="class"):
        wgan_loss(unit, rng.normal(size=(4, D_V)), rng.normal(size=(4, D_V)),
                  rng.normal(size=(4, D_E)), 10.0, rng)


# --- classification loss ---


def _head(weight, bias, n_classes):
    return LinearHead(weight, bias, list(range(n_classes)), True)


def test_uniform_logits_nll_is_log_class_count(rng):
    head = _head(np.zeros((D_V, 13)), np.zeros((1, 13)), 12)
    fake = rng.normal(size=(20, D_V))
    assert abs(classification_loss(head, fake, 5) - np.log(13.0)) <= 1e-9


def test_confident_head_nll_approaches_zero():
    weight = np.zeros((D_V, 3))
    bias = np.zeros((1, 3))
    bias[0, 1] = 50.0  # overwhelming logit on the target column
    head = _head(weight, bias, 2)
    assert classification_loss(head, np.ones((4, D_V)), 1) <= 1e-9


def test_classification_matches_log_sum_exp_oracle(rng):
    weight = rng.normal(size=(D_V, 3))
    bias = rng.normal(size=(1, 3))
    head = _head(weight, bias, 2)
    fake = rng.normal(size=(9, D_V))
    target = 2
    logits = fake @ weight + bias
    oracle = nll_log_sum_exp(logits, np.full(9, target))
    assert abs(classification_loss(head, fake, target) - oracle) <= 1e-9


def test_classification_rejects_out_of_range_target(rng):
    head = _head(np.zeros((D_V, 3)), np.zeros((1, 3)), 2)
    with pytest.raises(SynthesisError, match="columns"):
        classification_loss(head, rng.normal(size=(2, D_V)), 3)


# --- embedding loss ---


def test_identical_matched_pair_contributes_zero():
    v = np.array([[3.0, 4.0]])
    assert abs(embedding_loss(v, v.copy(), np.array([0]))) <= 1e-9


def test_orthogonal_matched_pair_contributes_one():
    real = np.array([[1.0, 0.0]])
    fake = np.array([[0.0, 2.0]])
    assert abs(embedding_loss(real, fake, np.array([0])) - 1.0) <= 1e-9


def test_orthogonal_unmatched_pair_contributes_zero():
    # rotation pairs (0,1) and (1,0) are cross-class and orthogonal; aligned
    # pairs are identical, so the whole loss vanishes
    real = np.array([[1.0, 0.0], [0.0, 1.0]])
    loss = embedding_loss(real, real.copy(), np.array([0, 1]))
    assert abs(loss) <= 1e-9


def test_negative_cosine_unmatched_pair_clamps_to_zero():
    real = np.array([[1.0, 0.0], [-1.0, 0.0]])
    loss = embedding_loss(real, real.copy(), np.array([0, 1]))
    assert abs(loss) <= 1e-9  # cross cosines are -1, clamped


def test_zero_norm_pairs_are_skipped_and_counted():
    real = np.array([[1.0, 0.0], [0.0, 0.0]])
    fake = np.array([[1.0, 0.0], [1.0, 1.0]])
    # pairs touching the zero real row are skipped: aligned (1,1), rotated (1,0)
    loss, skipped = embedding_loss_with_counts(real, fake, np.array([0, 1]))
    assert skipped == 2
    expected = 0.0 + np.mean([np.sqrt(0.5)])  # aligned (0,0) plus rotated (0,1)
    assert abs(loss - expected) <= 1e-9


def test_all_pairs_skipped_raises():
    real = np.zeros((3, 2))
    fake = np.ones((3, 2))
    with pytest.raises(SynthesisError, match="skipped"):
        embedding_loss(real, fake, np.array([0, 1, 2]))


# --- assembled-loss gradient checks against finite differences ---


def test_critic_loss_gradients_match_finite_differences(rng):
    real = rng.normal(size=(5, D_V))
    fake = rng.normal(size=(5, D_V))
    cond = rng.normal(size=(5, D_E))
    eta = rng.uniform(size=(5, 1))
    params = {
        "w0": rng.normal(scale=0.5, size=(D_V + D_E, 7)),
        "b0": rng.normal(scale=0.1, size=(1, 7)),
        "w1": rng.normal(scale=0.5, size=(7, 1)),
        "b1": rng.normal(scale=0.1, size=(1, 1)),
    }

    def loss_fn(p):
        t = Tape()
        pids = {k: t.parameter(v) for k, v in p.items()}
        critic, _, _ = _critic_nodes(t, pids, 2, real, fake, cond, eta, 10.0)
        return t, critic, pids

    def value_fn(p):
        t, node, _ = loss_fn(p)
        return float(t.value(node)[0, 0])

    t, node, pids = loss_fn(params)
    t.backward(node)
    analytic = {k: t.adjoint(pid) for k, pid in pids.items()}
    numeric = finite_difference_gradients(value_fn, params)
    assert max_relative_error(analytic, numeric) <= 1e-4


def test_generator_total_loss_gradients_match_finite_differences(rng):
    # generator + critic score + classification + embedding, all through the tape
    z_cond = rng.normal(size=(6, D_Z + D_V))
    real = np.abs(rng.normal(size=(6, D_V)))
    labels = np.array([0, 1, 0, 1, 2, 2])
    head_w = rng.normal(size=(D_V, 4))
    head_b = rng.normal(size=(1, 4))
    head = LinearHead(head_w, head_b, [0, 1, 2], True)
    disc = {
        "w0": rng.normal(scale=0.5, size=(D_V + D_E, 5)),
        "b0": np.zeros((1, 5)),
        "w1": rng.normal(scale=0.5, size=(5, 1)),
        "b1": np.zeros((1, 1)),
    }
    emb = rng.normal(size=(6, D_E))
    params = {
        "w0": rng.normal(scale=0.4, size=(D_Z + D_V, 8)),
        "b0": rng.normal(scale=0.1, size=(1, 8)),
        "w1": rng.normal(scale=0.4, size=(8, 8)),
        "b1": rng.normal(scale=0.1, size=(1, 8)),
        "w2": rng.normal(scale=0.4, size=(8, D_V)),
        "b2": rng.normal(scale=0.3, size=(1, D_V)),
    }
    one_hot = np.zeros((6, 4))
    one_hot[np.arange(6), labels] = 1.0

    def build(p):
        t = Tape()
        pids = {k: t.parameter(v) for k, v in p.items()}
        fake = _generator_tape(t, pids, t.constant(z_cond), 3)
        d_fake = _discriminator_tape(
            t, {k: t.constant(v) for k, v in disc.items()}, fake, t.constant(emb), 2
        )
        total = t.scale(_mean(t, d_fake), -1.0)
        total = t.add(total, t.scale(_classification_nodes(t, head, fake, one_hot), 0.01))
        emb_node, _ = _embedding_nodes(t, real, fake, labels)
        assert emb_node is not None
        total = t.add(total, t.scale(emb_node, 0.1))
        return t, total, pids

    t, node, pids = build(params)
    t.backward(node)
    analytic = {k: t.adjoint(pid) for k, pid in pids.items()}
    numeric = finite_difference_gradients(lambda p: float(build(p)[0].value(build(p)[1])[0, 0]), params)
    assert max_relative_error(analytic, numeric) <= 1e-4


# --- structural invariants ---


def test_unit_input_widths():
    small = DomainConfig(seed=0, num_gt=32, n_s=1)
    world = make_world(small)
    ds = build_training_set(world, np.random.default_rng(1))
    tc = TrainConfig(epochs=1, batch_size=16, hidden=8, head_epochs=1, d_z=5)
    model, head, _ = train_synthesizer(ds, world, tc)
    assert model.class_unit.generator["w0"].shape[0] == 5 + small.d_e
    assert model.foreground_unit.generator["w0"].shape[0] == 5 + small.d_v
    assert model.background_unit.generator["w0"].shape[0] == 5 + small.d_v
    for unit in (model.class_unit, model.foreground_unit, model.background_unit):
        assert unit.discriminator["w0"].shape[0] == small.d_v + small.d_e
        assert unit.generator[f"w{unit.gen_layers - 1}"].shape[1] == small.d_v


@pytest.fixture(scope="module")
def tiny_setup():
    cfg = DomainConfig(seed=0, num_gt=48, n_s=2)
    world = make_world(cfg)
    ds = build_training_set(world, np.random.default_rng(np.random.SeedSequence((0, 100))))
    tc = TrainConfig(epochs=1, batch_size=16, hidden=16, head_epochs=2, seed=0)
    return world, ds, tc


def test_smoke_training_emits_three_loss_streams():
    cfg = DomainConfig(seed=1, num_gt=10, n_s=1)
    world = make_world(cfg)
    ds = build_training_set(world, np.random.default_rng(2))
    tc = TrainConfig(epochs=1, batch_size=5, hidden=8, head_epochs=1, seed=1)
    _, _, hist = train_synthesizer(ds, world, tc)
    assert {r.unit for r in hist} == set(ALL_UNITS)
    assert all(np.isfinite(r.critic_loss) and np.isfinite(r.gen_loss) for r in hist)
    assert all(r.penalty >= 0.0 for r in hist)


def test_training_is_bitwise_reproducible(tiny_setup):
    world, ds, tc = tiny_setup
    model_a, head_a, hist_a = train_synthesizer(ds, world, tc)
    model_b, head_b, hist_b = train_synthesizer(ds, world, tc)
    for name in ALL_UNITS:
        ua, ub = model_a.unit(name), model_b.unit(name)
        assert all(np.array_equal(ua.generator[k], ub.generator[k]) for k in ua.generator)
        assert all(np.array_equal(ua.discriminator[k], ub.discriminator[k]) for k in ua.discriminator)
    assert np.array_equal(head_a.weight, head_b.weight)
    assert hist_a == hist_b


def test_unit_trajectories_independent_of_training_set_selection(tiny_setup):
    # the class unit's parameters after training alone equal its parameters
    # after training all three units: each unit owns its random stream
    world, ds, tc = tiny_setup
    full, _, _ = train_synthesizer(ds, world, tc)
    solo, _, _ = train_synthesizer(ds, world, tc, units=("class",))
    pair, _, _ = train_synthesizer(ds, world, tc, units=("class", "foreground"))
    for k in full.class_unit.generator:
        assert np.array_equal(full.class_unit.generator[k], solo.class_unit.generator[k])
        assert np.array_equal(full.class_unit.generator[k], pair.class_unit.generator[k])
    for k in full.foreground_unit.generator:
        assert np.array_equal(full.foreground_unit.generator[k], pair.foreground_unit.generator[k])


def test_untrained_units_keep_their_initialization(tiny_setup):
    world, ds, tc = tiny_setup
    solo, _, hist = train_synthesizer(ds, world, tc, units=("class",))
    assert {r.unit for r in hist} == {"class"}
    # background unit was initialized but never stepped
    assert solo.background_unit.gen_opt.t == 0
    assert solo.background_unit.disc_opt.t == 0


def test_seen_head_is_frozen_during_training(tiny_setup):
    world, ds, tc = tiny_setup
    _, head, _ = train_synthesizer(ds, world, tc, units=("class",))
    w_before = head.weight.copy()
    train_synthesizer(ds, world, tc, seen_head=head)
    assert np.array_equal(head.weight, w_before)


def test_end_to_end_flag_updates_class_generator_from_other_units(tiny_setup):
    world, ds, tc = tiny_setup
    detached, _, _ = train_synthesizer(ds, world, tc, units=("class", "foreground"))
    joint, _, _ = train_synthesizer(
        ds, world, replace(tc, end_to_end=True), units=("class", "foreground")
    )
    same = all(
        np.array_equal(detached.class_unit.generator[k], joint.class_unit.generator[k])
        for k in detached.class_unit.generator
    )
    assert not same


def test_bfu_class_target_mode_changes_training(tiny_setup):
    world, ds, tc = tiny_setup
    default, _, _ = train_synthesizer(ds, world, tc, units=("background",))
    relabeled, _, _ = train_synthesizer(
        ds, world, replace(tc, bfu_cls_target="class"), units=("background",)
    )
    same = all(
        np.array_equal(default.background_unit.generator[k], relabeled.background_unit.generator[k])
        for k in default.background_unit.generator
    )
    assert not same


def test_training_rejects_wrong_split(tiny_setup):
    from zsdgen.domain import Dataset

    world, ds, tc = tiny_setup
    with pytest.raises(SynthesisError, match="train-seen"):
        train_synthesizer(Dataset("test-seen", ds.records), world, tc)


def test_training_rejects_unknown_unit(tiny_setup):
    world, ds, tc = tiny_setup
    with pytest.raises(SynthesisError, match="unknown units"):
        train_synthesizer(ds, world, tc, units=("class", "contextual"))


# --- synthesis ---


@pytest.fixture(scope="module")
def tiny_model(tiny_setup):
    world, ds, tc = tiny_setup
    model, head, hist = train_synthesizer(ds, world, tc)
    return world, model, head, hist, tc


def test_synthesize_shapes_and_nonnegativity(tiny_model):
    world, model, _, _, _ = tiny_model
    rng = np.random.default_rng(4)
    uid = world.unseen_ids[0]
    b_gt, b_fg, b_bg = synthesize(
        model, world.embedding(uid), uid, {"gt_like": 100, "fg": 100, "bg": 100}, rng
    )
    for batch, kind in ((b_gt, "gt"), (b_fg, "fg"), (b_bg, "bg")):
        assert batch.kind == kind and batch.class_id == uid
        assert batch.features.shape == (100, world.config.d_v)
        assert np.all(batch.features >= 0.0)


def test_synthesize_zero_counts_give_empty_batches(tiny_model):
    world, model, _, _, _ = tiny_model
    b_gt, b_fg, b_bg = synthesize(
        model, world.embedding(12), 12, {"gt_like": 0, "fg": 0, "bg": 0},
        np.random.default_rng(0),
    )
    assert b_gt.features.shape == (0, world.config.d_v)
    assert b_fg.features.shape == (0, world.config.d_v)
    assert b_bg.features.shape == (0, world.config.d_v)


def test_synthesize_rejects_negative_counts(tiny_model):
    world, model, _, _, _ = tiny_model
    with pytest.raises(SynthesisError, match="non-negative"):
        synthesize(model, world.embedding(12), 12, {"gt_like": -1, "fg": 0, "bg": 0},
                   np.random.default_rng(0))


def test_generator_forward_matches_tape_forward(rng):
    unit = init_unit("class", D_Z + D_E, D_V, D_E, 8, rng)
    x = rng.normal(size=(7, D_Z + D_E))
    numeric = generator_forward(unit.generator, x)
    t = Tape()
    pids = {k: t.parameter(v) for k, v in unit.generator.items()}
    node = _generator_tape(t, pids, t.constant(x), 3)
    assert np.array_equal(numeric, t.value(node))


# --- checkpoint and loss history ---


def test_checkpoint_round_trip_is_bitwise(tiny_model, tmp_path):
    world, model, head, _, tc = tiny_model
    path = tmp_path / "model.bin"
    save_model(path, model, head, tc)
    loaded, loaded_head, echo = load_model(path)
    for name in ALL_UNITS:
        a, b = model.unit(name), loaded.unit(name)
        assert all(np.array_equal(a.generator[k], b.generator[k]) for k in a.generator)
        assert all(np.array_equal(a.discriminator[k], b.discriminator[k]) for k in a.discriminator)
        assert a.gen_opt.t == b.gen_opt.t
        assert all(np.array_equal(a.gen_opt.m[k], b.gen_opt.m[k]) for k in a.gen_opt.m)
    assert np.array_equal(head.weight, loaded_head.weight)
    assert loaded_head.class_ids == head.class_ids and loaded_head.has_background
    assert echo["epochs"] == tc.epochs and echo["seed"] == tc.seed
    assert (loaded.d_z, loaded.d_v, loaded.d_e) == (model.d_z, model.d_v, model.d_e)


def test_checkpoint_rejects_unknown_format(tiny_model, tmp_path):
    world, model, head, _, tc = tiny_model
    path = tmp_path / "model.bin"
    save_model(path, model, head, tc)
    data = dict(np.load(path, allow_pickle=False))
    data["format_version"] = np.array([99])
    with open(path, "wb") as fh:
        np.savez(fh, **data)
    with pytest.raises(SynthesisError, match="format"):
        load_model(path)


def test_losses_csv_has_fixed_columns(tiny_model, tmp_path):
    _, _, _, hist, _ = tiny_model
    path = tmp_path / "losses.csv"
    write_losses_csv(hist, path)
    with open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    assert header == ["step", "unit", "critic_loss", "gen_loss", "cls_loss", "emb_loss"]
    assert len(rows) == len(hist)
    by_unit = {r.unit for r in hist}
    assert {row[1] for row in rows} == by_unit
    assert float(rows[0][2]) == hist[0].critic_loss


def test_losses_csv_blank_when_aux_losses_disabled(tiny_setup, tmp_path):
    world, ds, tc = tiny_setup
    pure = replace(tc, beta1=0.0, beta2=0.0, beta3=0.0, gamma1=0.0, gamma2=0.0, gamma3=0.0)
    _, _, hist = train_synthesizer(ds, world, pure)  # degenerate pure-adversarial run
    assert all(r.cls_loss is None and r.emb_loss is None for r in hist)
    path = tmp_path / "losses.csv"
    write_losses_csv(hist, path)
    with open(path) as fh:
        rows = list(csv.reader(fh))[1:]
    assert all(row[4] == "" and row[5] == "" for row in rows)
