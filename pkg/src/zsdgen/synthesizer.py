"""Three-unit conditional feature synthesizer with a gradient-penalized critic.

The class unit maps (noise, class embedding) to a GT-quality feature. The
foreground and background units map (noise, class-unit output) to partially
overlapping and near-miss features respectively — they never see the
embedding directly, only the synthesized class feature — while all three
critics score (feature, embedding) pairs. Two auxiliary terms shape the
generators: a softmax NLL under a frozen head pretrained on real seen-class
features, and a cosine alignment loss pairing real and generated rows.

Each unit draws from its own seeded random stream and updates only its own
parameters, so a unit's training trajectory does not depend on which other
units are being trained — ablation variants can share one training run.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

from zsdgen.autodiff import AdamState, Tape, TrainingDiverged, adam_step
from zsdgen.domain import KIND_BG, KIND_FG, KIND_GT, Dataset, SemanticEmbedding, World
from zsdgen.heads import LinearHead, pretrain_seen_head

UNIT_CLASS = "class"
UNIT_FOREGROUND = "foreground"
UNIT_BACKGROUND = "background"
ALL_UNITS = (UNIT_CLASS, UNIT_FOREGROUND, UNIT_BACKGROUND)

# seeded sub-stream ids; each unit owns one so trajectories stay independent
_STREAM = {UNIT_CLASS: 1, UNIT_FOREGROUND: 2, UNIT_BACKGROUND: 3, "data": 4, "head": 5}

MODEL_FORMAT_VERSION = 1


class SynthesisError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Synthesis-training knobs; defaults are the desk-scale setting."""

    alpha_c: float = 10.0  # gradient-penalty coefficients, per unit
    alpha_f: float = 10.0
    alpha_b: float = 10.0
    beta1: float = 0.01  # classification-loss weights (class/foreground/background unit)
    beta2: float = 0.01
    beta3: float = 0.01
    gamma1: float = 0.1  # embedding-loss weights, same order
    gamma2: float = 0.1
    gamma3: float = 0.1
    learning_rate: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.9
    n_critic: int = 5
    batch_size: int = 64
    epochs: int = 20
    d_z: int = 16
    hidden: int = 256
    seed: int = 0
    end_to_end: bool = False  # let FG/BG generator objectives update the class generator
    bfu_cls_target: str = "background"  # or "class"
    head_lr: float = 1e-2
    head_epochs: int = 30
    head_batch: int = 512

    def validate(self) -> None:
        weights = (
            self.alpha_c, self.alpha_f, self.alpha_b,
            self.beta1, self.beta2, self.beta3,
            self.gamma1, self.gamma2, self.gamma3,
        )
        if any(w < 0 for w in weights):
            raise SynthesisError("loss weights must be non-negative")
        if self.n_critic < 1:
            raise SynthesisError("n_critic must be at least 1")
        if self.batch_size < 2:
            raise SynthesisError("batch_size must be at least 2 (pairing needs two rows)")
        if min(self.d_z, self.hidden, self.epochs) < 1:
            raise SynthesisError("d_z, hidden and epochs must be positive")
        if self.learning_rate <= 0 or self.head_lr <= 0:
            raise SynthesisError("learning rates must be positive")
        if self.bfu_cls_target not in ("background", "class"):
            raise SynthesisError(f"unknown bfu_cls_target '{self.bfu_cls_target}'")

    def unit_weights(self, unit: str) -> tuple[float, float, float]:
        """(penalty alpha, classification beta, embedding gamma) for one unit."""
        return {
            UNIT_CLASS: (self.alpha_c, self.beta1, self.gamma1),
            UNIT_FOREGROUND: (self.alpha_f, self.beta2, self.gamma2),
            UNIT_BACKGROUND: (self.alpha_b, self.beta3, self.gamma3),
        }[unit]


@dataclass
class UnitParams:
    """One generator/critic pair with its optimizer state."""

    name: str
    generator: dict[str, np.ndarray]
    discriminator: dict[str, np.ndarray]
    gen_opt: AdamState
    disc_opt: AdamState

    @property
    def gen_layers(self) -> int:
        return sum(1 for k in self.generator if k.startswith("w"))

    @property
    def disc_layers(self) -> int:
        return sum(1 for k in self.discriminator if k.startswith("w"))


@dataclass
class FeatureSynthesizer:
    class_unit: UnitParams
    foreground_unit: UnitParams
    background_unit: UnitParams
    d_z: int
    d_v: int
    d_e: int

    def unit(self, name: str) -> UnitParams:
        try:
            return {
                UNIT_CLASS: self.class_unit,
                UNIT_FOREGROUND: self.foreground_unit,
                UNIT_BACKGROUND: self.background_unit,
            }[name]
        except KeyError:
            raise SynthesisError(f"unknown unit '{name}'") from None


@dataclass(frozen=True)
class SynthesizedBatch:
    kind: str  # gt | fg | bg
    class_id: int
    features: np.ndarray  # (n, d_v), elementwise >= 0


@dataclass(frozen=True)
class LossRecord:
    step: int
    unit: str
    critic_loss: float
    gen_loss: float
    cls_loss: float | None
    emb_loss: float | None
    penalty: float
    w_estimate: float  # E[D(real)] - E[D(fake)] at the last critic step


# --- parameter init and forward passes ---


def _init_affine_stack(rng: np.random.Generator, sizes) -> dict[str, np.ndarray]:
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"w{i}"] = rng.normal(scale=np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        params[f"b{i}"] = np.zeros((1, fan_out))
    return params


def init_unit(name: str, d_in_gen: int, d_v: int, d_e: int, hidden: int, rng) -> UnitParams:
    generator = _init_affine_stack(rng, (d_in_gen, hidden, hidden, d_v))
    discriminator = _init_affine_stack(rng, (d_v + d_e, hidden, 1))
    return UnitParams(
        name=name,
        generator=generator,
        discriminator=discriminator,
        gen_opt=AdamState.for_params(generator),
        disc_opt=AdamState.for_params(discriminator),
    )


def _leaky_np(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, 0.2 * x)


def generator_forward(params: dict[str, np.ndarray], x: np.ndarray) -> np.ndarray:
    """Numeric generator pass: leaky-relu hidden layers, relu output."""
    n_layers = sum(1 for k in params if k.startswith("w"))
    h = x
    for i in range(n_layers):
        h = h @ params[f"w{i}"] + params[f"b{i}"]
        h = _leaky_np(h) if i < n_layers - 1 else np.maximum(h, 0.0)
    return h


def _generator_tape(t: Tape, pids: dict, x_node, n_layers: int):
    h = x_node
    for i in range(n_layers):
        h = t.add(t.matmul(h, pids[f"w{i}"]), pids[f"b{i}"])
        h = t.leaky_relu(h) if i < n_layers - 1 else t.relu(h)
    return h


def _discriminator_tape(t: Tape, pids: dict, feat_node, cond_node, n_layers: int):
    h = t.concat_cols(feat_node, cond_node)
    for i in range(n_layers):
        h = t.add(t.matmul(h, pids[f"w{i}"]), pids[f"b{i}"])
        if i < n_layers - 1:
            h = t.leaky_relu(h)
    return h  # (n, 1)


# --- loss builders (tape nodes) ---


def _mean(t: Tape, node):
    return t.row_mean(node)  # (n,1) -> (1,1)


def _critic_nodes(t, disc_pids, n_layers, real, fake, cond, eta, alpha):
    """Critic loss tape: score gap plus gradient penalty. Returns node triple."""
    real_n = t.constant(real)
    cond_n = t.constant(cond)
    fake_n = t.constant(fake)
    interp = t.constant(eta * real + (1.0 - eta) * fake)
    d_real = _discriminator_tape(t, disc_pids, real_n, cond_n, n_layers)
    d_fake = _discriminator_tape(t, disc_pids, fake_n, cond_n, n_layers)
    d_interp = _discriminator_tape(t, disc_pids, interp, cond_n, n_layers)
    grad = t.input_gradient(d_interp, interp)  # (n, d_v) as tape expression
    norms = t.l2_norm_rows(grad)
    ones = t.constant(np.ones((real.shape[0], 1)))
    penalty = t.scale(_mean(t, t.square(t.sub(norms, ones))), alpha)
    critic = t.add(t.sub(_mean(t, d_fake), _mean(t, d_real)), penalty)
    w_estimate = float(t.value(d_real).mean() - t.value(d_fake).mean())
    return critic, penalty, w_estimate


def wgan_loss(
    unit: UnitParams,
    real: np.ndarray,
    fake: np.ndarray,
    cond: np.ndarray,
    alpha: float,
    rng: np.random.Generator,
) -> tuple[float, float, float]:
    """Evaluate (critic loss, generator loss, penalty) for one batch.

    critic = E[D(fake)] − E[D(real)] + alpha · E[(‖∂D/∂feature at the
    interpolate‖ − 1)²], generator = −E[D(fake)]; the interpolate mixes
    real and fake rows with a fresh uniform weight per row.
    """
    if not (real.shape == fake.shape and real.shape[0] == cond.shape[0]):
        raise SynthesisError("real, fake and conditioning row counts must match")
    t = Tape()
    disc_pids = {k: t.parameter(v) for k, v in unit.discriminator.items()}
    eta = rng.uniform(size=(real.shape[0], 1))
    critic, penalty, _ = _critic_nodes(
        t, disc_pids, unit.disc_layers, real, fake, cond, eta, alpha
    )
    gen = t.scale(_mean(t, _discriminator_tape(
        t, disc_pids, t.constant(fake), t.constant(cond), unit.disc_layers
    )), -1.0)
    values = (float(t.value(critic)[0, 0]), float(t.value(gen)[0, 0]), float(t.value(penalty)[0, 0]))
    if not all(np.isfinite(v) for v in values):
        raise TrainingDiverged(f"non-finite loss in unit '{unit.name}'")
    return values


def _classification_nodes(t, head: LinearHead, fake_node, one_hot: np.ndarray):
    logits = t.add(t.matmul(fake_node, t.constant(head.weight)), t.constant(head.bias))
    picked = t.mul(t.log(t.softmax_rows(logits)), t.constant(one_hot))
    return t.scale(t.sum(picked), -1.0 / one_hot.shape[0])


def classification_loss(head: LinearHead, fake: np.ndarray, target_label: int) -> float:
    """Mean softmax NLL of one target column under the frozen head."""
    if not 0 <= target_label < head.num_columns:
        raise SynthesisError(
            f"target {target_label} outside the head's columns [0, {head.num_columns})"
        )
    t = Tape()
    one_hot = np.zeros((fake.shape[0], head.num_columns))
    one_hot[:, target_label] = 1.0
    node = _classification_nodes(t, head, t.constant(fake), one_hot)
    return float(t.value(node)[0, 0])


def _pairing(labels: np.ndarray) -> list[tuple[int, int, bool]]:
    """(real row, fake row, same-class?) pairs: aligned plus rotated-by-one."""
    n = labels.size
    pairs = [(i, i, True) for i in range(n)]
    if n > 1:
        for i in range(n):
            j = (i + 1) % n
            pairs.append((i, j, bool(labels[i] == labels[j])))
    return pairs


def _embedding_nodes(t, real: np.ndarray, fake_node, labels: np.ndarray):
    """Cosine alignment loss as tape nodes; returns (node, skipped pair count).

    Same-class pairs contribute 1 − cos, different-class pairs max(0, cos);
    the loss is the sum of the two means. Pairs touching a zero-norm row are
    skipped. Returns (None, skipped) when nothing survives.
    """
    fake_vals = t.value(fake_node)
    real_norms = np.linalg.norm(real, axis=1)
    fake_norms = np.linalg.norm(fake_vals, axis=1)
    matched, unmatched, skipped = [], [], 0
    for i, j, same in _pairing(labels):
        if real_norms[i] == 0.0 or fake_norms[j] == 0.0:
            skipped += 1
            continue
        (matched if same else unmatched).append((i, j))
    if not matched and not unmatched:
        return None, skipped

    d_v = real.shape[1]
    ones_col = t.constant(np.ones((d_v, 1)))

    def cos_node(pairs):
        sel = np.zeros((len(pairs), fake_vals.shape[0]))
        for r, (_, j) in enumerate(pairs):
            sel[r, j] = 1.0
        fake_sel = t.matmul(t.constant(sel), fake_node)
        real_sel = t.constant(real[[i for i, _ in pairs]])
        dots = t.matmul(t.mul(real_sel, fake_sel), ones_col)
        denom = t.mul(
            t.constant(real_norms[[i for i, _ in pairs]].reshape(-1, 1)),
            t.l2_norm_rows(fake_sel),
        )
        return t.div(dots, denom)

    terms = []
    if matched:
        cos = cos_node(matched)
        terms.append(_mean(t, t.sub(t.constant(np.ones((len(matched), 1))), cos)))
    if unmatched:
        terms.append(_mean(t, t.relu(cos_node(unmatched))))
    node = terms[0] if len(terms) == 1 else t.add(terms[0], terms[1])
    return node, skipped


def embedding_loss_with_counts(
    real: np.ndarray, fake: np.ndarray, labels: np.ndarray
) -> tuple[float, int]:
    """Cosine alignment loss plus the number of zero-norm pairs skipped."""
    if real.shape != fake.shape or real.shape[0] != labels.size:
        raise SynthesisError("real/fake/labels row counts must match")
    t = Tape()
    node, skipped = _embedding_nodes(t, real, t.constant(fake), np.asarray(labels))
    if node is None:
        raise SynthesisError(f"all {skipped} pairs were skipped (zero-norm rows)")
    return float(t.value(node)[0, 0]), skipped


def embedding_loss(real: np.ndarray, fake: np.ndarray, labels: np.ndarray) -> float:
    return embedding_loss_with_counts(real, fake, labels)[0]


# --- training ---


@dataclass
class _BatchPlan:
    gt_rows: np.ndarray
    fg_rows: np.ndarray
    bg_rows: np.ndarray


@dataclass
class _TrainData:
    gt_features: np.ndarray  # (n_gt, d_v)
    gt_labels: np.ndarray  # (n_gt,)
    fg_features: np.ndarray
    bg_features: np.ndarray
    plans: list[_BatchPlan]  # precomputed for the whole run


def _prepare_batches(dataset: Dataset, config: TrainConfig, rng) -> _TrainData:
    """Stack features by kind and draw the full batch schedule up front.

    The schedule (shuffles and same-class foreground/background picks) comes
    from its own stream so unit training never consumes shared randomness.
    """
    gt_rows = [r for r in dataset.records if r.kind == KIND_GT]
    fg_rows = [r for r in dataset.records if r.kind == KIND_FG]
    bg_rows = [r for r in dataset.records if r.kind == KIND_BG]
    if not gt_rows or not fg_rows or not bg_rows:
        raise SynthesisError("training set must contain gt, fg and bg records")
    gt_features = np.stack([r.feature for r in gt_rows])
    gt_labels = np.array([r.class_id for r in gt_rows], dtype=np.int64)
    fg_features = np.stack([r.feature for r in fg_rows])
    bg_features = np.stack([r.feature for r in bg_rows])
    fg_pool: dict[int, list[int]] = {}
    for idx, r in enumerate(fg_rows):
        fg_pool.setdefault(r.class_id, []).append(idx)
    bg_pool: dict[int, list[int]] = {}
    for idx, r in enumerate(bg_rows):
        bg_pool.setdefault(r.class_id, []).append(idx)
    missing = [c for c in np.unique(gt_labels) if c not in fg_pool or c not in bg_pool]
    if missing:
        raise SynthesisError(f"classes {missing} lack fg or bg records")

    n = len(gt_rows)
    batch = config.batch_size
    plans: list[_BatchPlan] = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n - batch + 1, batch):
            rows = order[start : start + batch]
            fg_pick = np.array(
                [fg_pool[c][int(rng.integers(len(fg_pool[c])))] for c in gt_labels[rows]]
            )
            bg_pick = np.array(
                [bg_pool[c][int(rng.integers(len(bg_pool[c])))] for c in gt_labels[rows]]
            )
            plans.append(_BatchPlan(rows, fg_pick, bg_pick))
    if not plans:
        raise SynthesisError(
            f"no full batches: {n} gt records < batch_size {config.batch_size}"
        )
    return _TrainData(gt_features, gt_labels, fg_features, bg_features, plans)


def _unit_batch(unit_name: str, data: _TrainData, plan: _BatchPlan, world: World):
    """(real rows, labels, embeddings) for one unit's step on one batch."""
    labels = data.gt_labels[plan.gt_rows]
    emb = world.embeddings[labels]
    real = {
        UNIT_CLASS: data.gt_features[plan.gt_rows],
        UNIT_FOREGROUND: data.fg_features[plan.fg_rows],
        UNIT_BACKGROUND: data.bg_features[plan.bg_rows],
    }[unit_name]
    return real, labels, emb


def _gen_conditioning(
    unit_name: str, model: FeatureSynthesizer, emb: np.ndarray, rng
) -> np.ndarray:
    """Generator conditioning block: the embedding itself for the class unit,
    a fresh detached class-unit sample for the other two."""
    if unit_name == UNIT_CLASS:
        return emb
    z = rng.standard_normal((emb.shape[0], model.d_z))
    return generator_forward(model.class_unit.generator, np.hstack([z, emb]))


def _critic_step(unit, real, fake, emb, eta, alpha, lr, config, step):
    t = Tape()
    disc_pids = {k: t.parameter(v) for k, v in unit.discriminator.items()}
    critic, penalty, w_est = _critic_nodes(
        t, disc_pids, unit.disc_layers, real, fake, emb, eta, alpha
    )
    critic_val = float(t.value(critic)[0, 0])
    penalty_val = float(t.value(penalty)[0, 0])
    if not np.isfinite(critic_val):
        raise TrainingDiverged(f"non-finite critic loss in unit '{unit.name}' at step {step}")
    assert penalty_val >= 0.0, f"negative penalty in unit '{unit.name}' at step {step}"
    t.backward(critic)
    adam_step(
        unit.discriminator,
        {k: t.adjoint(p) for k, p in disc_pids.items()},
        unit.disc_opt,
        lr,
        beta1=config.adam_beta1,
        beta2=config.adam_beta2,
        context=f"{unit.name} critic step {step}",
    )
    return critic_val, penalty_val, w_est


def _generator_step(
    unit, model, head, real, labels, emb, gen_cond, beta, gamma, config, rng, step
):
    """One generator update; returns (gen_loss, cls_loss, emb_loss) values."""
    t = Tape()
    gen_pids = {k: t.parameter(v) for k, v in unit.generator.items()}
    extra_params: dict[str, np.ndarray] = {}
    extra_pids: dict[str, int] = {}
    if config.end_to_end and unit.name != UNIT_CLASS:
        # rebuild the conditioning on-tape so class-generator weights get gradients
        cfu = model.class_unit
        cfu_pids = {k: t.parameter(v) for k, v in cfu.generator.items()}
        z_c = rng.standard_normal((emb.shape[0], model.d_z))
        cond_node = _generator_tape(
            t, cfu_pids, t.constant(np.hstack([z_c, emb])), cfu.gen_layers
        )
        z = rng.standard_normal((emb.shape[0], model.d_z))
        gen_in = t.concat_cols(t.constant(z), cond_node)
        for k, pid in cfu_pids.items():
            extra_params[f"class.{k}"] = cfu.generator[k]
            extra_pids[f"class.{k}"] = pid
    else:
        z = rng.standard_normal((emb.shape[0], model.d_z))
        gen_in = t.constant(np.hstack([z, gen_cond]))
    fake = _generator_tape(t, gen_pids, gen_in, unit.gen_layers)
    d_fake = _discriminator_tape(
        t,
        {k: t.constant(v) for k, v in unit.discriminator.items()},
        fake,
        t.constant(emb),
        unit.disc_layers,
    )
    total = t.scale(_mean(t, d_fake), -1.0)
    gen_val = float(t.value(total)[0, 0])
    cls_val = emb_val = None
    if beta > 0.0:
        if unit.name == UNIT_BACKGROUND and config.bfu_cls_target == "background":
            cols = np.full(labels.size, head.background_column)
        else:
            cols = np.array([head.column_of(int(c)) for c in labels])
        one_hot = np.zeros((labels.size, head.num_columns))
        one_hot[np.arange(labels.size), cols] = 1.0
        cls_node = _classification_nodes(t, head, fake, one_hot)
        cls_val = float(t.value(cls_node)[0, 0])
        total = t.add(total, t.scale(cls_node, beta))
    if gamma > 0.0:
        emb_node, _ = _embedding_nodes(t, real, fake, labels)
        if emb_node is not None:
            emb_val = float(t.value(emb_node)[0, 0])
            total = t.add(total, t.scale(emb_node, gamma))
    if not np.isfinite(float(t.value(total)[0, 0])):
        raise TrainingDiverged(f"non-finite generator loss in unit '{unit.name}' at step {step}")
    t.backward(total)
    grads = {k: t.adjoint(p) for k, p in gen_pids.items()}
    adam_step(
        unit.generator, grads, unit.gen_opt, config.learning_rate,
        beta1=config.adam_beta1, beta2=config.adam_beta2,
        context=f"{unit.name} generator step {step}",
    )
    if extra_pids:
        cfu = model.class_unit
        adam_step(
            cfu.generator,
            {k.split(".", 1)[1]: t.adjoint(pid) for k, pid in extra_pids.items()},
            cfu.gen_opt,
            config.learning_rate,
            beta1=config.adam_beta1,
            beta2=config.adam_beta2,
            context=f"class generator via {unit.name} step {step}",
        )
    return gen_val, cls_val, emb_val


def train_synthesizer(
    dataset: Dataset,
    world: World,
    config: TrainConfig,
    units: tuple[str, ...] = ALL_UNITS,
    seen_head: LinearHead | None = None,
) -> tuple[FeatureSynthesizer, LinearHead, list[LossRecord]]:
    """Train the requested units on a train-seen dataset.

    Pretrains (or accepts) the frozen seen-class head, then alternates
    n_critic critic updates with one generator update per unit per batch.
    Returns the synthesizer, the frozen head, and the per-step loss history.
    """
    config.validate()
    unknown = [u for u in units if u not in ALL_UNITS]
    if unknown:
        raise SynthesisError(f"unknown units {unknown}")
    if dataset.split != "train-seen":
        raise SynthesisError(f"expected a train-seen dataset, got '{dataset.split}'")

    d_v, d_e = world.config.d_v, world.config.d_e
    rngs = {
        name: np.random.default_rng(np.random.SeedSequence((config.seed, _STREAM[name])))
        for name in ALL_UNITS
    }
    model = FeatureSynthesizer(
        class_unit=init_unit(UNIT_CLASS, config.d_z + d_e, d_v, d_e, config.hidden, rngs[UNIT_CLASS]),
        foreground_unit=init_unit(
            UNIT_FOREGROUND, config.d_z + d_v, d_v, d_e, config.hidden, rngs[UNIT_FOREGROUND]
        ),
        background_unit=init_unit(
            UNIT_BACKGROUND, config.d_z + d_v, d_v, d_e, config.hidden, rngs[UNIT_BACKGROUND]
        ),
        d_z=config.d_z,
        d_v=d_v,
        d_e=d_e,
    )
    if seen_head is None:
        head_rng = np.random.default_rng(np.random.SeedSequence((config.seed, _STREAM["head"])))
        seen_head = pretrain_seen_head(
            dataset, world, head_rng,
            lr=config.head_lr, epochs=config.head_epochs, batch_size=config.head_batch,
        )
    data = _prepare_batches(
        dataset, config,
        np.random.default_rng(np.random.SeedSequence((config.seed, _STREAM["data"]))),
    )

    history: list[LossRecord] = []
    for step, plan in enumerate(data.plans):
        for unit_name in units:
            unit = model.unit(unit_name)
            rng = rngs[unit_name]
            alpha, beta, gamma = config.unit_weights(unit_name)
            real, labels, emb = _unit_batch(unit_name, data, plan, world)
            critic_val = penalty_val = w_est = 0.0
            for _ in range(config.n_critic):
                gen_cond = _gen_conditioning(unit_name, model, emb, rng)
                z = rng.standard_normal((emb.shape[0], model.d_z))
                fake = generator_forward(unit.generator, np.hstack([z, gen_cond]))
                eta = rng.uniform(size=(real.shape[0], 1))
                critic_val, penalty_val, w_est = _critic_step(
                    unit, real, fake, emb, eta, alpha, config.learning_rate, config, step
                )
            gen_cond = _gen_conditioning(unit_name, model, emb, rng)
            gen_val, cls_val, emb_val = _generator_step(
                unit, model, seen_head, real, labels, emb, gen_cond,
                beta, gamma, config, rng, step,
            )
            history.append(
                LossRecord(step, unit_name, critic_val, gen_val, cls_val, emb_val, penalty_val, w_est)
            )
    return model, seen_head, history


# --- synthesis ---


def synthesize(
    model: FeatureSynthesizer,
    embedding: SemanticEmbedding,
    class_id: int,
    counts: dict[str, int],
    rng: np.random.Generator,
) -> tuple[SynthesizedBatch, SynthesizedBatch, SynthesizedBatch]:
    """Draw (gt-like, foreground, background) feature batches for one class.

    Every row uses fresh noise; foreground/background rows each condition on
    their own fresh class-unit sample.
    """
    for key in ("gt_like", "fg", "bg"):
        if key not in counts or counts[key] < 0:
            raise SynthesisError(f"counts must provide a non-negative '{key}'")
    e = embedding.values.reshape(1, -1)

    def class_batch(n):
        if n == 0:
            return np.zeros((0, model.d_v))
        z = rng.standard_normal((n, model.d_z))
        return generator_forward(model.class_unit.generator, np.hstack([z, np.tile(e, (n, 1))]))

    def conditioned_batch(unit: UnitParams, n):
        if n == 0:
            return np.zeros((0, model.d_v))
        cond = class_batch(n)
        z = rng.standard_normal((n, model.d_z))
        return generator_forward(unit.generator, np.hstack([z, cond]))

    return (
        SynthesizedBatch(KIND_GT, class_id, class_batch(counts["gt_like"])),
        SynthesizedBatch(KIND_FG, class_id, conditioned_batch(model.foreground_unit, counts["fg"])),
        SynthesizedBatch(KIND_BG, class_id, conditioned_batch(model.background_unit, counts["bg"])),
    )


# --- checkpoint container and loss CSV ---


def write_losses_csv(history: list[LossRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "unit", "critic_loss", "gen_loss", "cls_loss", "emb_loss"])
        for rec in history:
            writer.writerow([
                rec.step,
                rec.unit,
                repr(rec.critic_loss),
                repr(rec.gen_loss),
                "" if rec.cls_loss is None else repr(rec.cls_loss),
                "" if rec.emb_loss is None else repr(rec.emb_loss),
            ])


def _pack_adam(prefix: str, state: AdamState, out: dict) -> None:
    for k, v in state.m.items():
        out[f"{prefix}.m.{k}"] = v
    for k, v in state.v.items():
        out[f"{prefix}.v.{k}"] = v
    out[f"{prefix}.t"] = np.array([state.t])


def _unpack_adam(prefix: str, arrays, params: dict) -> AdamState:
    return AdamState(
        m={k: arrays[f"{prefix}.m.{k}"] for k in params},
        v={k: arrays[f"{prefix}.v.{k}"] for k in params},
        t=int(arrays[f"{prefix}.t"][0]),
    )


def save_model(path, model: FeatureSynthesizer, head: LinearHead, config: TrainConfig) -> None:
    """Write the versioned checkpoint: all unit parameters, dims, config echo."""
    arrays: dict[str, np.ndarray] = {
        "format_version": np.array([MODEL_FORMAT_VERSION]),
        "dims": np.array([model.d_z, model.d_v, model.d_e]),
        "config_json": np.array(json.dumps(asdict(config), sort_keys=True)),
        "head.weight": head.weight,
        "head.bias": head.bias,
        "head.class_ids": np.array(head.class_ids),
        "head.has_background": np.array([int(head.has_background)]),
    }
    for name in ALL_UNITS:
        unit = model.unit(name)
        for k, v in unit.generator.items():
            arrays[f"{name}.generator.{k}"] = v
        for k, v in unit.discriminator.items():
            arrays[f"{name}.discriminator.{k}"] = v
        _pack_adam(f"{name}.gen_opt", unit.gen_opt, arrays)
        _pack_adam(f"{name}.disc_opt", unit.disc_opt, arrays)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path) -> tuple[FeatureSynthesizer, LinearHead, dict]:
    """Read a checkpoint; returns (synthesizer, frozen head, config echo)."""
    with np.load(path, allow_pickle=False) as arrays:
        version = int(arrays["format_version"][0])
        if version != MODEL_FORMAT_VERSION:
            raise SynthesisError(f"checkpoint format {version} unsupported (want {MODEL_FORMAT_VERSION})")
        d_z, d_v, d_e = (int(x) for x in arrays["dims"])
        config_echo = json.loads(str(arrays["config_json"]))

        def unit_from(name: str) -> UnitParams:
            gen = {
                k.rsplit(".", 1)[1]: arrays[k]
                for k in arrays.files
                if k.startswith(f"{name}.generator.")
            }
            disc = {
                k.rsplit(".", 1)[1]: arrays[k]
                for k in arrays.files
                if k.startswith(f"{name}.discriminator.")
            }
            return UnitParams(
                name=name,
                generator=gen,
                discriminator=disc,
                gen_opt=_unpack_adam(f"{name}.gen_opt", arrays, gen),
                disc_opt=_unpack_adam(f"{name}.disc_opt", arrays, disc),
            )

        model = FeatureSynthesizer(
            class_unit=unit_from(UNIT_CLASS),
            foreground_unit=unit_from(UNIT_FOREGROUND),
            background_unit=unit_from(UNIT_BACKGROUND),
            d_z=d_z,
            d_v=d_v,
            d_e=d_e,
        )
        head = LinearHead(
            weight=arrays["head.weight"],
            bias=arrays["head.bias"],
            class_ids=[int(c) for c in arrays["head.class_ids"]],
            has_background=bool(arrays["head.has_background"][0]),
        )
    return model, head, config_echo
