"""Knowledge transfer: classifier heads for classes never seen in training.

The synthesizer, trained on seen classes, generates features for unseen
classes from their embeddings alone; a softmax head fit on those synthetic
rows then scores real unseen-class proposals. Ablation variants differ in
which synthesis units feed the head and where its background column's
training rows come from:

  baseline      semantic-projection scoring, no synthesis, no background
  cfu           class-unit rows as positives; real seen background rows
  cfu_ffu       + foreground-unit rows as positives
  cfu_ffu_bfu   + background-unit rows replace the real background

The mixed-split predictor concatenates the frozen seen-class head with the
transferred unseen head; the two background logits fuse by max into one
shared background column.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from zsdgen.domain import KIND_BG, Dataset, World
from zsdgen.heads import LinearHead, build_nearest_embedding_head, train_linear_head
from zsdgen.synthesizer import FeatureSynthesizer, synthesize

VARIANT_BASELINE = "baseline"
VARIANT_CLASS = "cfu"
VARIANT_CLASS_FG = "cfu_ffu"
VARIANT_FULL = "cfu_ffu_bfu"
ABLATION_VARIANTS = (VARIANT_BASELINE, VARIANT_CLASS, VARIANT_CLASS_FG, VARIANT_FULL)


class TransferError(ValueError):
    pass


@dataclass(frozen=True)
class TransferConfig:
    """How many rows to synthesize per class and how to fit the head."""

    gt_like: int = 500
    fg: int = 500
    bg: int = 500
    lr: float = 1e-2
    epochs: int = 30
    batch_size: int = 512
    weight_decay: float = 1e-3
    seed: int = 0

    def validate(self) -> None:
        if min(self.gt_like, self.fg, self.bg) < 0:
            raise TransferError("synthesis counts must be non-negative")
        if self.gt_like == 0:
            raise TransferError("at least the class-unit rows are required")
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise TransferError("bad head-fitting settings")
        if self.weight_decay < 0:
            raise TransferError("weight_decay must be non-negative")


def synthesize_class_rows(
    model: FeatureSynthesizer,
    world: World,
    class_id: int,
    config: TransferConfig,
    rng: np.random.Generator,
    with_fg: bool,
    with_bg: bool,
) -> tuple[np.ndarray, np.ndarray]:
    """(positive rows, background rows) synthesized for one class."""
    counts = {
        "gt_like": config.gt_like,
        "fg": config.fg if with_fg else 0,
        "bg": config.bg if with_bg else 0,
    }
    batch_gt, batch_fg, batch_bg = synthesize(
        model, world.embedding(class_id), class_id, counts, rng
    )
    positives = (
        np.vstack([batch_gt.features, batch_fg.features]) if with_fg else batch_gt.features
    )
    return positives, batch_bg.features


def _real_background_rows(dataset: Dataset, limit: int, rng: np.random.Generator) -> np.ndarray:
    rows = dataset.features(KIND_BG)
    if rows.shape[0] == 0:
        raise TransferError("dataset has no background rows to train the background column")
    if rows.shape[0] > limit:
        rows = rows[rng.choice(rows.shape[0], size=limit, replace=False)]
    return rows


def train_transfer_head(
    model: FeatureSynthesizer,
    world: World,
    class_ids,
    config: TransferConfig,
    variant: str,
    dataset: Dataset | None = None,
) -> LinearHead:
    """Head over `class_ids` trained purely on synthesized rows for them.

    No real feature of any class in `class_ids` is consumed; the only real
    rows are seen-class background features for the non-bfu variants, so
    the head is zero-shot with respect to its scored classes.
    """
    config.validate()
    if variant not in (VARIANT_CLASS, VARIANT_CLASS_FG, VARIANT_FULL):
        raise TransferError(f"variant '{variant}' does not train a transfer head")
    with_fg = variant in (VARIANT_CLASS_FG, VARIANT_FULL)
    with_bg = variant == VARIANT_FULL
    ordered = sorted(int(c) for c in class_ids)
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 6)))
    features, columns = [], []
    bg_rows = []
    for col, class_id in enumerate(ordered):
        positives, synth_bg = synthesize_class_rows(
            model, world, class_id, config, rng, with_fg, with_bg
        )
        features.append(positives)
        columns.append(np.full(positives.shape[0], col))
        if with_bg:
            bg_rows.append(synth_bg)
    if with_bg:
        background = np.vstack(bg_rows)
    else:
        if dataset is None:
            raise TransferError(f"variant '{variant}' needs a dataset for real background rows")
        # one balanced column: as many background rows as one class's positives
        background = _real_background_rows(dataset, config.bg, rng)
    bg_col = len(ordered)
    features.append(background)
    columns.append(np.full(background.shape[0], bg_col))
    x = np.vstack(features)
    y = np.concatenate(columns)
    return train_linear_head(
        x, y, ordered, True, rng,
        lr=config.lr, epochs=config.epochs, batch_size=config.batch_size,
        weight_decay=config.weight_decay,
    )


def build_variant_head(
    variant: str,
    model: FeatureSynthesizer | None,
    world: World,
    dataset: Dataset,
    config: TransferConfig,
    class_ids=None,
):
    """Evaluation head for one ablation variant (class_ids default: unseen)."""
    ids = sorted(world.unseen_ids if class_ids is None else class_ids)
    if variant == VARIANT_BASELINE:
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, 7)))
        return build_nearest_embedding_head(
            dataset, world, ids, rng,
            lr=config.lr, epochs=config.epochs, batch_size=config.batch_size,
        )
    if model is None:
        raise TransferError(f"variant '{variant}' requires a trained synthesizer")
    return train_transfer_head(model, world, ids, config, variant, dataset)


@dataclass(frozen=True)
class GzsdHead:
    """Seen and unseen heads side by side with one shared background column.

    Columns are the seen head's class columns, then the unseen head's, then
    a background logit taken as the max of the two heads' background logits
    — whichever head is more confident a feature is background wins it.
    """

    seen_head: LinearHead
    unseen_head: LinearHead
    class_ids: list[int] = field(init=False)
    has_background: bool = field(init=False, default=True)

    def __post_init__(self):
        for side, head in (("seen", self.seen_head), ("unseen", self.unseen_head)):
            if not head.has_background:
                raise TransferError(f"the {side} head must carry a background column")
        overlap = set(self.seen_head.class_ids) & set(self.unseen_head.class_ids)
        if overlap:
            raise TransferError(f"seen and unseen heads share classes {sorted(overlap)}")
        object.__setattr__(
            self, "class_ids", list(self.seen_head.class_ids) + list(self.unseen_head.class_ids)
        )
        object.__setattr__(self, "has_background", True)

    @property
    def num_columns(self) -> int:
        return len(self.class_ids) + 1

    def logits(self, features: np.ndarray) -> np.ndarray:
        seen = self.seen_head.logits(features)
        unseen = self.unseen_head.logits(features)
        background = np.maximum(seen[:, -1:], unseen[:, -1:])
        return np.hstack([seen[:, :-1], unseen[:, :-1], background])


def build_gzsd_head(seen_head: LinearHead, unseen_head: LinearHead) -> GzsdHead:
    """Mixed-split predictor from the frozen seen head and a transfer head."""
    return GzsdHead(seen_head=seen_head, unseen_head=unseen_head)
