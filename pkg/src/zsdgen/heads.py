"""Linear classifier heads over feature vectors.

One head type covers every role in the pipeline: the frozen seen-class
scorer that regularizes generator training, the transferred unseen-class
head trained on synthesized features, and the per-split heads used by the
detection harness. A head is a single affine layer; columns are ordered by
ascending class id with the background column, when present, last — the
layout the proposal scorer relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from zsdgen.autodiff import AdamState, Tape, adam_step
from zsdgen.domain import KIND_BG, Dataset, World


class HeadError(ValueError):
    pass


@dataclass
class LinearHead:
    weight: np.ndarray  # (d_v, n_columns)
    bias: np.ndarray  # (1, n_columns)
    class_ids: list[int]
    has_background: bool

    def __post_init__(self):
        self.class_ids = [int(c) for c in self.class_ids]
        if sorted(self.class_ids) != self.class_ids or len(set(self.class_ids)) != len(self.class_ids):
            raise HeadError("class_ids must be strictly ascending")
        expected = len(self.class_ids) + (1 if self.has_background else 0)
        if self.weight.ndim != 2 or self.weight.shape[1] != expected:
            raise HeadError(f"weight has {self.weight.shape} but head needs {expected} columns")
        if self.bias.shape != (1, expected):
            raise HeadError(f"bias must be (1, {expected})")

    @property
    def num_columns(self) -> int:
        return self.weight.shape[1]

    @property
    def background_column(self) -> int:
        if not self.has_background:
            raise HeadError("head has no background column")
        return len(self.class_ids)

    def column_of(self, class_id: int) -> int:
        try:
            return self.class_ids.index(class_id)
        except ValueError:
            raise HeadError(f"class {class_id} is not scored by this head") from None

    def logits(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weight + self.bias


def label_columns(head: LinearHead, labels: np.ndarray, background_mask: np.ndarray | None = None) -> np.ndarray:
    """Map class labels to head columns; masked rows map to the background column."""
    cols = np.array([head.column_of(int(c)) for c in labels], dtype=np.int64)
    if background_mask is not None:
        cols = np.where(background_mask, head.background_column, cols)
    return cols


def _one_hot(columns: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((columns.size, width))
    out[np.arange(columns.size), columns] = 1.0
    return out


def cross_entropy(head: LinearHead, features: np.ndarray, columns: np.ndarray) -> float:
    """Mean softmax NLL of the given target columns."""
    logits = head.logits(features)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    return float(-np.mean(log_probs[np.arange(columns.size), columns]))


def train_linear_head(
    features: np.ndarray,
    columns: np.ndarray,
    class_ids,
    has_background: bool,
    rng: np.random.Generator,
    lr: float = 1e-2,
    epochs: int = 30,
    batch_size: int = 512,
    weight_decay: float = 0.0,
) -> LinearHead:
    """Fit a softmax head with Adam on minibatches; columns are target indices."""
    if features.ndim != 2 or features.shape[0] == 0:
        raise HeadError("need a non-empty 2-D feature matrix")
    if features.shape[0] != columns.size:
        raise HeadError("one target column per feature row required")
    width = len(class_ids) + (1 if has_background else 0)
    if columns.min() < 0 or columns.max() >= width:
        raise HeadError(f"target columns must lie in [0, {width})")
    if weight_decay < 0:
        raise HeadError("weight_decay must be non-negative")
    d_v = features.shape[1]
    params = {
        "w": rng.normal(scale=1.0 / np.sqrt(d_v), size=(d_v, width)),
        "b": np.zeros((1, width)),
    }
    opt = AdamState.for_params(params)
    n = features.shape[0]
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            rows = order[start : start + batch_size]
            t = Tape()
            w = t.parameter(params["w"])
            b = t.parameter(params["b"])
            logits = t.add(t.matmul(t.constant(features[rows]), w), b)
            picked = t.mul(t.log(t.softmax_rows(logits)), t.constant(_one_hot(columns[rows], width)))
            loss = t.scale(t.sum(picked), -1.0 / rows.size)
            t.backward(loss)
            grad_w = t.adjoint(w)
            if weight_decay > 0:
                # L2 pull keeps logit scale tame so this head can sit next to
                # an independently trained one without drowning it
                grad_w = grad_w + weight_decay * params["w"]
            adam_step(
                params,
                {"w": grad_w, "b": t.adjoint(b)},
                opt,
                lr,
                context=f"head epoch {epoch}",
            )
    return LinearHead(params["w"], params["b"], list(class_ids), has_background)


def pretrain_seen_head(
    dataset: Dataset,
    world: World,
    rng: np.random.Generator,
    lr: float = 1e-2,
    epochs: int = 30,
    batch_size: int = 512,
) -> LinearHead:
    """The frozen scorer over seen classes + background used during synthesis training.

    GT and foreground rows carry their class; background rows target the
    background column.
    """
    class_ids = sorted(world.seen_ids)
    order = {c: i for i, c in enumerate(class_ids)}
    bg_col = len(class_ids)
    features = np.stack([r.feature for r in dataset.records])
    columns = np.array(
        [bg_col if r.kind == KIND_BG else order[r.class_id] for r in dataset.records],
        dtype=np.int64,
    )
    return train_linear_head(
        features, columns, class_ids, True, rng, lr=lr, epochs=epochs, batch_size=batch_size
    )


# --- semantic-projection baseline (no synthesis, no background column) ---


@dataclass
class NearestEmbeddingHead:
    """Scores a feature by cosine similarity of its projected semantic vector.

    The projection is an affine map visual→semantic trained on seen-class
    features only; unseen classes are scored zero-shot through their
    embeddings. No background column: every proposal yields a detection,
    which is exactly why this baseline drowns in clutter.
    """

    projection: np.ndarray  # (d_v, d_e)
    bias: np.ndarray  # (1, d_e)
    embeddings: np.ndarray  # (n_classes, d_e), unit rows
    class_ids: list[int] = field(default_factory=list)
    has_background: bool = False

    def project(self, features: np.ndarray) -> np.ndarray:
        return features @ self.projection + self.bias

    def logits(self, features: np.ndarray) -> np.ndarray:
        projected = self.project(features)
        norms = np.linalg.norm(projected, axis=1, keepdims=True)
        unit = projected / np.where(norms > 0, norms, 1.0)
        return unit @ self.embeddings.T


def train_semantic_projection(
    features: np.ndarray,
    labels: np.ndarray,
    world: World,
    rng: np.random.Generator,
    lr: float = 1e-2,
    epochs: int = 30,
    batch_size: int = 512,
) -> np.ndarray:
    """Affine visual→semantic map fit with the cosine alignment objective.

    Matched term 1 − cos(proj(v), e(y)) per row, plus max(0, cos) against a
    rotated mismatched embedding; returns (projection, bias).
    """
    if features.shape[0] != labels.size or features.shape[0] < 2:
        raise HeadError("need at least two labeled feature rows")
    d_v = features.shape[1]
    d_e = world.embeddings.shape[1]
    params = {
        "p": rng.normal(scale=1.0 / np.sqrt(d_v), size=(d_v, d_e)),
        "b": np.zeros((1, d_e)),
    }
    opt = AdamState.for_params(params)
    n = features.shape[0]
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            rows = order[start : start + batch_size]
            if rows.size < 2:
                continue
            batch_labels = labels[rows]
            matched = world.embeddings[batch_labels]
            rolled = np.roll(batch_labels, -1)
            mismatched = world.embeddings[rolled]
            valid = (rolled != batch_labels).astype(np.float64).reshape(-1, 1)
            t = Tape()
            p = t.parameter(params["p"])
            b = t.parameter(params["b"])
            proj = t.add(t.matmul(t.constant(features[rows]), p), b)
            norms = t.l2_norm_rows(proj)
            ones_col = t.constant(np.ones((rows.size, 1)))
            cos_match = t.div(
                t.matmul(t.mul(proj, t.constant(matched)), t.constant(np.ones((d_e, 1)))),
                norms,
            )
            cos_mis = t.div(
                t.matmul(t.mul(proj, t.constant(mismatched)), t.constant(np.ones((d_e, 1)))),
                norms,
            )
            loss = t.add(
                t.row_mean(t.sub(ones_col, cos_match)),
                t.row_mean(t.mul(t.relu(cos_mis), t.constant(valid))),
            )
            t.backward(loss)
            adam_step(
                params,
                {"p": t.adjoint(p), "b": t.adjoint(b)},
                opt,
                lr,
                context=f"projection epoch {epoch}",
            )
    return params["p"], params["b"]


def build_nearest_embedding_head(
    dataset: Dataset,
    world: World,
    class_ids,
    rng: np.random.Generator,
    lr: float = 1e-2,
    epochs: int = 30,
    batch_size: int = 512,
) -> NearestEmbeddingHead:
    """Baseline head: train the projection on seen GT/FG rows, score class_ids."""
    rows = [r for r in dataset.records if r.kind != KIND_BG]
    features = np.stack([r.feature for r in rows])
    labels = np.array([r.class_id for r in rows], dtype=np.int64)
    projection, bias = train_semantic_projection(
        features, labels, world, rng, lr=lr, epochs=epochs, batch_size=batch_size
    )
    ordered = sorted(class_ids)
    return NearestEmbeddingHead(
        projection=projection,
        bias=bias,
        embeddings=world.embeddings[ordered],
        class_ids=ordered,
    )
