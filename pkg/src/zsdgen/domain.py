"""Seeded synthetic feature domain standing in for a detector's RoI features.

Every class gets a non-negative prototype vector; its semantic embedding is
a noisy fixed linear projection of that prototype (onto a randomly rotated
basis of the prototype span), L2-normalized, so embedding geometry genuinely
predicts feature geometry (checked with a Spearman rank correlation on
pairwise cosine similarities). Ground-truth
features are noisy relu'd prototypes; a proposal feature at overlap t is
the ground truth linearly faded into clutter and re-rectified. Eval splits
are synthetic "images": ground-truth boxes on a canvas plus proposal boxes
at controlled IoUs whose features come from the same corruption rule.

Prototypes are drawn from a shared low-rank latent structure (a fixed
linear map of per-class latent codes) rather than independent coordinates:
with fewer seen classes than embedding dimensions, fully independent
prototypes would be unrecoverable from their embeddings and no semantic
transfer could exist to measure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import stats

from zsdgen.detection_eval import BoxRect, GroundTruth, iou

KIND_GT = "gt"
KIND_FG = "fg"
KIND_BG = "bg"

SPEARMAN_FLOOR = 0.8
WORLD_ATTEMPTS = 10


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class DomainConfig:
    """Knobs for the synthetic domain; defaults are the desk-scale setting."""

    d_v: int = 64
    d_e: int = 16
    num_seen: int = 12
    num_unseen: int = 4
    num_gt: int = 2000
    n_s: int = 8
    t_f: float = 0.5
    t_b: float = 0.2
    intra_class_sigma: float = 0.35
    clutter_sigma: float = 0.45
    proto_latent_dim: int = 8
    proto_offset: float = 0.15
    embed_noise: float = 0.55
    eval_images: int = 50
    eval_max_gt_per_image: int = 3
    eval_proposals_per_gt: int = 6
    eval_clutter_per_image: int = 600
    eval_clutter_band: tuple[float, float] = (0.0, 0.2)  # feature-side band; boxes stay clear
    eval_impostors_per_image: int = 0
    eval_anchor_iou: tuple[float, float] = (0.55, 1.0)
    eval_random_iou: tuple[float, float] = (0.1, 0.45)
    canvas_size: float = 100.0
    box_size: tuple[float, float] = (15.0, 40.0)
    seed: int = 0

    def validate(self) -> None:
        if min(self.d_v, self.d_e, self.proto_latent_dim) <= 0:
            raise DomainError("dimensions must be positive")
        if self.num_seen <= 0 or self.num_unseen <= 0:
            raise DomainError("need at least one seen and one unseen class")
        if not (0.0 <= self.t_b < self.t_f <= 1.0):
            raise DomainError(f"need 0 <= t_b < t_f <= 1, got t_b={self.t_b}, t_f={self.t_f}")
        if self.intra_class_sigma < 0 or self.clutter_sigma < 0 or self.embed_noise < 0:
            raise DomainError("sigmas must be non-negative")
        if self.num_gt < 1 or self.n_s < 1:
            raise DomainError("num_gt and n_s must be at least 1")
        if self.eval_images < 1 or self.eval_max_gt_per_image < 1:
            raise DomainError("eval set must contain images with ground truth")
        if self.eval_clutter_per_image < 0 or self.eval_impostors_per_image < 0:
            raise DomainError("eval distractor counts must be non-negative")
        c_lo, c_hi = self.eval_clutter_band
        if not (0.0 <= c_lo <= c_hi < self.t_f):
            raise DomainError("eval_clutter_band must lie inside [0, t_f)")
        lo, hi = self.box_size
        if not (0 < lo <= hi < self.canvas_size):
            raise DomainError("box_size must fit the canvas")

    @property
    def num_classes(self) -> int:
        return self.num_seen + self.num_unseen


@dataclass(frozen=True)
class SemanticEmbedding:
    """Unit-L2 semantic vector for one class."""

    class_id: int
    values: np.ndarray

    def __post_init__(self):
        norm = float(np.linalg.norm(self.values))
        if abs(norm - 1.0) > 1e-9:
            raise DomainError(f"embedding for class {self.class_id} has norm {norm}")


@dataclass
class World:
    """Fixed per-seed ground truth: prototypes, embeddings, class splits."""

    config: DomainConfig
    prototypes: np.ndarray  # (C, d_v), non-negative
    embeddings: np.ndarray  # (C, d_e), unit rows
    seen_ids: tuple[int, ...]
    unseen_ids: tuple[int, ...]

    def prototype(self, class_id: int) -> np.ndarray:
        return self.prototypes[class_id]

    def embedding(self, class_id: int) -> SemanticEmbedding:
        return SemanticEmbedding(class_id, self.embeddings[class_id])


@dataclass(frozen=True)
class SampleRecord:
    class_id: int
    kind: str  # gt | fg | bg
    iou: float
    feature: np.ndarray


@dataclass
class Dataset:
    split: str  # train-seen | test-seen | test-unseen
    records: list[SampleRecord]

    def features(self, kind: str | None = None) -> np.ndarray:
        rows = [r.feature for r in self.records if kind is None or r.kind == kind]
        return np.stack(rows) if rows else np.zeros((0, 0))


@dataclass(frozen=True)
class Proposal:
    box: BoxRect
    feature: np.ndarray
    source_class: int  # class whose feature seeded this proposal (-1 for clutter)
    planned_iou: float


@dataclass
class EvalImage:
    image_id: int
    gts: list[GroundTruth]
    proposals: list[Proposal]


@dataclass
class EvalSet:
    split: str
    images: list[EvalImage]


def _pairwise_cosines(rows: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    unit = rows / np.where(norms > 0, norms, 1.0)
    sim = unit @ unit.T
    n = rows.shape[0]
    return sim[np.triu_indices(n, k=1)]


def make_world(config: DomainConfig) -> World:
    """Build prototypes and embeddings; retries the embedding projection.

    If the Spearman correlation between embedding-space and feature-space
    class similarities falls below the floor, the projection is redrawn
    with an incremented sub-seed, up to WORLD_ATTEMPTS times.
    """
    config.validate()
    c = config.num_classes
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0)))
    latents = rng.normal(size=(c, config.proto_latent_dim))
    mix = rng.normal(scale=1.0 / np.sqrt(config.proto_latent_dim), size=(config.proto_latent_dim, config.d_v))
    prototypes = np.maximum(latents @ mix + config.proto_offset, 0.0)

    proto_sims = _pairwise_cosines(prototypes)
    # Project onto the prototype span (top singular directions) so the only
    # distortion of class geometry is the noise term: an independent random
    # projection into d_e dims perturbs pairwise cosines by ~1/sqrt(d_e),
    # more than the spread between classes, and no retry could pass the floor.
    _, svals, vt = np.linalg.svd(prototypes, full_matrices=False)
    rank = int(np.sum(svals > svals[0] * 1e-12)) if svals.size else 0
    span = vt[: min(config.d_e, rank)].T  # (d_v, r)
    corr = float("nan")
    for attempt in range(WORLD_ATTEMPTS):
        erng = np.random.default_rng(np.random.SeedSequence((config.seed, 1, attempt)))
        basis = span
        if basis.shape[1] < config.d_e:  # fewer classes than d_e: pad orthogonally
            extra = erng.normal(size=(config.d_v, config.d_e - basis.shape[1]))
            extra -= basis @ (basis.T @ extra)
            basis = np.hstack([basis, np.linalg.qr(extra)[0]])
        rotation = np.linalg.qr(erng.normal(size=(config.d_e, config.d_e)))[0]
        projection = basis @ rotation
        raw = prototypes @ projection + erng.normal(scale=config.embed_noise, size=(c, config.d_e))
        norms = np.linalg.norm(raw, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            continue
        embeddings = raw / norms
        corr = stats.spearmanr(proto_sims, _pairwise_cosines(embeddings)).statistic
        if corr >= SPEARMAN_FLOOR:
            return World(
                config=config,
                prototypes=prototypes,
                embeddings=embeddings,
                seen_ids=tuple(range(config.num_seen)),
                unseen_ids=tuple(range(config.num_seen, c)),
            )
    raise DomainError(
        f"embedding projection failed the correlation floor {SPEARMAN_FLOOR} "
        f"in {WORLD_ATTEMPTS} attempts (last: {corr:.3f})"
    )


def sample_gt_feature(world: World, class_id: int, rng: np.random.Generator) -> np.ndarray:
    """A ground-truth-quality feature: re-rectified noisy prototype."""
    noise = rng.normal(scale=world.config.intra_class_sigma, size=world.config.d_v)
    return np.maximum(world.prototypes[class_id] + noise, 0.0)


def sample_clutter(world: World, class_id: int, rng: np.random.Generator) -> np.ndarray:
    """Background clutter: noise mixed with a random other class's prototype."""
    others = [c for c in range(world.config.num_classes) if c != class_id]
    other = others[int(rng.integers(len(others)))]
    noise = rng.normal(scale=world.config.clutter_sigma, size=world.config.d_v)
    return 0.5 * (noise + world.prototypes[other])


def corrupt_to_iou(
    world: World,
    gt_feature: np.ndarray,
    class_id: int,
    target_iou: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Fade a GT feature toward clutter in proportion to (1 - IoU)."""
    if not 0.0 <= target_iou <= 1.0:
        raise DomainError(f"target IoU must lie in [0, 1], got {target_iou}")
    clutter = sample_clutter(world, class_id, rng)
    return np.maximum(target_iou * gt_feature + (1.0 - target_iou) * clutter, 0.0)


def build_training_set(world: World, rng: np.random.Generator) -> Dataset:
    """num_gt GT features round-robin over seen classes, each with n_s FG/BG."""
    cfg = world.config
    records: list[SampleRecord] = []
    seen = world.seen_ids
    for i in range(cfg.num_gt):
        cls = seen[i % len(seen)]
        gt_feat = sample_gt_feature(world, cls, rng)
        records.append(SampleRecord(cls, KIND_GT, 1.0, gt_feat))
        for _ in range(cfg.n_s):
            t = float(rng.uniform(cfg.t_f, 1.0))
            records.append(SampleRecord(cls, KIND_FG, t, corrupt_to_iou(world, gt_feat, cls, t, rng)))
        for _ in range(cfg.n_s):
            t = float(rng.uniform(0.0, cfg.t_b))
            records.append(SampleRecord(cls, KIND_BG, t, corrupt_to_iou(world, gt_feat, cls, t, rng)))
    return Dataset("train-seen", records)


def build_holdout_records(
    world: World,
    class_ids: tuple[int, ...],
    per_class: int,
    rng: np.random.Generator,
    split: str,
) -> Dataset:
    """Flat record set (GT + FG + BG per class) for classifier accuracy checks."""
    cfg = world.config
    records: list[SampleRecord] = []
    for cls in class_ids:
        for _ in range(per_class):
            gt_feat = sample_gt_feature(world, cls, rng)
            records.append(SampleRecord(cls, KIND_GT, 1.0, gt_feat))
            t = float(rng.uniform(cfg.t_f, 1.0))
            records.append(SampleRecord(cls, KIND_FG, t, corrupt_to_iou(world, gt_feat, cls, t, rng)))
            t = float(rng.uniform(0.0, cfg.t_b))
            records.append(SampleRecord(cls, KIND_BG, t, corrupt_to_iou(world, gt_feat, cls, t, rng)))
    return Dataset(split, records)


def _random_gt_box(cfg: DomainConfig, rng: np.random.Generator) -> BoxRect:
    lo, hi = cfg.box_size
    w = float(rng.uniform(lo, hi))
    h = float(rng.uniform(lo, hi))
    x1 = float(rng.uniform(0.0, cfg.canvas_size - w))
    y1 = float(rng.uniform(0.0, cfg.canvas_size - h))
    return BoxRect(x1, y1, x1 + w, y1 + h)


def _box_at_iou(gt: BoxRect, target: float, rng: np.random.Generator) -> BoxRect:
    """Same-size box shifted along one axis to hit the target IoU exactly."""
    if target >= 1.0:
        return BoxRect(gt.x1, gt.y1, gt.x2, gt.y2)
    w = gt.x2 - gt.x1
    h = gt.y2 - gt.y1
    sign = 1.0 if rng.uniform() < 0.5 else -1.0
    if rng.uniform() < 0.5:
        dx = sign * w * (1.0 - target) / (1.0 + target)
        return BoxRect(gt.x1 + dx, gt.y1, gt.x2 + dx, gt.y2)
    dy = sign * h * (1.0 - target) / (1.0 + target)
    return BoxRect(gt.x1, gt.y1 + dy, gt.x2, gt.y2 + dy)


def _clear_box(cfg: DomainConfig, gts: list[GroundTruth], rng) -> BoxRect | None:
    for _ in range(20):
        candidate = _random_gt_box(cfg, rng)
        if all(iou(candidate, gt.box) < 0.3 for gt in gts):
            return candidate
    return None


def build_eval_set(world: World, which: str, rng: np.random.Generator) -> EvalSet:
    """Synthetic eval images for one split ("test-seen" or "test-unseen").

    Each ground truth gets one anchor proposal in a matchable IoU band plus
    proposals at random IoUs. Images are padded with distractors whose boxes
    stay clear of the ground truth: clutter in both splits (features from the
    low-IoU background band around the image's own objects, so they compete
    with anchors for any scorer without a background hand-off), and in the
    unseen split also impostors — full-quality seen objects that carry no
    annotation there, the usual situation when only the unseen classes are
    labelled.
    """
    if which == "test-seen":
        pool = world.seen_ids
    elif which == "test-unseen":
        pool = world.unseen_ids
    else:
        raise DomainError(f"unknown eval split '{which}'")
    cfg = world.config
    images: list[EvalImage] = []
    for image_id in range(cfg.eval_images):
        n_gt = int(rng.integers(1, cfg.eval_max_gt_per_image + 1))
        gts: list[GroundTruth] = []
        gt_feats: list[np.ndarray] = []
        proposals: list[Proposal] = []
        for _ in range(n_gt):
            cls = int(pool[int(rng.integers(len(pool)))])
            box = None
            for _ in range(20):  # keep objects apart so matching stays unambiguous
                candidate = _random_gt_box(cfg, rng)
                if all(iou(candidate, g.box) < 0.3 for g in gts):
                    box = candidate
                    break
            if box is None:
                continue
            gts.append(GroundTruth(image_id=image_id, box=box, class_id=cls))
            gt_feats.append(sample_gt_feature(world, cls, rng))
        n_gt = len(gts)
        for gt, gt_feat in zip(gts, gt_feats):
            targets = [float(rng.uniform(*cfg.eval_anchor_iou))]
            targets += [
                float(rng.uniform(*cfg.eval_random_iou))
                for _ in range(cfg.eval_proposals_per_gt - 1)
            ]
            for target in targets:
                box = _box_at_iou(gt.box, target, rng)
                actual = iou(box, gt.box)
                feat = corrupt_to_iou(world, gt_feat, gt.class_id, actual, rng)
                proposals.append(Proposal(box, feat, gt.class_id, actual))
        for _ in range(cfg.eval_clutter_per_image):
            box = _clear_box(cfg, gts, rng)
            if box is None:
                continue
            anchor = int(rng.integers(n_gt))
            # clutter features live in the low-IoU training band: mostly
            # mixture noise with a sliver of class signal, the object-adjacent
            # context a region proposer keeps firing on
            t = float(rng.uniform(*cfg.eval_clutter_band))
            feat = corrupt_to_iou(world, gt_feats[anchor], gts[anchor].class_id, t, rng)
            proposals.append(Proposal(box, feat, -1, 0.0))
        gt_classes = {gt.class_id for gt in gts}
        impostor_pool = (
            [int(c) for c in world.seen_ids if int(c) not in gt_classes]
            if which == "test-unseen"
            else []
        )
        n_impostors = cfg.eval_impostors_per_image if impostor_pool else 0
        for _ in range(n_impostors):
            box = _clear_box(cfg, gts, rng)
            if box is None:
                continue
            imp_cls = impostor_pool[int(rng.integers(len(impostor_pool)))]
            feat = sample_gt_feature(world, imp_cls, rng)
            proposals.append(Proposal(box, feat, imp_cls, 0.0))
        images.append(EvalImage(image_id=image_id, gts=gts, proposals=proposals))
    return EvalSet(split=which, images=images)


def merge_eval_sets(a: EvalSet, b: EvalSet) -> EvalSet:
    """Disjoint union with re-numbered image ids (for mixed-split eval)."""
    offset = 1 + max((img.image_id for img in a.images), default=-1)
    images = list(a.images)
    for img in b.images:
        new_id = img.image_id + offset
        images.append(
            EvalImage(
                image_id=new_id,
                gts=[GroundTruth(new_id, g.box, g.class_id) for g in img.gts],
                proposals=img.proposals,
            )
        )
    return EvalSet(split=f"{a.split}+{b.split}", images=images)


# --- JSONL interchange ---


def export_features_jsonl(dataset: Dataset, path) -> None:
    with open(path, "w") as fh:
        for rec in dataset.records:
            fh.write(
                json.dumps(
                    {
                        "class_id": rec.class_id,
                        "kind": rec.kind,
                        "iou": rec.iou,
                        "feature": [float(x) for x in rec.feature],
                    }
                )
                + "\n"
            )


def ingest_features_jsonl(
    path,
    config: DomainConfig,
    split: str = "train-seen",
    allowed_class_ids: set[int] | None = None,
) -> Dataset:
    """Read a feature dump, validating every record against the contract."""
    records: list[SampleRecord] = []
    d_v: int | None = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DomainError(f"{path}: line {lineno}: not valid JSON ({exc})") from None
            for key in ("class_id", "kind", "iou", "feature"):
                if key not in obj:
                    raise DomainError(f"{path}: line {lineno}: missing key '{key}'")
            cls = obj["class_id"]
            kind = obj["kind"]
            t = obj["iou"]
            feature = obj["feature"]
            if not isinstance(cls, int) or cls < 0:
                raise DomainError(f"{path}: line {lineno}: class_id must be a non-negative int")
            if kind not in (KIND_GT, KIND_FG, KIND_BG):
                raise DomainError(f"{path}: line {lineno}: kind must be gt|fg|bg, got '{kind}'")
            if not isinstance(t, (int, float)) or not 0.0 <= float(t) <= 1.0:
                raise DomainError(f"{path}: line {lineno}: iou must lie in [0, 1]")
            t = float(t)
            if kind == KIND_GT and t != 1.0:
                raise DomainError(f"{path}: line {lineno}: gt records must have iou 1.0")
            if kind == KIND_FG and t < config.t_f:
                raise DomainError(
                    f"{path}: line {lineno}: fg iou {t} below the foreground bound t_f={config.t_f}"
                )
            if kind == KIND_BG and t > config.t_b:
                raise DomainError(
                    f"{path}: line {lineno}: bg iou {t} above the background bound t_b={config.t_b}"
                )
            arr = np.asarray(feature, dtype=np.float64)
            if arr.ndim != 1 or arr.size == 0 or not np.all(np.isfinite(arr)):
                raise DomainError(f"{path}: line {lineno}: feature must be a finite float vector")
            if d_v is None:
                d_v = arr.size
            elif arr.size != d_v:
                raise DomainError(
                    f"{path}: line {lineno}: feature width {arr.size} != {d_v} from earlier lines"
                )
            if allowed_class_ids is not None and cls not in allowed_class_ids:
                raise DomainError(
                    f"{path}: line {lineno}: class_id {cls} is not in the allowed class set"
                )
            records.append(SampleRecord(cls, kind, t, arr))
    return Dataset(split, records)


def export_embeddings_jsonl(world: World, path) -> None:
    with open(path, "w") as fh:
        for cls in range(world.config.num_classes):
            fh.write(
                json.dumps(
                    {
                        "class_id": cls,
                        "embedding": [float(x) for x in world.embeddings[cls]],
                        "seen": cls in world.seen_ids,
                    }
                )
                + "\n"
            )


def ingest_embeddings_jsonl(path) -> tuple[dict[int, np.ndarray], set[int], set[int]]:
    """Read embeddings; returns (class_id -> unit vector, seen ids, unseen ids)."""
    embeddings: dict[int, np.ndarray] = {}
    seen: set[int] = set()
    unseen: set[int] = set()
    d_e: int | None = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DomainError(f"{path}: line {lineno}: not valid JSON ({exc})") from None
            for key in ("class_id", "embedding", "seen"):
                if key not in obj:
                    raise DomainError(f"{path}: line {lineno}: missing key '{key}'")
            cls = obj["class_id"]
            if not isinstance(cls, int) or cls < 0:
                raise DomainError(f"{path}: line {lineno}: class_id must be a non-negative int")
            if cls in embeddings:
                raise DomainError(f"{path}: line {lineno}: duplicate class_id {cls}")
            vec = np.asarray(obj["embedding"], dtype=np.float64)
            if vec.ndim != 1 or vec.size == 0 or not np.all(np.isfinite(vec)):
                raise DomainError(f"{path}: line {lineno}: embedding must be a finite float vector")
            if d_e is None:
                d_e = vec.size
            elif vec.size != d_e:
                raise DomainError(f"{path}: line {lineno}: embedding width differs from earlier lines")
            norm = float(np.linalg.norm(vec))
            if abs(norm - 1.0) > 1e-6:
                raise DomainError(f"{path}: line {lineno}: embedding norm {norm:.6f} is not 1")
            embeddings[cls] = vec
            (seen if obj["seen"] else unseen).add(cls)
    if not embeddings:
        raise DomainError(f"{path}: no embeddings found")
    return embeddings, seen, unseen
