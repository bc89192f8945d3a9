"""Desk-scale fine-tuning simulator.

A frozen random linear "backbone" stands in for a pretrained trunk; a
trainable feature layer (the encoder whose outputs get ranked) and a
classifier head are fitted with weighted cross entropy, Adam-style
updates, and a reduce-on-plateau schedule driven by top-5 mean accuracy
on the validation split.  Optional feature dropout and feature-layer L2
decay reproduce the regularization study qualitatively: fine-tuning
helps seen disorders, tends to hurt unseen ones, and regularization
softens the damage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import IO, Sequence

import numpy as np

from . import __version__
from .embedio import EmbeddingSet
from .errors import ConfigInvalid, DataError, NonFinite, NonFiniteLoss
from .evaluation import EvaluationReport, evaluate_arrays, report_from_ranks
from .folds import assign_folds
from .losses import wce_loss, wce_weights
from .rng import derive_rng


@dataclass
class PlateauScheduler:
    """Reduce-on-plateau for a higher-is-better metric.

    After ``patience`` consecutive epochs without an improvement larger
    than ``delta``, the rate divides by ``factor``; a reduction that
    would land below ``floor`` instead sets the converged flag.  The
    rate never increases.
    """

    lr: float
    factor: float = 2.0
    patience: int = 5
    delta: float = 1e-4
    floor: float = 1e-6
    best: float = -math.inf
    bad_epochs: int = 0
    converged: bool = False

    def __post_init__(self):
        if self.factor <= 1.0:
            raise ConfigInvalid(f"factor must exceed 1, got {self.factor}")
        if self.patience < 1:
            raise ConfigInvalid(f"patience must be >= 1, got {self.patience}")

    def step(self, metric: float) -> float:
        if not math.isfinite(metric):
            raise NonFinite(f"plateau metric is {metric}")
        if metric > self.best + self.delta:
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                reduced = self.lr / self.factor
                if reduced < self.floor:
                    self.converged = True
                else:
                    self.lr = reduced
                self.bad_epochs = 0
        return self.lr


def plateau_step(scheduler: PlateauScheduler, metric: float) -> float:
    return scheduler.step(metric)


@dataclass(frozen=True)
class TrainSimConfig:
    epochs: int = 40
    batch_size: int = 64
    base_lr: float = 1e-3
    plateau_factor: float = 2.0
    patience: int = 5
    plateau_delta: float = 1e-4
    lr_floor: float = 1e-6
    dropout: float = 0.5
    weight_decay: float = 5e-5  # L2 on the feature-layer weights only
    hidden_dim: int = 96
    feature_dim: int = 48
    freeze_backbone: bool = True
    seed: int = 0
    val_metric_k: int = 5
    eval_k: tuple[int, ...] = (1, 5)
    unseen_folds: int = 2

    def __post_init__(self):
        if self.plateau_factor <= 1.0:
            raise ConfigInvalid("plateau_factor must exceed 1")
        if self.weight_decay < 0:
            raise ConfigInvalid("weight_decay must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigInvalid("dropout must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigInvalid("epochs must be >= 0 and batch_size >= 1")
        if self.val_metric_k < 1:
            raise ConfigInvalid("val_metric_k must be >= 1")


@dataclass
class Panel:
    """One split of raw vectors with per-image identity metadata."""

    vectors: np.ndarray  # (n, d) float64
    image_ids: list[str]
    subjects: list[str]
    classes: list[str]

    def __len__(self):
        return len(self.image_ids)

    @classmethod
    def from_set(cls, embedding_set: EmbeddingSet, indices=None) -> "Panel":
        recs = embedding_set.records
        if indices is None:
            indices = range(len(recs))
        rows = [recs[i] for i in indices]
        vectors = (np.stack([r.vector for r in rows]).astype(np.float64)
                   if rows else np.zeros((0, embedding_set.dimension)))
        return cls(vectors, [r.image_id for r in rows],
                   [r.subject_id for r in rows], [r.class_id for r in rows])


@dataclass
class TrainSimData:
    """Seen train/val/test panels plus the unseen panel."""

    train: Panel
    val: Panel
    test: Panel
    unseen: Panel

    def __post_init__(self):
        if len(self.train) == 0 or len(self.val) == 0 or len(self.test) == 0:
            raise DataError("train/val/test panels must be non-empty")
        if len(self.unseen) == 0:
            raise DataError("unseen panel must be non-empty")


@dataclass
class SimModel:
    """Frozen backbone + trainable feature and classifier layers."""

    backbone: np.ndarray          # (hidden, d_in), frozen by default
    feature_w: np.ndarray         # (feature, hidden)
    feature_b: np.ndarray         # (feature,)
    classifier_w: np.ndarray      # (n_classes, feature)
    classifier_b: np.ndarray      # (n_classes,)
    class_ids: tuple[str, ...]

    def encode(self, x: np.ndarray) -> np.ndarray:
        hidden = x @ self.backbone.T
        return hidden @ self.feature_w.T + self.feature_b

    def logits(self, features: np.ndarray) -> np.ndarray:
        return features @ self.classifier_w.T + self.classifier_b


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val_metric: float


@dataclass
class TrainSimResult:
    model: SimModel
    before: dict[str, EvaluationReport]
    after: dict[str, EvaluationReport]
    log: list[EpochLog] = field(default_factory=list)


class _Adam:
    def __init__(self, shapes, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def _seen_report(model: SimModel, data: TrainSimData, config: TrainSimConfig,
                 stage: str) -> EvaluationReport:
    return evaluate_arrays(
        model.encode(data.test.vectors), data.test.image_ids,
        data.test.classes, data.test.subjects,
        model.encode(data.train.vectors), data.train.classes,
        data.train.subjects, ks=config.eval_k, exclusion=True,
        config={"stage": stage, "split": "seen", "gallery": "train"},
        seed=config.seed)


def _unseen_report(model: SimModel, data: TrainSimData, config: TrainSimConfig,
                   stage: str) -> EvaluationReport:
    """Pooled subject-level CV over the unseen panel."""
    panel = data.unseen
    by_class: dict[str, list[str]] = {}
    for cls, subj in zip(panel.classes, panel.subjects):
        bucket = by_class.setdefault(cls, [])
        if subj not in bucket:
            bucket.append(subj)
    folds = assign_folds(by_class, config.unseen_folds, config.seed)
    encoded = model.encode(panel.vectors)
    ids, classes, ranks, t1c, t1s = [], [], [], [], []
    gallery_classes: set[str] = set()
    for fold in range(folds.n_folds):
        test_idx = [i for i, s in enumerate(panel.subjects)
                    if folds.assignment[s] == fold]
        gal_idx = [i for i, s in enumerate(panel.subjects)
                   if folds.assignment[s] != fold]
        if not test_idx or not gal_idx:
            continue
        rep = evaluate_arrays(
            encoded[test_idx], [panel.image_ids[i] for i in test_idx],
            [panel.classes[i] for i in test_idx],
            [panel.subjects[i] for i in test_idx],
            encoded[gal_idx], [panel.classes[i] for i in gal_idx],
            [panel.subjects[i] for i in gal_idx],
            ks=config.eval_k, exclusion=True, seed=config.seed)
        for row in rep.per_image:
            ids.append(row.image_id)
            classes.append(row.true_class)
            ranks.append(row.rank_of_truth)
            t1c.append(row.top1_class)
            t1s.append(row.top1_score)
        gallery_classes.update(panel.classes[i] for i in gal_idx)
    echo = {"stage": stage, "split": "unseen", "pooled": True,
            "n_folds": folds.n_folds}
    return report_from_ranks(ids, classes, ranks, t1c, t1s, config.eval_k,
                             sorted(gallery_classes), echo, config.seed)


def _init_model(data: TrainSimData, config: TrainSimConfig) -> SimModel:
    d_in = data.train.vectors.shape[1]
    rng = derive_rng(config.seed, "trainsim-init")
    backbone = rng.standard_normal((config.hidden_dim, d_in)) / math.sqrt(d_in)
    feature_w = rng.standard_normal(
        (config.feature_dim, config.hidden_dim)) / math.sqrt(config.hidden_dim)
    feature_b = np.zeros(config.feature_dim)
    class_ids = tuple(sorted(set(data.train.classes)))
    classifier_w = rng.standard_normal(
        (len(class_ids), config.feature_dim)) / math.sqrt(config.feature_dim)
    classifier_b = np.zeros(len(class_ids))
    return SimModel(backbone, feature_w, feature_b, classifier_w,
                    classifier_b, class_ids)


def train_sim(data: TrainSimData, config: TrainSimConfig) -> TrainSimResult:
    """Fine-tune the simulator and report retrieval accuracy before/after."""
    model = _init_model(data, config)
    class_pos = {c: i for i, c in enumerate(model.class_ids)}
    unknown = sorted(set(data.val.classes + data.test.classes) - set(model.class_ids))
    if unknown:
        raise DataError(f"val/test classes missing from train: {unknown[:5]}")
    labels = np.array([class_pos[c] for c in data.train.classes], dtype=np.int64)
    counts: dict[str, int] = {}
    for c in data.train.classes:
        counts[c] = counts.get(c, 0) + 1
    weight_map = wce_weights(counts)
    class_weights = np.array([weight_map[c] for c in model.class_ids])

    before = {"seen": _seen_report(model, data, config, "before"),
              "unseen": _unseen_report(model, data, config, "before")}

    scheduler = PlateauScheduler(
        lr=config.base_lr, factor=config.plateau_factor,
        patience=config.patience, delta=config.plateau_delta,
        floor=config.lr_floor)
    params = [model.feature_w, model.feature_b,
              model.classifier_w, model.classifier_b]
    if not config.freeze_backbone:
        params.append(model.backbone)
    adam = _Adam([p.shape for p in params])
    batch_rng = derive_rng(config.seed, "trainsim-batches")
    drop_rng = derive_rng(config.seed, "trainsim-dropout")
    n_train = len(data.train)
    log: list[EpochLog] = []

    for epoch in range(config.epochs):
        perm = batch_rng.permutation(n_train)
        epoch_loss = 0.0
        for start in range(0, n_train, config.batch_size):
            idx = perm[start:start + config.batch_size]
            xb = data.train.vectors[idx]
            yb = labels[idx]
            hidden = xb @ model.backbone.T
            feats = hidden @ model.feature_w.T + model.feature_b
            if config.dropout > 0.0:
                keep = (drop_rng.random(feats.shape) >= config.dropout)
                mask = keep / (1.0 - config.dropout)
                feats_used = feats * mask
            else:
                mask = None
                feats_used = feats
            logit = feats_used @ model.classifier_w.T + model.classifier_b
            loss, grad_logits = wce_loss(logit, yb, class_weights)
            if config.weight_decay > 0.0:
                loss += 0.5 * config.weight_decay * float(
                    (model.feature_w ** 2).sum())
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"epoch {epoch}: loss is {loss}")
            epoch_loss += loss * len(idx)

            grad_cls_w = grad_logits.T @ feats_used
            grad_cls_b = grad_logits.sum(axis=0)
            grad_feats_used = grad_logits @ model.classifier_w
            grad_feats = (grad_feats_used * mask if mask is not None
                          else grad_feats_used)
            grad_feat_w = grad_feats.T @ hidden
            if config.weight_decay > 0.0:
                grad_feat_w = grad_feat_w + config.weight_decay * model.feature_w
            grad_feat_b = grad_feats.sum(axis=0)
            grads = [grad_feat_w, grad_feat_b, grad_cls_w, grad_cls_b]
            if not config.freeze_backbone:
                grad_hidden = grad_feats @ model.feature_w
                grads.append(grad_hidden.T @ xb)
            adam.step(params, grads, scheduler.lr)

        val_report = evaluate_arrays(
            model.encode(data.val.vectors), data.val.image_ids,
            data.val.classes, data.val.subjects,
            model.encode(data.train.vectors), data.train.classes,
            data.train.subjects, ks=(config.val_metric_k,), exclusion=True,
            seed=config.seed)
        val_metric = val_report.per_k[config.val_metric_k]
        lr_before_step = scheduler.lr
        scheduler.step(val_metric)
        log.append(EpochLog(epoch=epoch, lr=lr_before_step,
                            train_loss=epoch_loss / n_train,
                            val_metric=val_metric))
        if scheduler.converged:
            break

    after = {"seen": _seen_report(model, data, config, "after"),
             "unseen": _unseen_report(model, data, config, "after")}
    return TrainSimResult(model=model, before=before, after=after, log=log)


def write_epoch_log(log: Sequence[EpochLog], stream: IO[str]) -> None:
    stream.write("epoch,lr,train_loss,val_top5_mA\n")
    for row in log:
        stream.write(f"{row.epoch},{row.lr!r},{row.train_loss!r},"
                     f"{row.val_metric!r}\n")


def write_model(model: SimModel, stream: IO[str]) -> None:
    """Dimension-annotated text dump, 9-significant-digit floats."""
    tensors = [("backbone", model.backbone),
               ("feature_w", model.feature_w),
               ("feature_b", model.feature_b[None, :]),
               ("classifier_w", model.classifier_w),
               ("classifier_b", model.classifier_b[None, :])]
    stream.write(f"#model-version={__version__}\n")
    stream.write(f"#classes={','.join(model.class_ids)}\n")
    for name, tensor in tensors:
        stream.write(f"#tensor={name} rows={tensor.shape[0]} cols={tensor.shape[1]}\n")
        for row in tensor:
            stream.write("\t".join(f"{float(v):.9g}" for v in row) + "\n")
