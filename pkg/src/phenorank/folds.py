"""Fold assignment and gallery construction for the three gallery modes.

Folds are assigned at subject (patient) level: within each class the
subjects are shuffled by seed and dealt round-robin from a random
starting fold, so every class with two or more subjects spans at least
two folds and no test subject can ever meet their own images in the
gallery.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from .embedio import EmbeddingSet
from .ensemble import VariantKey
from .errors import (
    ConfigInvalid,
    DataError,
    EmptyFold,
    SingletonClass,
    SplitMetadataMissing,
)
from .evaluation import (
    DEFAULT_K,
    EvaluationReport,
    evaluate,
    report_from_ranks,
)
from .rng import derive_rng

GALLERY_MODES = ("frequent", "rare_cv", "unified")


@dataclass(frozen=True)
class GalleryConfig:
    mode: str
    held_fold: int | None = None
    exclusion: bool = True

    def __post_init__(self):
        if self.mode not in GALLERY_MODES:
            raise ConfigInvalid(f"unknown gallery mode {self.mode!r}")
        if self.mode == "rare_cv" and self.held_fold is None:
            raise ConfigInvalid("rare_cv mode requires held_fold")
        if self.mode == "frequent" and self.held_fold is not None:
            raise ConfigInvalid("frequent mode takes no held_fold")


@dataclass(frozen=True)
class FoldAssignment:
    assignment: dict[str, int]  # subject_id -> fold
    n_folds: int
    seed: int

    def subjects_in(self, fold: int) -> list[str]:
        return sorted(s for s, f in self.assignment.items() if f == fold)


def assign_folds(subjects_by_class: Mapping[str, Sequence[str]],
                 n_folds: int, seed: int) -> FoldAssignment:
    """Seeded subject-level fold assignment, round-robin within class."""
    if n_folds < 2:
        raise ConfigInvalid(f"n_folds must be >= 2, got {n_folds}")
    rng = derive_rng(seed, "fold-assignment")
    assignment: dict[str, int] = {}
    for class_id in sorted(subjects_by_class):
        subjects = sorted(set(subjects_by_class[class_id]))
        if len(subjects) < 2:
            raise SingletonClass(
                f"class {class_id} has {len(subjects)} subject(s); need >= 2")
        for subject in subjects:
            if subject in assignment:
                raise DataError(f"subject {subject} appears in multiple classes")
        order = rng.permutation(len(subjects))
        offset = int(rng.integers(n_folds))
        for i, pos in enumerate(order):
            assignment[subjects[pos]] = (offset + i) % n_folds
    return FoldAssignment(assignment, n_folds, seed)


def subjects_by_class(embedding_set: EmbeddingSet) -> dict[str, list[str]]:
    out: dict[str, dict[str, None]] = {}
    for rec in embedding_set.records:
        out.setdefault(rec.class_id, {}).setdefault(rec.subject_id)
    return {c: list(subs) for c, subs in out.items()}


def _filter(embedding_set: EmbeddingSet, keep) -> EmbeddingSet:
    indices = [i for i, rec in enumerate(embedding_set.records) if keep(rec)]
    return embedding_set.subset(indices)


def build_gallery(frequent_set: EmbeddingSet | None,
                  rare_set: EmbeddingSet | None,
                  folds: FoldAssignment | None,
                  config: GalleryConfig,
                  splits: Mapping[str, str] | None = None,
                  test_source: str = "both",
                  ) -> tuple[EmbeddingSet, EmbeddingSet]:
    """Materialize (gallery, test) sets for one gallery configuration.

    ``splits`` maps image_id to a label in {train, val, test} and is
    required whenever the frequent side participates.  ``test_source``
    only applies to unified mode: 'frequent', 'rare' or 'both'.
    """
    def frequent_split(label: str) -> EmbeddingSet:
        if frequent_set is None:
            raise DataError("frequent mode requires a frequent set")
        if splits is None:
            raise SplitMetadataMissing("frequent gallery requires a split map")
        for rec in frequent_set.records:
            if rec.image_id not in splits:
                raise SplitMetadataMissing(
                    f"image {rec.image_id} has no split label")
        return _filter(frequent_set, lambda r: splits[r.image_id] == label)

    def rare_parts(held: int) -> tuple[EmbeddingSet, EmbeddingSet]:
        if rare_set is None:
            raise DataError("CV modes require a rare set")
        if folds is None:
            raise DataError("CV modes require a fold assignment")
        if not 0 <= held < folds.n_folds:
            raise ConfigInvalid(
                f"held_fold {held} out of range [0, {folds.n_folds})")
        for rec in rare_set.records:
            if rec.subject_id not in folds.assignment:
                raise DataError(f"subject {rec.subject_id} has no fold")
        test = _filter(rare_set, lambda r: folds.assignment[r.subject_id] == held)
        if len(test) == 0:
            raise EmptyFold(f"fold {held} holds no test images")
        gallery = _filter(rare_set, lambda r: folds.assignment[r.subject_id] != held)
        if len(gallery) == 0:
            raise EmptyFold(f"all images sit in held fold {held}")
        return gallery, test

    if config.mode == "frequent":
        return frequent_split("train"), frequent_split("test")
    if config.mode == "rare_cv":
        return rare_parts(config.held_fold)
    # unified
    if test_source not in ("frequent", "rare", "both"):
        raise ConfigInvalid(f"unknown test_source {test_source!r}")
    gallery_parts: list[EmbeddingSet] = []
    test_parts: list[EmbeddingSet] = []
    if frequent_set is not None and len(frequent_set):
        gallery_parts.append(frequent_split("train"))
        if test_source in ("frequent", "both"):
            test_parts.append(frequent_split("test"))
    if rare_set is not None and len(rare_set):
        if config.held_fold is not None:
            rare_gallery, rare_test = rare_parts(config.held_fold)
            gallery_parts.append(rare_gallery)
            if test_source in ("rare", "both"):
                test_parts.append(rare_test)
        else:
            gallery_parts.append(rare_set)
    if not gallery_parts:
        raise DataError("unified mode produced an empty gallery")
    if not test_parts:
        raise DataError(f"unified mode with test_source={test_source!r} "
                        "produced an empty test set")
    return _concat(gallery_parts), _concat(test_parts)


def _concat(parts: Sequence[EmbeddingSet]) -> EmbeddingSet:
    dims = {p.dimension for p in parts}
    if len(dims) != 1:
        raise DataError(f"cannot merge sets with dimensions {sorted(dims)}")
    records = [r for p in parts for r in p.records]
    return EmbeddingSet(parts[0].dimension, records, parts[0].metadata)


@dataclass
class CVResult:
    pooled: EvaluationReport
    per_fold: list[EvaluationReport]
    assignment: FoldAssignment


def run_cv(rare_set: EmbeddingSet, frequent_set: EmbeddingSet | None = None,
           n_folds: int = 10, mode: str = "rare_cv", exclusion: bool = True,
           ks: Sequence[int] = DEFAULT_K, seed: int = 0,
           folds: FoldAssignment | None = None,
           declared_variants: Sequence[VariantKey] | None = None,
           policy: str = "strict", nn_k: int = 1,
           splits: Mapping[str, str] | None = None,
           test_source: str = "rare") -> CVResult:
    """Evaluate every held fold and pool per-class hits before averaging.

    Each class's test images accumulate across all folds, then its
    accuracy is computed once, so classes spanning several folds are not
    double-counted.  Folds without test subjects are skipped (their
    subjects still appear in other folds' galleries).
    """
    if mode not in ("rare_cv", "unified"):
        raise ConfigInvalid(f"run_cv supports rare_cv/unified, got {mode!r}")
    if folds is None:
        folds = assign_folds(subjects_by_class(rare_set), n_folds, seed)
    elif folds.n_folds != n_folds:
        raise ConfigInvalid(f"fold assignment has {folds.n_folds} folds, "
                            f"expected {n_folds}")
    per_fold: list[EvaluationReport] = []
    pooled_ids: list[str] = []
    pooled_classes: list[str] = []
    pooled_ranks: list[int] = []
    pooled_t1c: list[str] = []
    pooled_t1s: list[float] = []
    pooled_gallery_classes: set[str] = set()
    for fold in range(folds.n_folds):
        config = GalleryConfig(mode=mode, held_fold=fold, exclusion=exclusion)
        try:
            gallery, test = build_gallery(frequent_set, rare_set, folds,
                                          config, splits=splits,
                                          test_source=test_source)
        except EmptyFold:
            continue
        report = evaluate(test, gallery, config=config, ks=ks,
                          declared_variants=declared_variants, policy=policy,
                          nn_k=nn_k, seed=seed)
        per_fold.append(report)
        for row in report.per_image:
            pooled_ids.append(row.image_id)
            pooled_classes.append(row.true_class)
            pooled_ranks.append(row.rank_of_truth)
            pooled_t1c.append(row.top1_class)
            pooled_t1s.append(row.top1_score)
        pooled_gallery_classes.update(
            rec.class_id for rec in gallery.records)
    if not per_fold:
        raise EmptyFold("no fold produced any test images")
    echo = dict(per_fold[0].config)
    echo.update({"held_fold": None, "n_folds": folds.n_folds, "pooled": True,
                 "fold_level": "subject", "test_source": test_source})
    pooled = report_from_ranks(pooled_ids, pooled_classes, pooled_ranks,
                               pooled_t1c, pooled_t1s, ks,
                               sorted(pooled_gallery_classes), echo, seed)
    return CVResult(pooled=pooled, per_fold=per_fold, assignment=folds)


def folds_from_splits(splits: Mapping[str, str],
                      embedding_set: EmbeddingSet, seed: int = 0) -> FoldAssignment:
    """Reconstruct a subject-level FoldAssignment from fold<N> split labels."""
    assignment: dict[str, int] = {}
    n_folds = 0
    for rec in embedding_set.records:
        label = splits.get(rec.image_id)
        if label is None:
            raise SplitMetadataMissing(f"image {rec.image_id} has no split label")
        if not label.startswith("fold"):
            raise DataError(f"image {rec.image_id} carries non-fold label {label!r}")
        fold = int(label[4:])
        n_folds = max(n_folds, fold + 1)
        prev = assignment.setdefault(rec.subject_id, fold)
        if prev != fold:
            raise DataError(f"subject {rec.subject_id} spans folds {prev} and {fold}")
    if n_folds < 2:
        raise DataError("split map defines fewer than 2 folds")
    return FoldAssignment(assignment, n_folds, seed)
