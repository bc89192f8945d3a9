"""Disorder-level ranking and top-k mean accuracy.

Each disorder is scored by its nearest gallery image (1-NN collapse by
default), disorders are ranked by ascending score with lexicographic
class-id tie-breaks, and accuracy averages per class first so that
every disorder carries equal weight regardless of its image count:

    mA_k = (1/C) * sum_c A_{k,c}
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import IO, Mapping, Sequence

import numpy as np

from . import __version__
from .embedio import EmbeddingSet
from .ensemble import (
    AggregatedDistances,
    MissingVariantPolicy,
    VariantKey,
    aggregate_matrix,
    default_variants,
    group_variants,
)
from .errors import (
    ConfigInvalid,
    DataError,
    DimensionMismatch,
    EmptyGallery,
    EmptyGalleryAfterExclusion,
    NoTestImages,
)

DEFAULT_K = (1, 5, 10, 30)


@dataclass(frozen=True)
class GalleryEntry:
    image_id: str
    subject_id: str
    class_id: str

    def __post_init__(self):
        if not self.class_id:
            raise DataError(f"gallery image {self.image_id} has empty class_id")


@dataclass(frozen=True)
class DisorderRanking:
    """Disorders ordered by ascending score for one test image."""

    entries: tuple[tuple[str, float], ...]
    test_image_id: str

    def rank_of(self, class_id: str) -> int:
        """1-based rank of a disorder, or 0 when absent."""
        for pos, (cid, _) in enumerate(self.entries, start=1):
            if cid == class_id:
                return pos
        return 0


def collapse_to_disorders(agg: AggregatedDistances,
                          gallery: Sequence[GalleryEntry],
                          exclude_subject: str | None = None,
                          nn_k: int = 1) -> DisorderRanking:
    """Collapse per-image distances to a per-disorder ranking.

    Images of ``exclude_subject`` are dropped before scoring; each
    disorder is scored by the mean of its ``nn_k`` nearest remaining
    images (plain minimum for the default nn_k=1).
    """
    if len(gallery) != len(agg.values):
        raise DataError(f"gallery length {len(gallery)} != distance vector "
                        f"length {len(agg.values)}")
    if nn_k < 1:
        raise ConfigInvalid(f"nn_k must be >= 1, got {nn_k}")
    per_class: dict[str, list[float]] = {}
    for entry, value in zip(gallery, agg.values):
        if exclude_subject is not None and entry.subject_id == exclude_subject:
            continue
        per_class.setdefault(entry.class_id, []).append(float(value))
    if not per_class:
        raise EmptyGalleryAfterExclusion(
            f"no gallery images left for test image {agg.test_image_id}")
    scored = []
    for class_id, values in per_class.items():
        values.sort()
        take = values[:nn_k]
        scored.append((class_id, sum(take) / len(take)))
    scored.sort(key=lambda item: (item[1], item[0]))
    return DisorderRanking(tuple(scored), agg.test_image_id)


def topk_hit(ranking: DisorderRanking, true_class: str, k: int) -> bool:
    """True iff the true disorder appears among the first k entries."""
    if k < 1:
        raise ConfigInvalid(f"k must be >= 1, got {k}")
    rank = ranking.rank_of(true_class)
    return 0 < rank <= k


def mean_accuracy(hits: Mapping[str, Sequence[bool]]) -> float:
    """Equal-class-weight mean of per-class hit fractions."""
    if not hits:
        raise NoTestImages("no classes with test images")
    accs = []
    for class_id in sorted(hits):
        class_hits = hits[class_id]
        if len(class_hits) == 0:
            raise NoTestImages(f"class {class_id} has no test images")
        accs.append(sum(1 for h in class_hits if h) / len(class_hits))
    return sum(accs) / len(accs)


@dataclass(frozen=True)
class PerImageResult:
    image_id: str
    true_class: str
    rank_of_truth: int  # 1-based; 0 when the true class is absent
    top1_class: str
    top1_score: float


@dataclass
class EvaluationReport:
    per_k: dict[int, float]
    per_class: dict[str, dict[int, float]]
    counts: dict[str, int]
    classes_missing_from_gallery: list[str]
    config: dict
    seed: int | None
    tool_version: str = __version__
    per_image: list[PerImageResult] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "config": self.config,
            "per_k": {str(k): v for k, v in self.per_k.items()},
            "per_class": {c: {str(k): v for k, v in ks.items()}
                          for c, ks in self.per_class.items()},
            "counts": self.counts,
            "classes_missing_from_gallery": self.classes_missing_from_gallery,
            "seed": self.seed,
            "tool_version": self.tool_version,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2) + "\n"

    def write_per_image_csv(self, stream: IO[str]) -> None:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(["image_id", "true_class", "rank_of_truth",
                         "top1_class", "top1_score"])
        for row in self.per_image:
            writer.writerow([row.image_id, row.true_class, row.rank_of_truth,
                             row.top1_class, repr(row.top1_score)])


def _rank_core(values: np.ndarray, gallery_classes: Sequence[str],
               gallery_subjects: Sequence[str],
               test_classes: Sequence[str], test_subjects: Sequence[str],
               exclusion: bool, nn_k: int
               ) -> tuple[list[int], list[str], list[float]]:
    """Per test row: 1-based rank of the true class (0 = absent), top-1
    class and score.  Exclusion removes gallery images sharing the test
    image's subject before scoring."""
    n_t, n_g = values.shape
    g_classes = np.asarray(gallery_classes)
    unique_classes, class_codes = np.unique(g_classes, return_inverse=True)
    n_c = len(unique_classes)
    class_pos = {c: i for i, c in enumerate(unique_classes)}

    g_subjects = np.asarray(gallery_subjects)
    unique_subjects, subject_codes = np.unique(g_subjects, return_inverse=True)
    subject_pos = {s: i for i, s in enumerate(unique_subjects)}

    order = np.argsort(class_codes, kind="stable")
    sorted_codes = class_codes[order]
    starts = np.flatnonzero(np.r_[True, sorted_codes[1:] != sorted_codes[:-1]])
    codes_at_starts = sorted_codes[starts]
    subject_codes_ordered = subject_codes[order]

    ranks: list[int] = []
    top1_class: list[str] = []
    top1_score: list[float] = []
    for i in range(n_t):
        row = values[i, order].astype(np.float64, copy=True)
        if exclusion:
            t_code = subject_pos.get(test_subjects[i], -1)
            if t_code >= 0:
                row[subject_codes_ordered == t_code] = np.inf
        scores = np.full(n_c, np.inf)
        if nn_k == 1:
            scores[codes_at_starts] = np.minimum.reduceat(row, starts)
        else:
            bounds = np.r_[starts, len(row)]
            for b in range(len(starts)):
                seg = np.sort(row[bounds[b]:bounds[b + 1]])
                seg = seg[np.isfinite(seg)]
                if len(seg):
                    take = seg[:nn_k]
                    scores[codes_at_starts[b]] = take.sum() / len(take)
        finite = np.isfinite(scores)
        if not finite.any():
            raise EmptyGalleryAfterExclusion(
                f"no gallery images left for test image index {i}")
        sorted_classes = np.argsort(scores, kind="stable")
        sorted_classes = sorted_classes[finite[sorted_classes]]
        true_pos = class_pos.get(test_classes[i], -1)
        if true_pos >= 0 and finite[true_pos]:
            rank = int(np.nonzero(sorted_classes == true_pos)[0][0]) + 1
        else:
            rank = 0
        ranks.append(rank)
        best = int(sorted_classes[0])
        top1_class.append(str(unique_classes[best]))
        top1_score.append(float(scores[best]))
    return ranks, top1_class, top1_score


def report_from_ranks(image_ids: Sequence[str], test_classes: Sequence[str],
                      ranks: Sequence[int], top1_class: Sequence[str],
                      top1_score: Sequence[float], ks: Sequence[int],
                      gallery_classes: Sequence[str], config: dict,
                      seed: int | None) -> EvaluationReport:
    """Assemble an EvaluationReport from per-image truth ranks."""
    ks = tuple(ks)
    if not ks or any(k < 1 for k in ks):
        raise ConfigInvalid(f"K list must be non-empty positive, got {ks}")
    hits_by_class: dict[str, list[int]] = {}
    for cls, rank in zip(test_classes, ranks):
        hits_by_class.setdefault(cls, []).append(rank)
    if not hits_by_class:
        raise NoTestImages("no test images")
    counts = {c: len(v) for c, v in sorted(hits_by_class.items())}
    per_class: dict[str, dict[int, float]] = {}
    for c in sorted(hits_by_class):
        class_ranks = hits_by_class[c]
        per_class[c] = {
            k: sum(1 for r in class_ranks if 0 < r <= k) / len(class_ranks)
            for k in ks}
    per_k = {k: sum(per_class[c][k] for c in sorted(per_class)) / len(per_class)
             for k in ks}
    gallery_set = set(gallery_classes)
    missing = sorted(c for c in hits_by_class if c not in gallery_set)
    per_image = [PerImageResult(i, c, r, t1, s1) for i, c, r, t1, s1 in
                 zip(image_ids, test_classes, ranks, top1_class, top1_score)]
    return EvaluationReport(per_k=per_k, per_class=per_class, counts=counts,
                            classes_missing_from_gallery=missing,
                            config=config, seed=seed, per_image=per_image)


def evaluate_arrays(test_vectors: np.ndarray, test_ids: Sequence[str],
                    test_classes: Sequence[str], test_subjects: Sequence[str],
                    gallery_vectors: np.ndarray, gallery_classes: Sequence[str],
                    gallery_subjects: Sequence[str],
                    ks: Sequence[int] = DEFAULT_K, exclusion: bool = True,
                    nn_k: int = 1, config: dict | None = None,
                    seed: int | None = None) -> EvaluationReport:
    """Single-channel evaluation over raw (unnormalized) vector arrays."""
    from .distance import normalize_rows

    if gallery_vectors.shape[0] == 0:
        raise EmptyGallery("gallery holds no images")
    if test_vectors.shape[1] != gallery_vectors.shape[1]:
        raise DimensionMismatch(
            f"test dim {test_vectors.shape[1]} != gallery dim {gallery_vectors.shape[1]}")
    from . import backend

    values = backend.clamped_distance_matrix(
        normalize_rows(test_vectors), normalize_rows(gallery_vectors))
    ranks, t1c, t1s = _rank_core(values, gallery_classes, gallery_subjects,
                                 test_classes, test_subjects, exclusion, nn_k)
    return report_from_ranks(test_ids, test_classes, ranks, t1c, t1s, ks,
                             gallery_classes, config or {}, seed)


def evaluate(test_set: EmbeddingSet, gallery_set: EmbeddingSet,
             config=None, ks: Sequence[int] = DEFAULT_K,
             declared_variants: Sequence[VariantKey] | None = None,
             policy: MissingVariantPolicy = "strict", nn_k: int = 1,
             seed: int | None = None,
             config_extra: dict | None = None) -> EvaluationReport:
    """Full pipeline: aggregate channels, collapse to disorders, score.

    ``config`` is an optional GalleryConfig-like object providing an
    ``exclusion`` flag (defaults to on) and is echoed into the report.
    """
    if test_set.dimension != gallery_set.dimension:
        raise DimensionMismatch(
            f"test dim {test_set.dimension} != gallery dim {gallery_set.dimension}")
    if len(test_set) == 0:
        raise NoTestImages("test set holds no records")
    if len(gallery_set) == 0:
        raise EmptyGallery("gallery set holds no records")
    declared = (tuple(declared_variants) if declared_variants
                else default_variants(gallery_set))
    test_index = group_variants(test_set, declared)
    gallery_index = group_variants(gallery_set, declared)
    values, _ = aggregate_matrix(test_index, gallery_index, policy=policy)

    exclusion = bool(getattr(config, "exclusion", True))
    test_classes = [test_index.classes[i] for i in test_index.image_ids]
    test_subjects = [test_index.subjects[i] for i in test_index.image_ids]
    gallery_classes = [gallery_index.classes[i] for i in gallery_index.image_ids]
    gallery_subjects = [gallery_index.subjects[i] for i in gallery_index.image_ids]
    for image_id, class_id in gallery_index.classes.items():
        if not class_id:
            raise DataError(f"gallery image {image_id} has empty class_id")

    ranks, t1c, t1s = _rank_core(values, gallery_classes, gallery_subjects,
                                 test_classes, test_subjects, exclusion, nn_k)
    echo = {
        "mode": getattr(config, "mode", None),
        "held_fold": getattr(config, "held_fold", None),
        "exclusion": exclusion,
        "policy": policy,
        "nn_k": nn_k,
        "k": list(ks),
        "variants": [str(v) for v in declared],
        "n_test_images": len(test_index),
        "n_gallery_images": len(gallery_index),
        "backend": _backend_name(),
    }
    if config_extra:
        echo.update(config_extra)
    return report_from_ranks(test_index.image_ids, test_classes, ranks,
                             t1c, t1s, ks, gallery_classes, echo, seed)


def _backend_name() -> str:
    from . import backend

    return backend.active_backend()
