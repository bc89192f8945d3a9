"""Variant grouping and matched-channel distance aggregation.

A variant channel is one (model_id, tta_tag) pair.  At inference time a
test embedding of channel v is compared only against gallery embeddings
of the same channel v, and the per-channel distances are averaged with
an unweighted arithmetic mean.  Channels are always summed in canonical
declared order, so the result is bitwise deterministic regardless of
record order or caller-supplied declaration order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Literal

import numpy as np

from . import backend
from .distance import normalize_rows
from .embedio import TTA_TAGS, EmbeddingSet
from .errors import (
    DataError,
    EmptyGallery,
    MissingVariant,
    UnknownVariantTag,
)

_TAG_ORDER = {tag: i for i, tag in enumerate(TTA_TAGS)}

MissingVariantPolicy = Literal["strict", "renormalize"]


@dataclass(frozen=True)
class VariantKey:
    """One of the ensemble channels: (model id, TTA tag)."""

    model_id: str
    tta_tag: str

    def __post_init__(self):
        if self.tta_tag not in _TAG_ORDER:
            raise UnknownVariantTag(f"unknown tta_tag {self.tta_tag!r}")

    def sort_key(self) -> tuple[str, int]:
        return (self.model_id, _TAG_ORDER[self.tta_tag])

    def __str__(self) -> str:
        return f"{self.model_id}:{self.tta_tag}"


def canonical_variants(keys: Iterable[VariantKey]) -> tuple[VariantKey, ...]:
    """Deduplicated keys in canonical (model_id, tag) order."""
    return tuple(sorted(set(keys), key=VariantKey.sort_key))


def default_variants(embedding_set: EmbeddingSet) -> tuple[VariantKey, ...]:
    """All (model, tag) channels present in a set, canonical order."""
    return canonical_variants(
        VariantKey(r.model_id, r.tta_tag) for r in embedding_set.records)


class VariantIndex:
    """Per-image lookup of channel records over a backing EmbeddingSet."""

    def __init__(self, backing: EmbeddingSet, declared: tuple[VariantKey, ...]):
        self.backing = backing
        self.declared = declared
        self.image_ids: list[str] = []
        self.subjects: dict[str, str] = {}
        self.classes: dict[str, str] = {}
        self.slots: dict[str, dict[VariantKey, int]] = {}
        for idx, rec in enumerate(backing.records):
            key = VariantKey(rec.model_id, rec.tta_tag)
            if key not in self._declared_set:
                raise UnknownVariantTag(
                    f"record {idx} ({rec.image_id}) carries undeclared variant {key}")
            if rec.image_id not in self.slots:
                self.image_ids.append(rec.image_id)
                self.slots[rec.image_id] = {}
                self.subjects[rec.image_id] = rec.subject_id
                self.classes[rec.image_id] = rec.class_id
            else:
                if self.subjects[rec.image_id] != rec.subject_id:
                    raise DataError(f"image {rec.image_id} has inconsistent subject_id")
                if self.classes[rec.image_id] != rec.class_id:
                    raise DataError(f"image {rec.image_id} has inconsistent class_id")
            self.slots[rec.image_id][key] = idx
        self._channels: dict[VariantKey, tuple[np.ndarray, np.ndarray]] = {}

    @property
    def _declared_set(self) -> frozenset:
        return frozenset(self.declared)

    def __len__(self) -> int:
        return len(self.image_ids)

    def missing(self) -> list[tuple[str, VariantKey]]:
        """(image_id, variant) pairs absent from the backing set."""
        out = []
        for image_id in self.image_ids:
            present = self.slots[image_id]
            for key in self.declared:
                if key not in present:
                    out.append((image_id, key))
        return out

    def channel(self, key: VariantKey) -> tuple[np.ndarray, np.ndarray]:
        """(mask, matrix) for one channel, rows aligned with image_ids.

        The matrix holds unit float64 rows for present images and zero
        rows elsewhere; the mask marks presence.
        """
        if key not in self._channels:
            matrix = self.backing.matrix()
            n = len(self.image_ids)
            rows = np.full(n, -1, dtype=np.int64)
            for i, image_id in enumerate(self.image_ids):
                idx = self.slots[image_id].get(key)
                if idx is not None:
                    rows[i] = idx
            mask = rows >= 0
            data = np.zeros((n, self.backing.dimension), dtype=np.float64)
            if mask.any():
                data[mask] = normalize_rows(matrix[rows[mask]])
            self._channels[key] = (mask, data)
        return self._channels[key]


def group_variants(embedding_set: EmbeddingSet,
                   declared: Iterable[VariantKey]) -> VariantIndex:
    """Index a set by (image, channel); records outside ``declared`` error."""
    declared = canonical_variants(declared)
    if not declared:
        raise DataError("declared variant list is empty")
    return VariantIndex(embedding_set, declared)


@dataclass(frozen=True)
class AggregatedDistances:
    """Mean matched-channel distances from one test image to a gallery."""

    test_image_id: str
    gallery_image_ids: tuple[str, ...]
    values: np.ndarray
    channels_used: np.ndarray


def aggregate_matrix(test_index: VariantIndex, gallery_index: VariantIndex,
                     policy: MissingVariantPolicy = "strict",
                     tile: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Aggregated distances for every (test image, gallery image) pair.

    Returns (values, channels_used), both (n_test, n_gallery).  Under
    the strict policy every declared channel must be present on both
    sides; under renormalize the mean runs over matched available
    channels and channels_used records how many entered each entry.
    """
    if test_index.declared != gallery_index.declared:
        raise DataError("test and gallery variant declarations differ")
    if len(gallery_index) == 0:
        raise EmptyGallery("gallery holds no images")
    declared = test_index.declared
    n_t, n_g = len(test_index), len(gallery_index)

    if policy not in ("strict", "renormalize"):
        raise DataError(f"unknown policy {policy!r}")
    if policy == "strict":
        for index, side in ((test_index, "test"), (gallery_index, "gallery")):
            missing = index.missing()
            if missing:
                image_id, key = missing[0]
                raise MissingVariant(
                    f"{side} image {image_id} is missing variant {key} "
                    f"({len(missing)} missing in total)")

    acc = np.zeros((n_t, n_g))
    if policy == "strict":
        for key in declared:
            _, t_mat = test_index.channel(key)
            _, g_mat = gallery_index.channel(key)
            acc += backend.clamped_distance_matrix(t_mat, g_mat, tile=tile)
        acc /= len(declared)
        used = np.full((n_t, n_g), len(declared), dtype=np.int64)
        return acc, used

    counts = np.zeros((n_t, n_g), dtype=np.int64)
    for key in declared:
        t_mask, t_mat = test_index.channel(key)
        g_mask, g_mat = gallery_index.channel(key)
        pair = np.outer(t_mask, g_mask)
        if not pair.any():
            continue
        dist = backend.clamped_distance_matrix(t_mat, g_mat, tile=tile)
        acc += np.where(pair, dist, 0.0)
        counts += pair
    if np.any(counts == 0):
        i, j = np.argwhere(counts == 0)[0]
        raise MissingVariant(
            f"no matched channel between test image {test_index.image_ids[i]} "
            f"and gallery image {gallery_index.image_ids[j]}")
    return acc / counts, counts


def aggregate_distances(test_index: VariantIndex, test_image_id: str,
                        gallery_index: VariantIndex,
                        policy: MissingVariantPolicy = "strict") -> AggregatedDistances:
    """Aggregated distance vector from one test image to the whole gallery."""
    if test_image_id not in test_index.slots:
        raise DataError(f"unknown test image {test_image_id!r}")
    sub = test_index.backing.subset(
        sorted(test_index.slots[test_image_id].values()))
    single = VariantIndex(sub, test_index.declared)
    values, used = aggregate_matrix(single, gallery_index, policy=policy)
    return AggregatedDistances(
        test_image_id=test_image_id,
        gallery_image_ids=tuple(gallery_index.image_ids),
        values=values[0],
        channels_used=used[0],
    )
