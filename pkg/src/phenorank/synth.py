"""Deterministic generator of long-tail embedding benchmarks.

Class centers sit uniformly on the unit hypersphere; patients perturb
their center with Gaussian tangent noise, each model applies a small
shared random rotation of the whole space, and every TTA variant adds
its own tangent noise.  Patient counts per disorder follow a truncated
discrete power law whose default exponent reproduces the roughly
45/55 frequent/rare class split of the reference corpus (a class is
"frequent" when it has more than six patients).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from .embedio import TTA_TAGS, EmbeddingSet
from .errors import SpecInvalid
from .folds import FoldAssignment, assign_folds
from .rng import derive_rng


@dataclass(frozen=True)
class LongTailSpec:
    n_disorders: int = 300
    tail_exponent: float = 1.31
    min_patients: int = 2
    max_patients: int = 50
    frequent_threshold: int = 6  # strictly more patients -> frequent
    mean_extra_images: float = 0.25  # images per patient = 1 + Poisson(.)
    dimension: int = 128
    n_models: int = 3
    sigma_class: float = 0.35
    sigma_model: float = 0.12
    sigma_tta: float = 0.12
    train_frac: float = 0.803
    val_frac: float = 0.104
    n_folds: int = 10
    seed: int = 0

    def validate(self) -> None:
        if self.n_disorders < 1:
            raise SpecInvalid("n_disorders must be >= 1")
        if self.min_patients < 2:
            raise SpecInvalid("min_patients must be >= 2")
        if self.max_patients < self.min_patients:
            raise SpecInvalid("max_patients must be >= min_patients")
        if self.dimension < 2:
            raise SpecInvalid("dimension must be >= 2")
        if self.n_models < 1:
            raise SpecInvalid("n_models must be >= 1")
        if min(self.sigma_class, self.sigma_model, self.sigma_tta) < 0:
            raise SpecInvalid("noise sigmas must be >= 0")
        if self.mean_extra_images < 0:
            raise SpecInvalid("mean_extra_images must be >= 0")
        if not 0 < self.train_frac < 1 or not 0 <= self.val_frac < 1:
            raise SpecInvalid("split fractions must lie in (0, 1)")
        if self.train_frac + self.val_frac >= 1:
            raise SpecInvalid("train_frac + val_frac must leave room for test")
        if self.n_folds < 2:
            raise SpecInvalid("n_folds must be >= 2")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_mapping(cls, data: Mapping) -> "LongTailSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise SpecInvalid(f"unknown spec fields: {sorted(unknown)}")
        spec = cls(**data)
        spec.validate()
        return spec


@dataclass
class SyntheticDataset:
    spec: LongTailSpec
    sets_by_model: dict[str, EmbeddingSet]
    splits: dict[str, str]
    class_centers: dict[str, np.ndarray]
    frequent_classes: tuple[str, ...]
    rare_classes: tuple[str, ...]
    folds: FoldAssignment | None


def sample_longtail(spec: LongTailSpec) -> dict[str, int]:
    """Patient counts per disorder from the truncated power law."""
    spec.validate()
    ks = np.arange(spec.min_patients, spec.max_patients + 1, dtype=np.float64)
    probs = ks ** -spec.tail_exponent
    probs /= probs.sum()
    rng = derive_rng(spec.seed, "longtail-counts")
    counts = rng.choice(ks.astype(np.int64), size=spec.n_disorders, p=probs)
    width = max(4, len(str(spec.n_disorders)))
    return {f"c{i:0{width}d}": int(c) for i, c in enumerate(counts)}


def _tangent_noise(rng: np.random.Generator, base: np.ndarray,
                   sigma: float) -> np.ndarray:
    """Perturb unit rows with Gaussian noise in their tangent space."""
    if sigma == 0.0:
        return base.copy()
    noise = sigma * rng.standard_normal(base.shape)
    noise -= (noise * base).sum(axis=1, keepdims=True) * base
    out = base + noise
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def _small_rotation(rng: np.random.Generator, dim: int,
                    sigma: float) -> np.ndarray:
    """Orthogonal matrix near identity via the Cayley transform."""
    if sigma == 0.0:
        return np.eye(dim)
    a = rng.standard_normal((dim, dim))
    skew = sigma * (a - a.T) / np.sqrt(2.0 * dim)
    eye = np.eye(dim)
    return np.linalg.solve(eye + skew, eye - skew)


def generate_dataset(spec: LongTailSpec) -> SyntheticDataset:
    """Full multi-model, all-TTA dataset with split labels; seed-deterministic."""
    spec.validate()
    counts = sample_longtail(spec)
    class_ids = sorted(counts)
    centers_rng = derive_rng(spec.seed, "class-centers")
    centers = centers_rng.standard_normal((len(class_ids), spec.dimension))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    class_centers = {c: centers[i] for i, c in enumerate(class_ids)}
    frequent = tuple(c for c in class_ids
                     if counts[c] > spec.frequent_threshold)
    rare = tuple(c for c in class_ids if counts[c] <= spec.frequent_threshold)

    patient_rng = derive_rng(spec.seed, "patients")
    image_count_rng = derive_rng(spec.seed, "image-counts")
    split_rng = derive_rng(spec.seed, "splits")

    image_ids: list[str] = []
    image_subjects: list[str] = []
    image_classes: list[str] = []
    image_vectors: list[np.ndarray] = []
    subjects_of_class: dict[str, list[str]] = {c: [] for c in class_ids}
    subject_split: dict[str, str] = {}
    subject_counter = 0

    for c_idx, class_id in enumerate(class_ids):
        n_patients = counts[class_id]
        base = np.broadcast_to(centers[c_idx], (n_patients, spec.dimension))
        patient_vectors = _tangent_noise(patient_rng, np.array(base),
                                         spec.sigma_class)
        subject_ids = []
        for p in range(n_patients):
            subject_id = f"p{subject_counter:06d}"
            subject_counter += 1
            subject_ids.append(subject_id)
            subjects_of_class[class_id].append(subject_id)
            n_images = 1 + int(image_count_rng.poisson(spec.mean_extra_images))
            for j in range(n_images):
                image_ids.append(f"{subject_id}-i{j}")
                image_subjects.append(subject_id)
                image_classes.append(class_id)
                image_vectors.append(patient_vectors[p])
        if class_id in frequent:
            order = split_rng.permutation(n_patients)
            n_train = max(1, round(spec.train_frac * n_patients))
            n_test = max(1, round((1.0 - spec.train_frac - spec.val_frac)
                                  * n_patients))
            n_train = min(n_train, n_patients - n_test)
            for rank, pos in enumerate(order):
                if rank < n_train:
                    subject_split[subject_ids[pos]] = "train"
                elif rank < n_patients - n_test:
                    subject_split[subject_ids[pos]] = "val"
                else:
                    subject_split[subject_ids[pos]] = "test"

    folds = None
    if rare:
        rare_subjects = {c: subjects_of_class[c] for c in rare}
        folds = assign_folds(rare_subjects, spec.n_folds,
                             derive_rng(spec.seed, "fold-seed").integers(2**32))
        for subject, fold in folds.assignment.items():
            subject_split[subject] = f"fold{fold}"
    splits = {image_id: subject_split[subject]
              for image_id, subject in zip(image_ids, image_subjects)}

    base_matrix = np.stack(image_vectors) if image_vectors else np.zeros(
        (0, spec.dimension))
    rotation_rng = derive_rng(spec.seed, "model-rotations")
    tta_rng = derive_rng(spec.seed, "tta-noise")
    sets_by_model: dict[str, EmbeddingSet] = {}
    n_images = len(image_ids)
    for m in range(spec.n_models):
        model_id = f"m{m}"
        rotation = _small_rotation(rotation_rng, spec.dimension, spec.sigma_model)
        model_matrix = base_matrix @ rotation.T
        all_ids: list[str] = []
        all_subjects: list[str] = []
        all_classes: list[str] = []
        all_models: list[str] = []
        all_tags: list[str] = []
        blocks: list[np.ndarray] = []
        for tag in TTA_TAGS:
            blocks.append(_tangent_noise(tta_rng, model_matrix, spec.sigma_tta))
            all_ids.extend(image_ids)
            all_subjects.extend(image_subjects)
            all_classes.extend(image_classes)
            all_models.extend([model_id] * n_images)
            all_tags.extend([tag] * n_images)
        vectors = np.concatenate(blocks, axis=0).astype(np.float32) if blocks \
            else np.zeros((0, spec.dimension), dtype=np.float32)
        metadata = {
            "dataset": "synthetic-longtail",
            "generator-seed": str(spec.seed),
            "model": model_id,
        }
        sets_by_model[model_id] = EmbeddingSet.from_arrays(
            spec.dimension, all_ids, all_subjects, all_classes,
            all_models, all_tags, vectors, metadata)

    return SyntheticDataset(
        spec=spec, sets_by_model=sets_by_model, splits=splits,
        class_centers=class_centers, frequent_classes=frequent,
        rare_classes=rare, folds=folds)
