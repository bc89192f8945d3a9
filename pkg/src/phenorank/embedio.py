"""Canonical embedding file format: parsing, validation, writing.

A file is UTF-8 text with LF line endings:

* line 1: ``#dim=<D>``
* optional ``#<key>=<value>`` provenance lines
* header: ``image_id<TAB>subject_id<TAB>class_id<TAB>model_id<TAB>tta_tag<TAB>v0...v{D-1}``
* one record per line: five metadata columns, then D values with a
  ``.`` decimal separator.

Values are serialized with 9 significant digits, which round-trips
32-bit floats exactly; vectors are stored as float32 and promoted to
float64 for computation elsewhere.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping

import numpy as np

from .errors import (
    DataError,
    DuplicateKey,
    IoFailure,
    MalformedHeader,
    MalformedRow,
)

TTA_TAGS = ("orig", "flip", "gray", "gray-flip")

_DIM_RE = re.compile(r"^#dim=(\d+)$")
_META_RE = re.compile(r"^#([A-Za-z0-9_.\-]+)=(.*)$")
_META_COLUMNS = ("image_id", "subject_id", "class_id", "model_id", "tta_tag")


def _header_line(dimension: int) -> str:
    return "\t".join(_META_COLUMNS + tuple(f"v{i}" for i in range(dimension)))


@dataclass(frozen=True)
class EmbeddingRecord:
    """One representation vector for a single (image, model, TTA) channel."""

    image_id: str
    subject_id: str
    class_id: str
    model_id: str
    tta_tag: str
    vector: np.ndarray  # float32, shape (d,)

    def key(self) -> tuple[str, str, str]:
        return (self.image_id, self.model_id, self.tta_tag)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingRecord):
            return NotImplemented
        return (self.image_id == other.image_id
                and self.subject_id == other.subject_id
                and self.class_id == other.class_id
                and self.model_id == other.model_id
                and self.tta_tag == other.tta_tag
                and self.vector.shape == other.vector.shape
                and bool(np.array_equal(self.vector, other.vector)))

    __hash__ = None  # type: ignore[assignment]


class EmbeddingSet:
    """A dimension-tagged collection of records plus free-form provenance."""

    def __init__(self, dimension: int, records: Iterable[EmbeddingRecord] = (),
                 metadata: Mapping[str, str] | None = None):
        if dimension <= 0:
            raise DataError(f"dimension must be positive, got {dimension}")
        self.dimension = int(dimension)
        self.records: list[EmbeddingRecord] = list(records)
        self.metadata: dict[str, str] = dict(metadata or {})
        self._matrix: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingSet):
            return NotImplemented
        return (self.dimension == other.dimension
                and self.metadata == other.metadata
                and self.records == other.records)

    def matrix(self) -> np.ndarray:
        """All vectors stacked to (n, dimension) float32; raises on ragged data."""
        if self._matrix is None:
            for i, rec in enumerate(self.records):
                if rec.vector.shape != (self.dimension,):
                    raise DataError(
                        f"record {i} ({rec.image_id}) has vector length "
                        f"{rec.vector.shape}, expected ({self.dimension},)")
            if self.records:
                self._matrix = np.stack([r.vector for r in self.records]).astype(np.float32)
            else:
                self._matrix = np.zeros((0, self.dimension), dtype=np.float32)
        return self._matrix

    def subset(self, indices: Iterable[int]) -> "EmbeddingSet":
        recs = [self.records[i] for i in indices]
        return EmbeddingSet(self.dimension, recs, self.metadata)

    @classmethod
    def from_arrays(cls, dimension: int, image_ids, subject_ids, class_ids,
                    model_ids, tta_tags, vectors: np.ndarray,
                    metadata: Mapping[str, str] | None = None) -> "EmbeddingSet":
        vectors = np.asarray(vectors, dtype=np.float32)
        recs = [EmbeddingRecord(i, s, c, m, t, vectors[n])
                for n, (i, s, c, m, t) in enumerate(
                    zip(image_ids, subject_ids, class_ids, model_ids, tta_tags))]
        out = cls(dimension, recs, metadata)
        out._matrix = vectors
        return out


@dataclass
class ValidationReport:
    """Invariant violations plus per-image variant coverage."""

    errors: list[tuple[str, str]] = field(default_factory=list)
    variant_coverage: dict[str, set[tuple[str, str]]] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.errors

    def missing_variants(self, expected) -> dict[str, list[tuple[str, str]]]:
        """Per image, the expected (model_id, tta_tag) pairs not present."""
        expected = [tuple(v) for v in expected]
        out = {}
        for image_id, present in self.variant_coverage.items():
            missing = [v for v in expected if v not in present]
            if missing:
                out[image_id] = missing
        return out


def parse_embedding_file(stream: IO[str]) -> EmbeddingSet:
    """Parse the canonical format; records preserve file order.

    Raises MalformedHeader, MalformedRow (with the offending line
    number) or DuplicateKey.
    """
    lines = iter(enumerate(stream, start=1))
    try:
        _, first = next(lines)
    except StopIteration:
        raise MalformedHeader("empty stream, expected '#dim=<D>' line")
    m = _DIM_RE.match(first.rstrip("\n"))
    if not m:
        raise MalformedHeader(f"first line must be '#dim=<D>', got {first.rstrip()!r}")
    dimension = int(m.group(1))
    if dimension <= 0:
        raise MalformedHeader(f"dimension must be positive, got {dimension}")

    metadata: dict[str, str] = {}
    header = None
    for line_no, line in lines:
        line = line.rstrip("\n")
        if line.startswith("#"):
            meta = _META_RE.match(line)
            if not meta:
                raise MalformedHeader(f"line {line_no}: bad provenance line {line!r}")
            metadata[meta.group(1)] = meta.group(2)
            continue
        header = line
        header_line_no = line_no
        break
    if header is None:
        raise MalformedHeader("missing column header line")
    if header != _header_line(dimension):
        raise MalformedHeader(
            f"line {header_line_no}: column header does not match dim={dimension}")

    records: list[EmbeddingRecord] = []
    seen: set[tuple[str, str, str]] = set()
    expected_cols = 5 + dimension
    for line_no, line in lines:
        line = line.rstrip("\n")
        if not line:
            raise MalformedRow(line_no, "blank line")
        parts = line.split("\t")
        if len(parts) != expected_cols:
            raise MalformedRow(
                line_no, f"expected {expected_cols} columns, got {len(parts)}")
        image_id, subject_id, class_id, model_id, tta_tag = parts[:5]
        if tta_tag not in TTA_TAGS:
            raise MalformedRow(line_no, f"unknown tta_tag {tta_tag!r}")
        try:
            values = np.array(parts[5:], dtype=np.float64)
        except ValueError:
            bad = next(tok for tok in parts[5:] if not _is_float(tok))
            raise MalformedRow(line_no, f"non-numeric value {bad!r}")
        if not np.all(np.isfinite(values)):
            raise MalformedRow(line_no, "non-finite value")
        key = (image_id, model_id, tta_tag)
        if key in seen:
            raise DuplicateKey(f"line {line_no}: repeated key {key}")
        seen.add(key)
        records.append(EmbeddingRecord(
            image_id, subject_id, class_id, model_id, tta_tag,
            values.astype(np.float32)))
    return EmbeddingSet(dimension, records, metadata)


def _is_float(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def write_embedding_file(embedding_set: EmbeddingSet, stream: IO[str]) -> None:
    """Write the canonical format; byte-reproducible for a given set."""
    for key, value in embedding_set.metadata.items():
        if not _META_RE.match(f"#{key}={value}") or "\n" in value or "\t" in value:
            raise DataError(f"metadata entry {key!r} not representable in file format")
    dim = embedding_set.dimension
    for i, rec in enumerate(embedding_set.records):
        if rec.vector.shape != (dim,):
            raise DataError(f"record {i} has vector length {rec.vector.shape}, "
                            f"expected ({dim},)")
        if not np.all(np.isfinite(rec.vector)):
            raise DataError(f"record {i} ({rec.image_id}) has non-finite values")
        for text in (rec.image_id, rec.subject_id, rec.class_id, rec.model_id):
            if "\t" in text or "\n" in text:
                raise DataError(f"record {i} metadata contains tab/newline")
        if rec.tta_tag not in TTA_TAGS:
            raise DataError(f"record {i} has unknown tta_tag {rec.tta_tag!r}")
    try:
        stream.write(f"#dim={dim}\n")
        for key in sorted(embedding_set.metadata):
            stream.write(f"#{key}={embedding_set.metadata[key]}\n")
        stream.write(_header_line(dim) + "\n")
        for rec in embedding_set.records:
            values = "\t".join(f"{float(v):.9g}" for v in rec.vector)
            stream.write(f"{rec.image_id}\t{rec.subject_id}\t{rec.class_id}\t"
                         f"{rec.model_id}\t{rec.tta_tag}\t{values}\n")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def validate_set(embedding_set: EmbeddingSet, expected_variants=()) -> ValidationReport:
    """Report every invariant violation; never raises on bad data.

    ``expected_variants`` is an iterable of (model_id, tta_tag) pairs;
    coverage lists the pairs actually present per image so missing ones
    can be read off with ``missing_variants``.
    """
    report = ValidationReport()
    seen: set[tuple[str, str, str]] = set()
    image_subject: dict[str, str] = {}
    image_class: dict[str, str] = {}
    for i, rec in enumerate(embedding_set.records):
        locator = f"record {i} ({rec.image_id}, {rec.model_id}, {rec.tta_tag})"
        if rec.vector.shape != (embedding_set.dimension,):
            report.errors.append(
                (locator, f"vector length {rec.vector.shape[0] if rec.vector.ndim == 1 else rec.vector.shape}"
                          f" != dimension {embedding_set.dimension}"))
        elif not np.all(np.isfinite(rec.vector)):
            report.errors.append((locator, "non-finite vector values"))
        elif float(np.linalg.norm(rec.vector.astype(np.float64))) <= 1e-12:
            report.errors.append((locator, "zero vector"))
        if rec.tta_tag not in TTA_TAGS:
            report.errors.append((locator, f"unknown tta_tag {rec.tta_tag!r}"))
        key = rec.key()
        if key in seen:
            report.errors.append((locator, "duplicate (image_id, model_id, tta_tag)"))
        seen.add(key)
        prev_subject = image_subject.setdefault(rec.image_id, rec.subject_id)
        if prev_subject != rec.subject_id:
            report.errors.append((locator, "inconsistent subject_id for image"))
        prev_class = image_class.setdefault(rec.image_id, rec.class_id)
        if prev_class != rec.class_id:
            report.errors.append((locator, "inconsistent class_id for image"))
        report.variant_coverage.setdefault(rec.image_id, set()).add(
            (rec.model_id, rec.tta_tag))
    return report
