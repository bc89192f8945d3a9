import math

import numpy as np
import pytest

from phenorank.embedio import TTA_TAGS, EmbeddingRecord, EmbeddingSet
from phenorank.ensemble import (
    VariantKey,
    aggregate_distances,
    aggregate_matrix,
    canonical_variants,
    default_variants,
    group_variants,
)
from phenorank.errors import (
    DataError,
    EmptyGallery,
    MissingVariant,
    UnknownVariantTag,
)

MODELS = ("m0", "m1", "m2")
ALL_12 = canonical_variants(
    VariantKey(m, t) for m in MODELS for t in TTA_TAGS)


def rec(image, subject, cls, model, tag, vector):
    return EmbeddingRecord(image, subject, cls, model, tag,
                           np.asarray(vector, dtype=np.float32))


def angle_vector(theta):
    return [math.cos(theta), math.sin(theta)]


def single_channel_distance(u, v):
    """Clamped cosine distance after float32 storage quantization."""
    from phenorank.distance import l2_normalize
    uq = l2_normalize(np.asarray(u, dtype=np.float32).astype(np.float64))
    vq = l2_normalize(np.asarray(v, dtype=np.float32).astype(np.float64))
    return min(2.0, max(0.0, 1.0 - float(uq @ vq)))


def full_set(images, vector_of, models=MODELS, tags=TTA_TAGS, dim=2):
    """All channels present; vector_of(image, model, tag) -> vector."""
    records = []
    for image, subject, cls in images:
        for model in models:
            for tag in tags:
                records.append(rec(image, subject, cls, model, tag,
                                   vector_of(image, model, tag)))
    return EmbeddingSet(dim, records)


class TestGroupVariants:
    def test_single_image_all_12(self):
        es = full_set([("i1", "s1", "c1")], lambda *_: [1.0, 0.0])
        index = group_variants(es, ALL_12)
        assert len(index.slots["i1"]) == 12

    def test_undeclared_model_rejected(self):
        es = EmbeddingSet(2, [rec("i1", "s1", "c1", "mX", "orig", [1.0, 0.0])])
        with pytest.raises(UnknownVariantTag):
            group_variants(es, ALL_12)

    def test_counting_24_references(self):
        es = full_set([("i1", "s1", "c1"), ("i2", "s2", "c2")],
                      lambda *_: [0.0, 1.0])
        index = group_variants(es, ALL_12)
        assert sum(len(v) for v in index.slots.values()) == 24

    def test_empty_declared(self):
        es = EmbeddingSet(2)
        with pytest.raises(DataError):
            group_variants(es, [])

    def test_inconsistent_class_rejected(self):
        es = EmbeddingSet(2, [
            rec("i1", "s1", "c1", "m0", "orig", [1.0, 0.0]),
            rec("i1", "s1", "c2", "m0", "flip", [1.0, 0.0])])
        with pytest.raises(DataError):
            group_variants(es, ALL_12)


class TestAggregate:
    def gallery_index(self, vector_of, images=(("g1", "s9", "cA"),)):
        return group_variants(full_set(list(images), vector_of), ALL_12)

    def test_constant_channels(self):
        # every channel sees the same 0.37 distance
        theta = math.acos(1.0 - 0.37)
        test = group_variants(
            full_set([("t1", "sp", "cA")], lambda *_: angle_vector(0.0)),
            ALL_12)
        gallery = self.gallery_index(lambda *_: angle_vector(theta))
        agg = aggregate_distances(test, "t1", gallery)
        # vectors are stored as float32, so the target is the quantized 0.37
        single = single_channel_distance(angle_vector(0.0), angle_vector(theta))
        assert single == pytest.approx(0.37, abs=1e-6)
        assert agg.values[0] == pytest.approx(single, abs=1e-15)
        assert agg.channels_used[0] == 12

    def test_renormalize_two_channels(self):
        declared = canonical_variants([VariantKey("m0", "orig"),
                                       VariantKey("m0", "flip")])
        theta_02 = math.acos(1.0 - 0.2)
        theta_04 = math.acos(1.0 - 0.4)
        test = group_variants(EmbeddingSet(2, [
            rec("t1", "sp", "cA", "m0", "orig", angle_vector(0.0)),
            rec("t1", "sp", "cA", "m0", "flip", angle_vector(0.0))]), declared)
        gallery = group_variants(EmbeddingSet(2, [
            rec("g1", "s9", "cA", "m0", "orig", angle_vector(theta_02)),
            rec("g1", "s9", "cA", "m0", "flip", angle_vector(theta_04)),
            rec("g2", "s8", "cB", "m0", "orig", angle_vector(theta_02))]),
            declared)
        agg = aggregate_distances(test, "t1", gallery, policy="renormalize")
        d02 = single_channel_distance(angle_vector(0.0), angle_vector(theta_02))
        d04 = single_channel_distance(angle_vector(0.0), angle_vector(theta_04))
        assert agg.values[0] == pytest.approx((d02 + d04) / 2.0, abs=1e-15)
        assert agg.values[0] == pytest.approx(0.3, abs=1e-6)
        assert agg.channels_used[0] == 2
        assert agg.values[1] == pytest.approx(0.2, abs=1e-6)
        assert agg.channels_used[1] == 1

    def test_strict_missing_names_image_and_variant(self):
        test = group_variants(
            full_set([("t1", "sp", "cA")], lambda *_: angle_vector(0.1)),
            ALL_12)
        gallery_set = full_set([("g1", "s9", "cA")], lambda *_: angle_vector(0.2))
        gallery_set = gallery_set.subset(
            [i for i, r in enumerate(gallery_set.records)
             if not (r.model_id == "m1" and r.tta_tag == "flip")])
        gallery = group_variants(gallery_set, ALL_12)
        with pytest.raises(MissingVariant) as err:
            aggregate_distances(test, "t1", gallery, policy="strict")
        assert "g1" in str(err.value) and "m1:flip" in str(err.value)

    def test_single_variant_degenerate(self):
        declared = (VariantKey("m0", "orig"),)
        rng = np.random.default_rng(0)
        test_vec = rng.standard_normal(5)
        gallery_vecs = rng.standard_normal((4, 5))
        test = group_variants(EmbeddingSet(5, [
            rec("t1", "sp", "cA", "m0", "orig", test_vec)]), declared)
        gallery = group_variants(EmbeddingSet(5, [
            rec(f"g{i}", f"s{i}", "cA", "m0", "orig", gallery_vecs[i])
            for i in range(4)]), declared)
        agg = aggregate_distances(test, "t1", gallery)
        from phenorank.distance import UnitVectorBlock, distance_matrix
        plain = distance_matrix(
            UnitVectorBlock.from_rows(
                test_vec.astype(np.float32)[None].astype(np.float64)),
            UnitVectorBlock.from_rows(
                gallery_vecs.astype(np.float32).astype(np.float64))).values
        assert np.array_equal(agg.values, plain[0])

    def test_clone_channels_identity_exact(self):
        # identical embeddings in every channel and dyadic distances:
        # aggregation must reproduce the single-channel values exactly
        vecs = {"g1": [1.0, 0.0], "g2": [0.0, 1.0], "g3": [-1.0, 0.0]}
        test = group_variants(
            full_set([("t1", "sp", "cA")], lambda *_: [1.0, 0.0]), ALL_12)
        gallery = group_variants(
            full_set([("g1", "s1", "cA"), ("g2", "s2", "cB"),
                      ("g3", "s3", "cC")],
                     lambda image, *_: vecs[image]), ALL_12)
        agg = aggregate_distances(test, "t1", gallery)
        assert list(agg.values) == [0.0, 1.0, 2.0]

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        vectors = {}

        def vector_of(image, model, tag):
            key = (image, model, tag)
            if key not in vectors:
                vectors[key] = rng.standard_normal(6)
            return vectors[key]

        images = [("t1", "sp", "cA")]
        gallery_images = [("g1", "s1", "cA"), ("g2", "s2", "cB")]
        test_set = full_set(images, vector_of, dim=6)
        gallery_set = full_set(gallery_images, vector_of, dim=6)
        base_t = group_variants(test_set, ALL_12)
        base_g = group_variants(gallery_set, ALL_12)
        base = aggregate_distances(base_t, "t1", base_g)

        perm = np.random.default_rng(2).permutation(len(gallery_set.records))
        shuffled_g = gallery_set.subset(list(perm))
        reversed_declared = tuple(reversed(ALL_12))
        other = aggregate_distances(
            group_variants(test_set, reversed_declared), "t1",
            group_variants(shuffled_g, reversed_declared))
        lookup = dict(zip(other.gallery_image_ids, other.values))
        for image_id, value in zip(base.gallery_image_ids, base.values):
            assert lookup[image_id] == value

    def test_mean_bound(self):
        rng = np.random.default_rng(3)
        vectors = {}

        def vector_of(image, model, tag):
            key = (image, model, tag)
            if key not in vectors:
                vectors[key] = rng.standard_normal(8)
            return vectors[key]

        test_set = full_set([("t1", "sp", "cA")], vector_of, dim=8)
        gallery_set = full_set([("g1", "s1", "cA"), ("g2", "s2", "cB")],
                               vector_of, dim=8)
        test = group_variants(test_set, ALL_12)
        gallery = group_variants(gallery_set, ALL_12)
        agg = aggregate_distances(test, "t1", gallery)
        per_channel = []
        for key in ALL_12:
            _, t_mat = test.channel(key)
            _, g_mat = gallery.channel(key)
            from phenorank import backend
            per_channel.append(backend.clamped_distance_matrix(t_mat, g_mat)[0])
        per_channel = np.stack(per_channel)
        assert np.all(agg.values >= per_channel.min(axis=0) - 1e-12)
        assert np.all(agg.values <= per_channel.max(axis=0) + 1e-12)

    def test_empty_gallery(self):
        test = group_variants(
            full_set([("t1", "sp", "cA")], lambda *_: [1.0, 0.0]), ALL_12)
        gallery = group_variants(EmbeddingSet(2), ALL_12)
        with pytest.raises(EmptyGallery):
            aggregate_distances(test, "t1", gallery)

    def test_mismatched_declarations(self):
        test = group_variants(
            full_set([("t1", "sp", "cA")], lambda *_: [1.0, 0.0]), ALL_12)
        gallery = group_variants(
            full_set([("g1", "s1", "cA")], lambda *_: [1.0, 0.0],
                     models=("m0",)), canonical_variants(
                         VariantKey("m0", t) for t in TTA_TAGS))
        with pytest.raises(DataError):
            aggregate_matrix(test, gallery)


def test_default_variants_order():
    es = full_set([("i", "s", "c")], lambda *_: [1.0, 0.0],
                  models=("zeta", "alpha"))
    keys = default_variants(es)
    assert keys[0].model_id == "alpha"
    assert [k.tta_tag for k in keys[:4]] == list(TTA_TAGS)


def test_variant_key_rejects_bad_tag():
    with pytest.raises(UnknownVariantTag):
        VariantKey("m0", "sepia")
