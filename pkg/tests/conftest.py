import numpy as np
import pytest

from phenorank.embedio import EmbeddingRecord, EmbeddingSet


def rows_to_set(rows, dim, model_id="m0", tag="orig"):
    """Build a single-channel EmbeddingSet from oracle-style row dicts."""
    records = [
        EmbeddingRecord(r["image_id"], r["subject"], r["cls"], model_id, tag,
                        np.asarray(r["vector"], dtype=np.float32))
        for r in rows
    ]
    return EmbeddingSet(dim, records)


@pytest.fixture
def tiny_fixture():
    """6 gallery images / 3 disorders / 4 test images, dim 3."""
    rng = np.random.default_rng(20240811)
    gallery = []
    specs = [("A", "sa1"), ("A", "sa2"), ("B", "sb1"),
             ("B", "sb2"), ("C", "sc1"), ("C", "sc2")]
    for i, (cls, subject) in enumerate(specs):
        gallery.append({"image_id": f"g{i}", "subject": subject, "cls": cls,
                        "vector": [float(x) for x in rng.standard_normal(3)]})
    test = []
    for i, cls in enumerate(["A", "B", "C", "A"]):
        test.append({"image_id": f"t{i}", "subject": f"probe{i}", "cls": cls,
                     "vector": [float(x) for x in rng.standard_normal(3)]})
    return gallery, test
