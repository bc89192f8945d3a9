"""Independent brute-force oracles, deliberately numpy-free.

These re-derive rankings and accuracies from first principles with
plain Python floats so the production pipeline can be compared against
a second, structurally different implementation.
"""

import math


def unit(vector):
    norm = math.sqrt(sum(x * x for x in vector))
    return [x / norm for x in vector]


def brute_force_evaluate(test_rows, gallery_rows, ks, exclusion=True, nn_k=1):
    """Evaluate single-channel retrieval by exhaustive enumeration.

    Rows are dicts with image_id, subject, cls and vector keys.  Returns
    per_k / per_class / counts dicts matching EvaluationReport plus the
    per-image (image_id, cls, rank, top1_class, top1_score) tuples.
    """
    gallery = [dict(row, u=unit(row["vector"])) for row in gallery_rows]
    per_image = []
    ranks_by_class = {}
    for row in test_rows:
        tu = unit(row["vector"])
        by_class = {}
        for entry in gallery:
            if exclusion and entry["subject"] == row["subject"]:
                continue
            dist = 1.0 - sum(a * b for a, b in zip(tu, entry["u"]))
            dist = min(2.0, max(0.0, dist))
            by_class.setdefault(entry["cls"], []).append(dist)
        if not by_class:
            raise AssertionError("oracle: gallery empty after exclusion")
        scored = []
        for cls, dists in by_class.items():
            dists.sort()
            take = dists[:nn_k]
            scored.append((sum(take) / len(take), cls))
        scored.sort(key=lambda pair: (pair[0], pair[1]))
        rank = 0
        for pos, (_, cls) in enumerate(scored, start=1):
            if cls == row["cls"]:
                rank = pos
                break
        per_image.append((row["image_id"], row["cls"], rank,
                          scored[0][1], scored[0][0]))
        ranks_by_class.setdefault(row["cls"], []).append(rank)

    counts = {c: len(v) for c, v in sorted(ranks_by_class.items())}
    per_class = {}
    for cls in sorted(ranks_by_class):
        rs = ranks_by_class[cls]
        per_class[cls] = {k: sum(1 for r in rs if 0 < r <= k) / len(rs)
                          for k in ks}
    per_k = {k: sum(per_class[c][k] for c in sorted(per_class)) / len(per_class)
             for k in ks}
    return {"per_k": per_k, "per_class": per_class, "counts": counts,
            "per_image": per_image}


def replay_cv(rare_rows, assignment, n_folds, ks, exclusion=True):
    """Replay every fold by hand and pool ranks before computing Eq-style
    accuracies; rare_rows are dicts as in brute_force_evaluate."""
    pooled = []
    for fold in range(n_folds):
        test = [r for r in rare_rows if assignment[r["subject"]] == fold]
        gallery = [r for r in rare_rows if assignment[r["subject"]] != fold]
        if not test or not gallery:
            continue
        result = brute_force_evaluate(test, gallery, ks, exclusion=exclusion)
        pooled.extend(result["per_image"])
    ranks_by_class = {}
    for _, cls, rank, _, _ in pooled:
        ranks_by_class.setdefault(cls, []).append(rank)
    counts = {c: len(v) for c, v in sorted(ranks_by_class.items())}
    per_class = {}
    for cls in sorted(ranks_by_class):
        rs = ranks_by_class[cls]
        per_class[cls] = {k: sum(1 for r in rs if 0 < r <= k) / len(rs)
                          for k in ks}
    per_k = {k: sum(per_class[c][k] for c in sorted(per_class)) / len(per_class)
             for k in ks}
    return {"per_k": per_k, "per_class": per_class, "counts": counts,
            "per_image": pooled}


def random_instance(rng, max_gallery=8, max_classes=5, max_dim=4,
                    max_test=6):
    """One random single-channel retrieval instance (numpy rng in, plain
    lists out).  Subjects overlap between test and gallery often enough
    to exercise the exclusion rule, but each test subject never owns the
    whole gallery."""
    dim = int(rng.integers(1, max_dim + 1))
    n_classes = int(rng.integers(1, max_classes + 1))
    classes = [f"d{i}" for i in range(n_classes)]
    n_gallery = int(rng.integers(2, max_gallery + 1))
    n_subjects = max(2, int(rng.integers(2, n_gallery + 2)))
    subjects = [f"s{i}" for i in range(n_subjects)]
    gallery = []
    for g in range(n_gallery):
        gallery.append({
            "image_id": f"g{g}",
            "subject": subjects[int(rng.integers(n_subjects))],
            "cls": classes[int(rng.integers(n_classes))],
            "vector": [float(x) for x in rng.standard_normal(dim)],
        })
    gallery_subjects = {g["subject"] for g in gallery}
    test = []
    n_test = int(rng.integers(1, max_test + 1))
    for t in range(n_test):
        if len(gallery_subjects) > 1 and rng.random() < 0.5:
            subject = sorted(gallery_subjects)[int(rng.integers(len(gallery_subjects)))]
            if all(g["subject"] == subject for g in gallery):
                subject = f"probe{t}"
        else:
            subject = f"probe{t}"
        test.append({
            "image_id": f"t{t}",
            "subject": subject,
            "cls": classes[int(rng.integers(n_classes))],
            "vector": [float(x) for x in rng.standard_normal(dim)],
        })
    exclusion = bool(rng.random() < 0.7)
    return {"dim": dim, "gallery": gallery, "test": test,
            "exclusion": exclusion}
