"""Command-line entry point.

Commands: ``gen``, ``eval``, ``cv``, ``trainsim``, ``checkgrad``,
``validate``.  Exit codes: 0 success, 2 usage/config error, 3 data
error, 4 tolerance failure (checkgrad).  Flag precedence: command line
over ``--config`` JSON over built-in defaults.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from . import backend
from .embedio import (
    EmbeddingSet,
    parse_embedding_file,
    validate_set,
    write_embedding_file,
)
from .ensemble import VariantKey, canonical_variants, default_variants
from .errors import ConfigError, ConfigInvalid, DataError
from .evaluation import DEFAULT_K, evaluate
from .folds import GalleryConfig, build_gallery, folds_from_splits, run_cv
from .losses import ArcFaceParams, arcface_loss, finite_diff_check, wce_loss
from .rng import derive_rng
from .synth import LongTailSpec, generate_dataset
from .training import (
    Panel,
    TrainSimConfig,
    TrainSimData,
    train_sim,
    write_epoch_log,
    write_model,
)

ARCFACE_GRAD_TOL = 1e-4
WCE_GRAD_TOL = 1e-6

FREQUENT_LABELS = ("train", "val", "test")


def _add_shared(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON file with default flag values")
    parser.add_argument("--out", type=Path, default=None,
                        help="output directory")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker cap for the distance kernel "
                             "(results do not depend on it)")
    parser.add_argument("--seed", type=int, default=None, help="root seed")


def _merged(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags."""
    merged = dict(defaults)
    if args.config is not None:
        if not args.config.exists():
            raise ConfigInvalid(f"config file not found: {args.config}")
        try:
            file_values = json.loads(args.config.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"config file is not valid JSON: {exc}")
        unknown = set(file_values) - set(defaults)
        if unknown:
            raise ConfigInvalid(f"unknown config keys: {sorted(unknown)}")
        merged.update(file_values)
    for key in defaults:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    return merged


def _parse_k(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        ks = tuple(int(k) for k in text)
    else:
        try:
            ks = tuple(int(tok) for tok in str(text).split(",") if tok.strip())
        except ValueError:
            raise ConfigInvalid(f"bad --k value {text!r}")
    if not ks or any(k < 1 for k in ks) or list(ks) != sorted(set(ks)):
        raise ConfigInvalid(f"--k must be ascending positive integers, got {text!r}")
    return ks


def _parse_variants(text) -> tuple[VariantKey, ...] | None:
    if text in (None, "", "all"):
        return None
    if isinstance(text, (list, tuple)):
        tokens = list(text)
    else:
        tokens = [tok.strip() for tok in str(text).split(",") if tok.strip()]
    keys = []
    for tok in tokens:
        if ":" not in tok:
            raise ConfigInvalid(f"variant {tok!r} must look like model:tag")
        model_id, tag = tok.split(":", 1)
        keys.append(VariantKey(model_id, tag))
    return canonical_variants(keys)


def _load_embeddings(paths) -> EmbeddingSet:
    sets = []
    for path in paths:
        path = Path(path)
        if not path.exists():
            raise ConfigInvalid(f"embedding file not found: {path}")
        with path.open("r", encoding="utf-8") as fh:
            sets.append(parse_embedding_file(fh))
    dims = {s.dimension for s in sets}
    if len(dims) != 1:
        raise ConfigInvalid(
            f"DimensionMismatch: embedding files declare dims {sorted(dims)}")
    records = [r for s in sets for r in s.records]
    return EmbeddingSet(sets[0].dimension, records, sets[0].metadata)


def _load_splits(path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigInvalid(f"split file not found: {path}")
    splits = {}
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["image_id", "split"]:
            raise DataError(f"split file header must be image_id,split, got {header}")
        for row in reader:
            if len(row) != 2:
                raise DataError(f"bad split row: {row}")
            splits[row[0]] = row[1]
    return splits


def _partition_by_split(embedding_set: EmbeddingSet, splits: dict[str, str]
                        ) -> tuple[EmbeddingSet, EmbeddingSet]:
    """(frequent side, rare side) according to split labels."""
    frequent_idx, rare_idx = [], []
    for i, rec in enumerate(embedding_set.records):
        label = splits.get(rec.image_id)
        if label is None:
            raise DataError(f"image {rec.image_id} has no split label")
        if label in FREQUENT_LABELS:
            frequent_idx.append(i)
        elif label.startswith("fold"):
            rare_idx.append(i)
        else:
            raise DataError(f"image {rec.image_id} has unknown split {label!r}")
    return embedding_set.subset(frequent_idx), embedding_set.subset(rare_idx)


def _write_report(report, out_dir: Path, stem: str = "report",
                  with_csv: bool = True) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{stem}.json").write_text(report.to_json())
    if with_csv:
        with (out_dir / f"{stem}_per_image.csv").open("w", encoding="utf-8") as fh:
            report.write_per_image_csv(fh)


# -- commands -------------------------------------------------------------

def cmd_gen(args: argparse.Namespace) -> int:
    values = _merged(args, {"spec": None, "seed": None})
    if values["spec"] is None:
        spec = LongTailSpec()
    else:
        spec_path = Path(values["spec"])
        if not spec_path.exists():
            raise ConfigInvalid(f"spec file not found: {spec_path}")
        try:
            spec = LongTailSpec.from_mapping(json.loads(spec_path.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"spec file is not valid JSON: {exc}")
    if values["seed"] is not None:
        spec = replace(spec, seed=values["seed"])
    spec.validate()
    out_dir = args.out or Path("dataset")
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = generate_dataset(spec)
    for model_id in sorted(dataset.sets_by_model):
        with (out_dir / f"{model_id}.tsv").open("w", encoding="utf-8") as fh:
            write_embedding_file(dataset.sets_by_model[model_id], fh)
    with (out_dir / "split.csv").open("w", encoding="utf-8") as fh:
        fh.write("image_id,split\n")
        for image_id, label in dataset.splits.items():
            fh.write(f"{image_id},{label}\n")
    (out_dir / "spec.json").write_text(spec.to_json())
    print(f"wrote {len(dataset.sets_by_model)} embedding file(s), split.csv "
          f"and spec.json to {out_dir}")
    return 0


def _eval_defaults() -> dict:
    return {
        "embeddings": None, "splits": None, "mode": "frequent",
        "held_fold": None, "n_folds": 10, "test_source": "rare",
        "exclusion": True, "k": "1,5,10,30", "variants": None,
        "policy": "strict", "nn_k": 1, "seed": 0,
    }


def cmd_eval(args: argparse.Namespace) -> int:
    values = _merged(args, _eval_defaults())
    if getattr(args, "no_exclusion", False):
        values["exclusion"] = False
    if values["embeddings"] is None or values["splits"] is None:
        raise ConfigInvalid("--embeddings and --splits are required")
    paths = (values["embeddings"].split(",")
             if isinstance(values["embeddings"], str)
             else list(values["embeddings"]))
    merged = _load_embeddings(paths)
    splits = _load_splits(values["splits"])
    frequent_set, rare_set = _partition_by_split(merged, splits)
    ks = _parse_k(values["k"])
    variants = _parse_variants(values["variants"])
    out_dir = args.out or Path("eval-out")
    mode = values["mode"]
    seed = values["seed"]

    if mode == "frequent":
        config = GalleryConfig(mode="frequent", exclusion=values["exclusion"])
        gallery, test = build_gallery(frequent_set, None, None, config,
                                      splits=splits)
        report = evaluate(test, gallery, config=config, ks=ks,
                          declared_variants=variants, policy=values["policy"],
                          nn_k=values["nn_k"], seed=seed)
        _write_report(report, out_dir)
    elif mode in ("rare_cv", "unified"):
        if len(rare_set) == 0:
            raise DataError("no fold-labeled (rare) images in the inputs")
        folds = folds_from_splits(splits, rare_set, seed=seed)
        result = run_cv(rare_set,
                        frequent_set if mode == "unified" else None,
                        n_folds=folds.n_folds, mode=mode,
                        exclusion=values["exclusion"], ks=ks, seed=seed,
                        folds=folds, declared_variants=variants,
                        policy=values["policy"], nn_k=values["nn_k"],
                        splits=splits, test_source=values["test_source"])
        _write_report(result.pooled, out_dir)
        for i, fold_report in enumerate(result.per_fold):
            _write_report(fold_report, out_dir, stem=f"fold_{i}",
                          with_csv=False)
    else:
        raise ConfigInvalid(f"unknown mode {mode!r}")
    print(f"wrote evaluation report(s) to {out_dir}")
    return 0


def cmd_cv(args: argparse.Namespace) -> int:
    args.mode = "rare_cv"
    return cmd_eval(args)


def cmd_trainsim(args: argparse.Namespace) -> int:
    defaults = {
        "embeddings": None, "splits": None, "model": None, "tag": "orig",
        "epochs": 40, "batch_size": 64, "base_lr": 1e-3, "dropout": 0.5,
        "weight_decay": 5e-5, "patience": 5, "hidden_dim": 96,
        "feature_dim": 48, "seed": 0,
    }
    values = _merged(args, defaults)
    if getattr(args, "no_regularization", False):
        values["dropout"] = 0.0
        values["weight_decay"] = 0.0
    if values["embeddings"] is None or values["splits"] is None:
        raise ConfigInvalid("--embeddings and --splits are required")
    paths = (values["embeddings"].split(",")
             if isinstance(values["embeddings"], str)
             else list(values["embeddings"]))
    merged = _load_embeddings(paths)
    splits = _load_splits(values["splits"])
    model_id = values["model"] or sorted({r.model_id for r in merged.records})[0]
    single = merged.subset([
        i for i, r in enumerate(merged.records)
        if r.model_id == model_id and r.tta_tag == values["tag"]])
    if len(single) == 0:
        raise DataError(f"no records for model {model_id!r} tag {values['tag']!r}")
    panels: dict[str, list[int]] = {"train": [], "val": [], "test": [], "unseen": []}
    for i, rec in enumerate(single.records):
        label = splits.get(rec.image_id)
        if label is None:
            raise DataError(f"image {rec.image_id} has no split label")
        if label in FREQUENT_LABELS:
            panels[label].append(i)
        elif label.startswith("fold"):
            panels["unseen"].append(i)
        else:
            raise DataError(f"unknown split label {label!r}")
    data = TrainSimData(
        train=Panel.from_set(single, panels["train"]),
        val=Panel.from_set(single, panels["val"]),
        test=Panel.from_set(single, panels["test"]),
        unseen=Panel.from_set(single, panels["unseen"]))
    config = TrainSimConfig(
        epochs=values["epochs"], batch_size=values["batch_size"],
        base_lr=values["base_lr"], dropout=values["dropout"],
        weight_decay=values["weight_decay"], patience=values["patience"],
        hidden_dim=values["hidden_dim"], feature_dim=values["feature_dim"],
        seed=values["seed"])
    result = train_sim(data, config)
    out_dir = args.out or Path("trainsim-out")
    out_dir.mkdir(parents=True, exist_ok=True)
    for stage in ("before", "after"):
        for split in ("seen", "unseen"):
            report = getattr(result, stage)[split]
            (out_dir / f"{stage}_{split}.json").write_text(report.to_json())
    with (out_dir / "train_log.csv").open("w", encoding="utf-8") as fh:
        write_epoch_log(result.log, fh)
    with (out_dir / "model.txt").open("w", encoding="utf-8") as fh:
        write_model(result.model, fh)
    seen_gain = (result.after["seen"].per_k[1] - result.before["seen"].per_k[1])
    unseen_gain = (result.after["unseen"].per_k[1]
                   - result.before["unseen"].per_k[1])
    print(f"trained {len(result.log)} epoch(s); seen top-1 mA delta "
          f"{seen_gain:+.4f}, unseen top-1 mA delta {unseen_gain:+.4f}; "
          f"artifacts in {out_dir}")
    return 0


def cmd_checkgrad(args: argparse.Namespace) -> int:
    values = _merged(args, {"trials": 100, "step": 1e-5, "seed": 0})
    trials, step, seed = values["trials"], values["step"], values["seed"]
    rng = derive_rng(seed, "checkgrad")
    worst_arc = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, 9))
        dim = int(rng.integers(2, 17))
        n_classes = int(rng.integers(1, 6))
        x = rng.standard_normal((n, dim))
        w = rng.standard_normal((n_classes, dim))
        y = rng.integers(0, n_classes, size=n)
        scale = float(rng.uniform(1.0, 64.0))
        margin = float(rng.uniform(0.0, 1.0))

        def arc_fn(point):
            emb, weights = point
            params = ArcFaceParams(weights=weights, scale=scale, margin=margin)
            loss, gx, gw = arcface_loss(emb, y, params)
            return loss, (gx, gw)

        worst_arc = max(worst_arc, finite_diff_check(arc_fn, (x, w), step=step))
    worst_wce = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, 9))
        n_classes = int(rng.integers(2, 6))
        logits = rng.standard_normal((n, n_classes)) * 3.0
        y = rng.integers(0, n_classes, size=n)
        weights = rng.uniform(0.5, 1.0, size=n_classes)

        def wce_fn(point):
            return wce_loss(point, y, weights)

        worst_wce = max(worst_wce, finite_diff_check(wce_fn, logits, step=step))
    ok_arc = worst_arc < ARCFACE_GRAD_TOL
    ok_wce = worst_wce < WCE_GRAD_TOL
    print(f"angular-margin loss: max relative gradient error {worst_arc:.3e} "
          f"(tolerance {ARCFACE_GRAD_TOL:g}) -> {'ok' if ok_arc else 'FAIL'}")
    print(f"weighted cross entropy: max relative gradient error {worst_wce:.3e} "
          f"(tolerance {WCE_GRAD_TOL:g}) -> {'ok' if ok_wce else 'FAIL'}")
    return 0 if (ok_arc and ok_wce) else 4


def cmd_validate(args: argparse.Namespace) -> int:
    values = _merged(args, {"embeddings": None, "variants": None})
    if values["embeddings"] is None:
        raise ConfigInvalid("--embeddings is required")
    paths = (values["embeddings"].split(",")
             if isinstance(values["embeddings"], str)
             else list(values["embeddings"]))
    merged = _load_embeddings(paths)
    variants = _parse_variants(values["variants"]) or default_variants(merged)
    report = validate_set(merged, [(v.model_id, v.tta_tag) for v in variants])
    missing = report.missing_variants([(v.model_id, v.tta_tag) for v in variants])
    for locator, message in report.errors:
        print(f"error: {locator}: {message}")
    for image_id, gone in sorted(missing.items()):
        print(f"missing: {image_id}: {', '.join(f'{m}:{t}' for m, t in gone)}")
    print(f"{len(merged)} records, {len(report.errors)} error(s), "
          f"{len(missing)} image(s) with missing variants")
    return 0 if not report.errors else 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="phenorank",
        description="Gallery-ranking evaluation over disorder-tagged embeddings")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a synthetic benchmark dataset")
    p_gen.add_argument("--spec", type=Path, default=None,
                       help="LongTailSpec JSON (defaults to the built-in spec)")
    _add_shared(p_gen)
    p_gen.set_defaults(func=cmd_gen)

    for name, helptext in (("eval", "evaluate a gallery configuration"),
                           ("cv", "cross-validate the rare/unseen split")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--embeddings", type=str, default=None,
                       help="comma-separated embedding files (one per model)")
        p.add_argument("--splits", type=Path, default=None,
                       help="CSV image_id,split")
        if name == "eval":
            p.add_argument("--mode", choices=("frequent", "rare_cv", "unified"),
                           default=None)
        p.add_argument("--held-fold", dest="held_fold", type=int, default=None)
        p.add_argument("--test-source", dest="test_source",
                       choices=("frequent", "rare", "both"), default=None)
        p.add_argument("--no-exclusion", dest="no_exclusion",
                       action="store_true",
                       help="allow same-subject gallery matches")
        p.add_argument("--k", type=str, default=None,
                       help="comma-separated k values (default 1,5,10,30)")
        p.add_argument("--variants", type=str, default=None,
                       help="comma-separated model:tag channels (default: all)")
        p.add_argument("--policy", choices=("strict", "renormalize"),
                       default=None)
        p.add_argument("--nn-k", dest="nn_k", type=int, default=None,
                       help="images per disorder entering its score (default 1)")
        _add_shared(p)
        p.set_defaults(func=cmd_eval if name == "eval" else cmd_cv)

    p_sim = sub.add_parser("trainsim", help="run the fine-tuning simulator")
    p_sim.add_argument("--embeddings", type=str, default=None)
    p_sim.add_argument("--splits", type=Path, default=None)
    p_sim.add_argument("--model", type=str, default=None,
                       help="model id to train on (default: first)")
    p_sim.add_argument("--tag", type=str, default=None)
    p_sim.add_argument("--epochs", type=int, default=None)
    p_sim.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p_sim.add_argument("--base-lr", dest="base_lr", type=float, default=None)
    p_sim.add_argument("--dropout", type=float, default=None)
    p_sim.add_argument("--weight-decay", dest="weight_decay", type=float,
                       default=None)
    p_sim.add_argument("--patience", type=int, default=None)
    p_sim.add_argument("--hidden-dim", dest="hidden_dim", type=int, default=None)
    p_sim.add_argument("--feature-dim", dest="feature_dim", type=int,
                       default=None)
    p_sim.add_argument("--no-regularization", dest="no_regularization",
                       action="store_true",
                       help="disable dropout and feature-layer weight decay")
    _add_shared(p_sim)
    p_sim.set_defaults(func=cmd_trainsim)

    p_grad = sub.add_parser("checkgrad",
                            help="finite-difference check of both losses")
    p_grad.add_argument("--trials", type=int, default=None)
    p_grad.add_argument("--step", type=float, default=None)
    _add_shared(p_grad)
    p_grad.set_defaults(func=cmd_checkgrad)

    p_val = sub.add_parser("validate", help="validate embedding files")
    p_val.add_argument("--embeddings", type=str, default=None)
    p_val.add_argument("--variants", type=str, default=None)
    _add_shared(p_val)
    p_val.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "threads", None) is not None:
            backend.set_threads(args.threads)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
