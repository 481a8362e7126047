"""Command-line entry point: ``lcbyol <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np
import torch

from . import assess, finetune, mosaic, pretext, strata, workflow
from .config import ConfigError, dump_config, load_config
from .containers import DataError, PatchDataset, PatchEntry, read_raster, write_patch_dataset, write_raster
from .nets import load_encoder, load_segmodel

log = logging.getLogger("lcbyol")

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3


def _write_json(path, doc):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _require(path, what, hint):
    if not Path(path).exists():
        raise DataError(f"{what} not found at {path}; {hint}")
    return Path(path)


# ---------------------------------------------------------------- commands


def cmd_synth(args, cfg):
    world = workflow.make_world(cfg)
    out = Path(args.out)
    h = cfg.config_hash()
    write_raster(out / "image", world.image, extra={"config_hash": h, "seed": world.seed})
    write_raster(out / "truth", world.truth, band_semantics=["class"], nodata=0, extra={"config_hash": h})
    write_raster(out / "reference", world.reference, band_semantics=["class"], nodata=0,
                 pixel_size=float(world.ref_res), extra={"config_hash": h})
    counts = np.bincount(world.truth.ravel(), minlength=9)[1:]
    print(f"world {world.truth.shape[1]}x{world.truth.shape[0]} seed {world.seed}; class shares "
          + " ".join(f"{100 * c / counts.sum():.1f}%" for c in counts))
    return EXIT_OK


def cmd_sample(args, cfg):
    world = Path(args.world)
    image, _ = read_raster(_require(world / "image", "image raster", "run `lcbyol synth` first"), squeeze=False)
    truth, _ = read_raster(_require(world / "truth", "truth raster", "run `lcbyol synth` first"))
    reference, ref_h = read_raster(_require(world / "reference", "reference land-cover raster",
                                            "run `lcbyol synth` first"))
    ref_res = int(round(ref_h.pixel_size))
    try:
        s = workflow.sample(cfg, reference, ref_res, truth)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    plan, grid = s.plan, s.grid
    out = Path(args.out)
    h = cfg.config_hash()
    cv = workflow.cv_plan(cfg)
    doc = {
        "config_hash": h,
        "grid": grid.to_dict(),
        "folds": plan.folds,
        "fold_strata": plan.fold_strata,
        "pretrain_ids": plan.pretrain_ids,
        "pretrain_val_ids": plan.pretrain_val_ids,
        "points": [{"row": r, "col": c, "label": lab} for (r, c), lab in zip(plan.points, s.point_labels)],
        "cv_runs": [{"run": r.index, "train_folds": r.train_folds, "val_fold": r.val_fold} for r in cv.runs],
        "pca": {"n_components": s.summary.n_components, "explained": s.summary.explained,
                "standardization": "zero mean, no variance scaling"},
        "strata": {"n_strata": s.summary.n_strata, "sse": s.summary.sse},
        "distance_units": "pixels (1 px = 1 m)",
    }
    _write_json(out / "splitplan.json", doc)

    entries, images, labels = [], {}, {}
    fold_of = plan.fold_of()
    for role, ids in (("labeled", plan.labeled_ids), ("pretrain", plan.pretrain_ids),
                      ("pretrain-val", plan.pretrain_val_ids)):
        for i in ids:
            y0, x0, y1, x1 = grid.cell_rect(i)
            images[i] = image[:, y0:y1, x0:x1]
            lab = None
            if role == "labeled":
                labels[i] = truth[y0:y1, x0:x1]
                lab = f"labels/{i:06d}"
            entries.append(PatchEntry(i, role, f"images/{i:06d}", fold_of.get(i), lab, (y0, x0)))
    write_patch_dataset(out / "patches", entries, images, labels, {"config_hash": h, "patch": grid.patch})

    print(f"{s.summary.n_valid} candidates, {s.summary.n_components} PCA components "
          f"({100 * s.summary.explained:.1f}% variance), {s.summary.n_strata} strata")
    for f, fold in enumerate(plan.folds):
        print(f"fold {f}: {len(fold)} patches")
    print(f"pretrain {len(plan.pretrain_ids)}, pretrain-val {len(plan.pretrain_val_ids)}, points {len(plan.points)}")
    if args.verify:
        rects = [grid.cell_rect(i) for i in plan.labeled_ids]
        rule = strata.ExclusionRule(cfg.dataset.min_dist_patch, cfg.dataset.min_dist_point)
        problems = strata.verify_plan(plan, rule, rects, len(grid))
        if problems:
            for p in problems:
                print(f"violation: {p}", file=sys.stderr)
            return EXIT_DATA
        print("plan verified: folds disjoint, one patch per stratum per fold, exclusion distances hold")
    return EXIT_OK


def _dataset(path):
    return PatchDataset(_require(Path(path) / "index.json", "patch dataset", "run `lcbyol sample` first").parent)


def _folds(ds: PatchDataset, n_folds):
    return {f: ds.fold_data(f) for f in range(n_folds)}


def cmd_pretrain(args, cfg):
    ds = _dataset(args.data)
    images = ds.load_images(ds.select("pretrain"))
    val = ds.load_images(ds.select("pretrain-val"))
    if not len(images):
        raise DataError(f"{args.data}: no pretrain patches; check dataset.pretrain_fraction")
    init = load_encoder(args.init) if args.init else None
    res = pretext.pretrain(images, val, workflow.pretrain_config(cfg), workflow.encoder_config(cfg), args.out,
                           init, {"config_hash": cfg.config_hash()})
    first, last = res.history[0], res.history[-1]
    print(f"pretrained {len(res.history)} epochs: train loss {first[1]:.4f} -> {last[1]:.4f}; "
          f"best val epoch {res.best_epoch}")
    return EXIT_OK


def _relative(path, start):
    # reports name artefacts relative to their own directory so reruns elsewhere match byte for byte
    return os.path.relpath(Path(path).resolve(), Path(start).resolve())


def _report(reports, out, cfg, extra):
    for r in reports:
        if r.checkpoint:
            r.checkpoint = _relative(r.checkpoint, out)
    doc = finetune.write_cv_report(Path(out) / "cv_report.json", reports,
                                   {"config_hash": cfg.config_hash(), **extra})
    for r in reports:
        print(f"run {r.run}: train folds {r.train_folds} val fold {r.val_fold} "
              f"best epoch {r.best_epoch} macro F1 {100 * r.macro_f1:.2f}%")
    print(f"mean macro F1 {100 * doc['mean_macro_f1']:.2f}%")


def cmd_probe(args, cfg):
    ds = _dataset(args.data)
    enc = load_encoder(_require(args.encoder, "encoder checkpoint", "run `lcbyol pretrain` first"))
    reports, _ = finetune.train_probe(workflow.cv_plan(cfg), enc, _folds(ds, cfg.dataset.n_folds),
                                      workflow.train_loop(cfg, probe=True), out_dir=args.out,
                                      stages=tuple(cfg.finetune.probe_stages),
                                      recalibrate_bn=cfg.finetune.recalibrate_bn,
                                      meta={"config_hash": cfg.config_hash()})
    _report(reports, args.out, cfg, {"kind": "PROBE", "encoder": _relative(args.encoder, args.out)})
    return EXIT_OK


def cmd_finetune(args, cfg):
    ds = _dataset(args.data)
    enc = None
    if args.encoder:
        enc = load_encoder(_require(args.encoder, "encoder checkpoint", "run `lcbyol pretrain` first"))
    reports, _ = finetune.run_cv(workflow.cv_plan(cfg), cfg.finetune.arch, _folds(ds, cfg.dataset.n_folds),
                                 workflow.train_loop(cfg), enc, workflow.encoder_config(cfg),
                                 out_dir=args.out, policy=cfg.finetune.policy.policy(),
                                 n_classes=cfg.dataset.n_classes, meta={"config_hash": cfg.config_hash()})
    source = _relative(args.encoder, args.out) if args.encoder else "random"
    _report(reports, args.out, cfg, {"kind": cfg.finetune.arch, "encoder": source})
    return EXIT_OK


def cmd_infer(args, cfg):
    image, _ = read_raster(_require(args.image, "input raster", "give a 3-band container"), squeeze=False)
    if not args.models:
        raise DataError("no models given; pass --models <checkpoint> ...")
    models = [load_segmodel(_require(m, "model checkpoint", "run `lcbyol finetune` first")) for m in args.models]
    m = cfg.mosaic
    mc = mosaic.MosaicConfig(m.patch, m.stride, m.sigma, m.tta, list(args.models), cfg.seeds.mosaic,
                             args.workers)
    res = mosaic.classify_raster(image, models, mc, return_probs=bool(args.probs_out),
                                 n_classes=cfg.dataset.n_classes)
    extra = {"config_hash": cfg.config_hash(), "models": [Path(p).name for p in args.models]}
    write_raster(args.out, res.classes, band_semantics=["class"], nodata=0, extra=extra)
    if args.probs_out:
        write_raster(args.probs_out, res.probs, band_semantics=[f"p{c}" for c in range(1, len(res.probs) + 1)],
                     extra=extra)
    print(f"classified {image.shape[2]}x{image.shape[1]} raster with {len(models)} models over "
          f"{res.n_windows} windows")
    return EXIT_OK


def cmd_assess(args, cfg):
    if args.matrix:
        cm = assess.load_matrix(_require(args.matrix, "confusion matrix", "give a JSON or CSV file"))
        extra = {"source": "matrix"}
    else:
        if not (args.plan and args.classes):
            raise DataError("give --matrix, or both --plan and --classes")
        plan = json.loads(_require(args.plan, "split plan", "run `lcbyol sample` first").read_text())
        classes, _ = read_raster(_require(args.classes, "class raster", "run `lcbyol infer` first"))
        pts = [(p["row"], p["col"]) for p in plan["points"]]
        labels = [p["label"] for p in plan["points"]]
        if not pts:
            raise DataError(f"{args.plan}: no assessment points")
        cm, skipped = assess.evaluate_points(pts, labels, class_raster=classes, n_classes=cfg.dataset.n_classes)
        extra = {"source": "points", "skipped": skipped}
    rep = assess.write_assessment(args.out, cm, {"config_hash": cfg.config_hash(), **extra})
    print(assess.format_table(cm, rep))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.FIELD=VALUE",
                        help="override a configuration field (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="lcbyol", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic world")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--size", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("sample", parents=[common], help="stratify, split and write patch datasets")
    s.add_argument("--world", required=True, help="directory written by `synth`")
    s.add_argument("--out", required=True)
    s.add_argument("--verify", action="store_true", help="check every plan invariant")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("pretrain", parents=[common], help="BYOL pretraining")
    s.add_argument("--data", required=True, help="patch dataset directory")
    s.add_argument("--out", required=True)
    s.add_argument("--init", help="encoder checkpoint to start from")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("probe", parents=[common], help="linear probing on a frozen encoder")
    s.add_argument("--data", required=True)
    s.add_argument("--encoder", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("finetune", parents=[common], help="cross-validated fine-tuning")
    s.add_argument("--data", required=True)
    s.add_argument("--encoder", help="encoder checkpoint (random init when omitted)")
    s.add_argument("--out", required=True)
    s.add_argument("--arch", help="decoder kind")
    s.add_argument("--n-train-folds", type=int)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("infer", parents=[common], help="classify a raster with an ensemble")
    s.add_argument("--image", required=True)
    s.add_argument("--models", nargs="+", default=[])
    s.add_argument("--out", required=True)
    s.add_argument("--probs-out")
    s.add_argument("--stride", type=int)
    s.add_argument("--sigma", type=float)
    s.add_argument("--tta", action=argparse.BooleanOptionalAction, default=None)
    s.add_argument("--workers", type=int, help="worker threads (default: LCBYOL_WORKERS or CPU count)")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("assess", parents=[common], help="accuracy assessment")
    s.add_argument("--matrix", help="confusion matrix file (JSON or CSV)")
    s.add_argument("--plan", help="splitplan.json holding assessment points")
    s.add_argument("--classes", help="class raster to assess")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_assess)
    return p


def _flag_overrides(args):
    """Command-line flags that shadow configuration fields."""
    pairs = []
    for flag, key in (("seed", "seeds.world"), ("size", "dataset.world_size"), ("arch", "finetune.arch"),
                      ("n_train_folds", "finetune.n_train_folds"), ("stride", "mosaic.stride"),
                      ("sigma", "mosaic.sigma"), ("tta", "mosaic.tta")):
        v = getattr(args, flag, None)
        if v is not None:
            pairs.append(f"{key}={json.dumps(v)}")
    return pairs


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if not args.verbose:
        warnings.simplefilter("ignore", UserWarning)
    try:
        cfg = load_config(args.config, list(args.set) + _flag_overrides(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    log.info("config hash %s\n%s", cfg.config_hash(), dump_config(cfg))
    torch.manual_seed(0)
    try:
        return args.func(args, cfg)
    except (DataError, FileNotFoundError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
