"""``sketchforge`` command line.

Exit codes: 0 success (possibly with warnings), 1 fatal error, 2 invalid usage.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .bpd import DeformParams, deform_sketch
from .classifier import evaluate_precision, load_model, save_model, train_ensemble
from .codebook import assign_to_centroids, load_codebook, save_codebook, stroke_tiles
from .msr import heatmap, reconstruct
from .pipeline import (
    IMAGE_EXTS,
    DatasetIndex,
    PipelineConfig,
    PipelineError,
    build_codebook,
    collect_skeletons,
    contact_sheet,
    derive_seed,
    export_triplet_manifest,
    ingest_dataset,
    make_splits,
    run_bpd_augment,
    run_msr_pipeline,
    sample_descriptors,
    worker_count,
    write_report,
)
from .raster import RasterError, load_gray, save_gray

log = logging.getLogger("sketchforge")


def _image_paths(inputs) -> list:
    paths = []
    for raw in inputs:
        p = Path(raw)
        if p.is_dir():
            paths.extend(sorted(q for q in p.rglob("*") if q.is_file() and q.suffix.lower() in IMAGE_EXTS))
        elif p.is_file():
            paths.append(p)
        else:
            raise PipelineError(f"{p} does not exist")
    if not paths:
        raise PipelineError("no input images found")
    return paths


def _write_json(data, out) -> None:
    text = json.dumps(data, indent=1, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def cmd_ingest(args):
    index = ingest_dataset(args.root)
    _write_json(index.to_dict(), args.out)
    log.info("%d classes, %d items", len(index.classes), len(index.all_items()))


def cmd_split(args):
    index = DatasetIndex.from_dict(json.loads(Path(args.index).read_text()))
    _write_json(make_splits(index, args.folds, args.seed).to_dict(), args.out)


def cmd_bpd(args):
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    img = load_gray(args.input)
    stem = Path(args.input).stem
    record = {"input": str(args.input), "outputs": [], "seeds": [], "status": "ok", "error": None,
              "params": {"a": args.patch, "alpha": args.alpha, "n_min": args.n_min, "seed": args.seed}}
    for i in range(args.count):
        seed = derive_seed(args.seed, stem, i)
        name = f"{stem}_bpd_{i:03d}.png"
        save_gray(deform_sketch(img, DeformParams(args.patch, args.alpha, args.n_min, seed)), out / name)
        record["outputs"].append(name)
        record["seeds"].append(seed)
    with open(out / "manifest.jsonl", "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def cmd_codebook_build(args):
    config = PipelineConfig(k=args.k, rho=args.rho, threshold=args.threshold, seed=args.seed)
    masks, _ = collect_skeletons(_image_paths(args.inputs), args.threshold, worker_count())
    codebook, _, _ = build_codebook(masks, config, derive_seed(args.seed, "codebook"))
    save_codebook(codebook, args.out)
    log.info("codebook with k=%d written to %s", codebook.k, args.out)


def cmd_codebook_export(args):
    codebook = load_codebook(args.codebook)
    save_gray(contact_sheet(stroke_tiles(codebook, args.scale), args.columns), args.out)


def _corpus_descriptors(codebook, corpus, rho, seed, threshold):
    if codebook.centroids is None:
        raise PipelineError("codebook has no centroid section; rebuild it with 'codebook build'")
    masks, _ = collect_skeletons(_image_paths([corpus]), threshold, worker_count())
    _, desc = sample_descriptors(masks, rho, np.random.default_rng(seed), codebook.patch_size)
    return desc, assign_to_centroids(desc, codebook.centroids)


def cmd_classifier_train(args):
    codebook = load_codebook(args.codebook)
    desc, labels = _corpus_descriptors(codebook, args.corpus, args.rho, derive_seed(args.seed, "train"),
                                       args.threshold)
    pools = [desc[labels == j] for j in range(codebook.k)]
    empty = [j for j, p in enumerate(pools) if len(p) == 0]
    if empty:
        raise PipelineError(f"clusters without corpus patches: {empty}")
    ensemble = train_ensemble(pools, args.per_cluster, args.models, args.cost, args.seed)
    save_model(args.model, codebook, ensemble)


def cmd_classifier_eval(args):
    codebook = load_codebook(args.codebook)
    _, ensemble = load_model(args.model)
    desc, labels = _corpus_descriptors(codebook, args.corpus, 1, derive_seed(args.seed, "eval"), args.threshold)
    rng = np.random.default_rng(derive_seed(args.seed, "eval-sample"))
    keep = []
    for j in range(codebook.k):
        members = np.flatnonzero(labels == j)
        keep.extend(np.sort(rng.permutation(members)[:args.per_cluster]))
    keep = np.sort(np.array(keep, dtype=np.int64))
    report = evaluate_precision(ensemble, desc[keep], labels[keep])
    write_report(report, args.confusion, args.report)
    weighted = codebook.with_weights(report.weights)
    save_codebook(weighted, args.codebook)
    save_model(args.model, weighted, ensemble)
    log.info("patch accuracy %.4f", report.accuracy)


def cmd_msr(args):
    codebook = load_codebook(args.codebook)
    model_codebook, ensemble = load_model(args.model)
    if codebook.weights is None:
        codebook = codebook.with_weights(model_codebook.weights) if model_codebook.weights is not None else codebook
    result = reconstruct(load_gray(args.input), codebook, ensemble)
    if result.blank:
        log.warning("%s has no ink; reconstruction is blank", args.input)
    save_gray(result.rendered, args.output)
    if args.heatmap:
        Image.fromarray(heatmap(result.values), mode="RGB").save(args.heatmap)


def cmd_augment(args):
    config = PipelineConfig.load(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index = ingest_dataset(args.dataset)
    split = make_splits(index, config.folds, config.seed)
    (out / "index.json").write_text(json.dumps(index.to_dict(), indent=1, sort_keys=True) + "\n")
    (out / "splits.json").write_text(json.dumps(split.to_dict(), indent=1, sort_keys=True) + "\n")
    # every item trains in some split, and its deformations do not depend on which
    bpd = run_bpd_augment(index, index.all_items(), config, out / "bpd")
    msr = run_msr_pipeline(index, split, config, out / "msr")
    warnings = len(bpd.warnings) + sum(len(r["manifest"].warnings) for r in msr)
    if warnings:
        log.warning("finished with %d warning record(s)", warnings)


def cmd_sheet(args):
    images = []
    for p in args.images:
        images.append(load_gray(p))
    save_gray(contact_sheet(images, args.columns), args.out)


def cmd_triplets(args):
    n, skipped = export_triplet_manifest(args.pairs, args.manifest, args.seed, args.out)
    log.info("%d triplets written, %d unpaired sketches skipped", n, len(skipped))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sketchforge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="index a class-per-directory dataset")
    p.add_argument("root")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", help="per-class k-fold assignment")
    p.add_argument("index", help="index JSON from 'ingest'")
    p.add_argument("--folds", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("bpd", help="Bezier pivot deformations of one sketch")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--alpha", type=float, default=8.0)
    p.add_argument("--patch", type=int, default=32, help="grid cell size a")
    p.add_argument("--n-min", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("input")
    p.add_argument("outdir")
    p.set_defaults(func=cmd_bpd)

    p = sub.add_parser("codebook", help="mean-stroke codebook")
    csub = p.add_subparsers(dest="action", required=True)
    q = csub.add_parser("build")
    q.add_argument("inputs", nargs="+", help="images or directories")
    q.add_argument("--out", required=True)
    q.add_argument("--k", type=int, default=150)
    q.add_argument("--rho", type=int, default=3)
    q.add_argument("--threshold", type=int, default=128)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_codebook_build)
    q = csub.add_parser("export-png")
    q.add_argument("codebook")
    q.add_argument("out")
    q.add_argument("--columns", type=int, default=15)
    q.add_argument("--scale", type=int, default=4)
    q.set_defaults(func=cmd_codebook_export)

    p = sub.add_parser("classifier", help="patch classifier ensemble")
    csub = p.add_subparsers(dest="action", required=True)
    q = csub.add_parser("train")
    q.add_argument("--models", type=int, default=20)
    q.add_argument("--per-cluster", type=int, default=100)
    q.add_argument("--cost", type=float, default=149.0)
    q.add_argument("--rho", type=int, default=3)
    q.add_argument("--threshold", type=int, default=128)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("codebook")
    q.add_argument("corpus")
    q.add_argument("model")
    q.set_defaults(func=cmd_classifier_train)
    q = csub.add_parser("eval")
    q.add_argument("--per-cluster", type=int, default=7000)
    q.add_argument("--threshold", type=int, default=128)
    q.add_argument("--seed", type=int, default=1)
    q.add_argument("--confusion", default="confusion.csv")
    q.add_argument("--report", default="precision.json")
    q.add_argument("codebook")
    q.add_argument("corpus")
    q.add_argument("model")
    q.set_defaults(func=cmd_classifier_eval)

    p = sub.add_parser("msr", help="mean-stroke reconstruction")
    csub = p.add_subparsers(dest="action", required=True)
    q = csub.add_parser("reconstruct")
    q.add_argument("--codebook", required=True)
    q.add_argument("--model", required=True)
    q.add_argument("--heatmap")
    q.add_argument("input")
    q.add_argument("output")
    q.set_defaults(func=cmd_msr)

    p = sub.add_parser("augment", help="full BPD + MSR run over a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("dataset")
    p.add_argument("out")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("sheet", help="contact sheet of images")
    p.add_argument("--columns", type=int, default=7)
    p.add_argument("out")
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_sheet)

    p = sub.add_parser("triplets", help="SBIR triplets from a BPD manifest")
    p.add_argument("--pairs", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("manifest")
    p.add_argument("out")
    p.set_defaults(func=cmd_triplets)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, json.JSONDecodeError) as exc:
        if isinstance(exc, RasterError):
            log.error("%s", exc)
            return 1
        log.error("invalid input: %s", exc)
        return 2
    except (PipelineError, OSError) as exc:
        log.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
