"""Dataset-level orchestration: ingestion, splits, batch augmentation and manifests.

Every random choice draws from a generator seeded by :func:`derive_seed`,
a stable hash of the global seed and the item's dataset-relative path, so
outputs do not depend on worker count or scheduling.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path, PurePosixPath

import numpy as np

from . import __version__
from .bpd import DeformParams, deform_sketch
from .classifier import evaluate_precision, load_model, save_model, train_ensemble
from .codebook import (
    extract_patches,
    hog_batch,
    kmeans,
    mean_strokes,
    save_codebook,
)
from .msr import reconstruct
from .raster import RasterError, binarize, load_gray, resize_256, save_gray, skeletonize

log = logging.getLogger(__name__)

IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}
WORKERS_ENV = "SKETCHFORGE_WORKERS"
GUTTER = 4


class PipelineError(RuntimeError):
    """Fatal, directory-level failure."""


def derive_seed(*parts) -> int:
    """64-bit seed from a stable hash of ``parts``."""
    text = "\x1f".join(str(p) for p in parts)
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


def worker_count(default: int = 1) -> int:
    raw = os.environ.get(WORKERS_ENV)
    if not raw:
        return default
    try:
        n = int(raw)
    except ValueError:
        raise PipelineError(f"{WORKERS_ENV}={raw!r} is not an integer") from None
    return max(1, n)


def _parallel_map(fn, items, workers, initializer=None, initargs=()):
    if workers <= 1 or len(items) <= 1:
        if initializer is not None:
            initializer(*initargs)
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers, initializer=initializer, initargs=initargs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


# -- configuration ---------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    threshold: int = 128
    a: int = 32
    alpha: float = 8.0
    n_min: int = 8
    patch: int = 31
    rho: int = 3
    k: int = 150
    m1: int = 100
    m2: int = 7000
    r: int = 20
    reg_cost: float = 149.0
    bpd_count: int = 10
    folds: int = 3
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ValueError(f"{f.name} must be a number, got {value!r}")
            if f.type == "int" and not isinstance(value, int):
                raise ValueError(f"{f.name} must be an integer, got {value!r}")
        checks = {
            "threshold": 0 <= self.threshold <= 255,
            "a": self.a >= 8,
            "alpha": self.alpha >= 0,
            "n_min": self.n_min >= 2,
            "patch": self.patch % 2 == 1 and 25 <= self.patch <= 31,
            "rho": self.rho >= 1,
            "k": self.k >= 1,
            "m1": self.m1 >= 1,
            "m2": self.m2 >= 1,
            "r": self.r >= 1,
            "reg_cost": self.reg_cost > 0,
            "bpd_count": self.bpd_count >= 0,
            "folds": self.folds >= 2,
            "seed": self.seed >= 0,
        }
        bad = [name for name, ok in checks.items() if not ok]
        if bad:
            raise ValueError("out-of-range config values: " + ", ".join(f"{n}={getattr(self, n)!r}" for n in bad))

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path) as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ValueError("config must be a JSON object")
        return cls.from_dict(data)

    def deform_params(self, seed: int) -> DeformParams:
        return DeformParams(self.a, self.alpha, self.n_min, seed)


# -- dataset index and splits ----------------------------------------------


@dataclass
class DatasetIndex:
    root: Path
    classes: list
    items: dict  # class -> list of root-relative posix paths

    def all_items(self) -> list:
        return [p for c in self.classes for p in self.items[c]]

    def class_of(self, rel: str) -> str:
        return PurePosixPath(rel).parts[0]

    def path(self, rel: str) -> Path:
        return self.root / rel

    def to_dict(self) -> dict:
        return {"root": str(self.root), "classes": self.classes, "items": self.items}

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetIndex":
        return cls(Path(data["root"]), list(data["classes"]), {k: list(v) for k, v in data["items"].items()})


def ingest_dataset(root) -> DatasetIndex:
    """Index ``root/<class>/<image>`` in lexicographic order."""
    root = Path(root)
    if not root.is_dir():
        raise PipelineError(f"dataset root {root} is not a directory")
    classes, items = [], {}
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        images = sorted(
            p.relative_to(root).as_posix()
            for p in class_dir.rglob("*")
            if p.is_file() and p.suffix.lower() in IMAGE_EXTS
        )
        if not images:
            log.warning("class directory %s has no images, skipped", class_dir)
            continue
        classes.append(class_dir.name)
        items[class_dir.name] = images
    if not classes:
        raise PipelineError(f"no class directories with images under {root}")
    return DatasetIndex(root, classes, items)


@dataclass
class SplitManifest:
    folds: dict  # item -> fold id
    n_folds: int
    seed: int

    def fold_items(self, fold: int) -> list:
        return [item for item, f in self.folds.items() if f == fold]

    def training_items(self, test_fold: int) -> list:
        return [item for item, f in self.folds.items() if f != test_fold]

    def to_dict(self) -> dict:
        return {"n_folds": self.n_folds, "seed": self.seed, "folds": self.folds}

    @classmethod
    def from_dict(cls, data: dict) -> "SplitManifest":
        return cls({k: int(v) for k, v in data["folds"].items()}, int(data["n_folds"]), int(data["seed"]))


def make_splits(index: DatasetIndex, folds: int = 3, seed: int = 0) -> SplitManifest:
    """Shuffle each class with its own seeded permutation and deal round-robin."""
    if folds < 2:
        raise ValueError("folds must be >= 2")
    assignment = {}
    for cls in index.classes:
        members = index.items[cls]
        if len(members) < folds:
            log.warning("class %s has %d items for %d folds", cls, len(members), folds)
        rng = np.random.default_rng(derive_seed(seed, "split", cls))
        for pos, i in enumerate(rng.permutation(len(members))):
            assignment[members[i]] = pos % folds
    ordered = {item: assignment[item] for item in index.all_items()}
    return SplitManifest(ordered, folds, seed)


# -- manifests ---------------------------------------------------------------


@dataclass
class AugmentationManifest:
    header: dict
    records: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)

    def write(self, path) -> None:
        """JSON Lines: header first, then one record per input.

        Timing goes to a sidecar ``<name>.timing.json`` so the manifest itself
        is byte-identical across reruns.
        """
        path = Path(path)
        with open(path, "w") as fh:
            fh.write(json.dumps(self.header, sort_keys=True) + "\n")
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        with open(path.with_name(path.name + ".timing.json"), "w") as fh:
            json.dump(self.timing, fh, indent=1, sort_keys=True)

    @classmethod
    def read(cls, path) -> "AugmentationManifest":
        with open(path) as fh:
            lines = [json.loads(line) for line in fh if line.strip()]
        if not lines:
            raise ValueError(f"{path} is empty")
        return cls(lines[0], lines[1:])

    @property
    def warnings(self) -> list:
        return [r for r in self.records if r["status"] != "ok" or r.get("warnings")]


def _prepare_out(out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise PipelineError(f"output directory {out} is not writable: {exc}") from exc
    return out


# -- BPD ---------------------------------------------------------------------


def _bpd_item(job):
    src, rel, out_dir, count, params, threshold, copy_original = job
    start = time.perf_counter()
    stem = PurePosixPath(rel)
    record = {"input": rel, "outputs": [], "seeds": [], "params": params, "status": "ok", "error": None, "warnings": []}
    try:
        img = load_gray(src)
    except (RasterError, OSError) as exc:
        record.update(status="error", error=str(exc))
        return record, time.perf_counter() - start
    if not binarize(resize_256(img), threshold).any():
        record["warnings"].append("blank sketch, outputs are the unmodified input")
    target_dir = Path(out_dir) / stem.parent
    target_dir.mkdir(parents=True, exist_ok=True)
    if copy_original:
        shutil.copyfile(src, target_dir / stem.name)
        record["original"] = (stem.parent / stem.name).as_posix()
    item_seed = derive_seed(params["seed"], rel)
    for i in range(count):
        seed = derive_seed(item_seed, i)
        name = f"{stem.stem}_bpd_{i:03d}.png"
        p = DeformParams(params["a"], params["alpha"], params["n_min"], seed)
        save_gray(deform_sketch(img, p, threshold), target_dir / name)
        record["outputs"].append((stem.parent / name).as_posix())
        record["seeds"].append(seed)
    return record, time.perf_counter() - start


def run_bpd_augment(index: DatasetIndex, items, config: PipelineConfig, out_dir,
                    workers: int | None = None, copy_originals: bool = True,
                    manifest_name: str = "bpd_manifest.jsonl") -> AugmentationManifest:
    """Write ``bpd_count`` deformations of every item under ``out_dir``.

    The class layout is mirrored and the originals are copied alongside so the
    output tree is the merged training set. Items that fail to decode are
    recorded as errors and skipped.
    """
    out = _prepare_out(out_dir)
    workers = worker_count() if workers is None else workers
    params = {"a": config.a, "alpha": config.alpha, "n_min": config.n_min, "seed": config.seed}
    jobs = [(str(index.path(rel)), rel, str(out), config.bpd_count, params, config.threshold, copy_originals)
            for rel in items]
    start = time.perf_counter()
    results = _parallel_map(_bpd_item, jobs, workers)
    header = {"tool": "sketchforge", "version": __version__, "kind": "bpd", "seed": config.seed,
              "count": config.bpd_count, "threshold": config.threshold, "root": str(index.root)}
    manifest = AugmentationManifest(header, [r for r, _ in results])
    manifest.timing = {"total_s": time.perf_counter() - start, "items": {r["input"]: t for r, t in results}}
    manifest.write(out / manifest_name)
    for rec in manifest.warnings:
        log.warning("%s: %s", rec["input"], rec["error"] or "; ".join(rec["warnings"]))
    return manifest


# -- MSR ---------------------------------------------------------------------


def _skeleton_item(job):
    src, threshold = job
    try:
        img = load_gray(src)
    except (RasterError, OSError) as exc:
        return None, str(exc)
    mask = skeletonize(binarize(resize_256(img), threshold)).mask
    return np.packbits(mask), None


def collect_skeletons(paths, threshold: int = 128, workers: int = 1):
    """Skeletonize each path; returns ``(masks, errors)`` with ``None`` for failures."""
    results = _parallel_map(_skeleton_item, [(str(p), threshold) for p in paths], workers)
    masks = [None if packed is None else np.unpackbits(packed)[:256 * 256].reshape(256, 256).astype(bool)
             for packed, _ in results]
    return masks, [err for _, err in results]


def sample_descriptors(masks, rho: int, rng: np.random.Generator, patch: int = 31, chunk: int = 4096):
    """Subsample skeleton pixels across all masks and describe their patches.

    Returns ``(patches, descriptors)``; patches are ``bool`` to keep memory low.
    """
    refs = [(i, x, y) for i, m in enumerate(masks) if m is not None
            for y, x in zip(*np.nonzero(m))]
    refs = np.array(refs, dtype=np.int64).reshape(-1, 3)
    if rho > 1:
        keep = np.sort(rng.choice(len(refs), size=len(refs) // rho, replace=False))
        refs = refs[keep]
    patches = np.zeros((len(refs), patch, patch), dtype=bool)
    for i in np.unique(refs[:, 0]):
        rows = np.flatnonzero(refs[:, 0] == i)
        patches[rows] = extract_patches(masks[i], refs[rows, 1:], patch) > 0
    descriptors = np.concatenate(
        [hog_batch(patches[lo:lo + chunk]) for lo in range(0, len(patches), chunk)]
    ) if len(patches) else np.zeros((0, 144))
    return patches, descriptors


def split_pools(descriptors, labels, k: int, m2: int, rng: np.random.Generator):
    """Per-cluster training pools and a held-out set of up to ``m2`` per cluster.

    Held-out draws take at most half of a cluster so training keeps samples;
    a single-member cluster serves both roles.
    """
    train, held_x, held_y = [], [], []
    for j in range(k):
        members = np.flatnonzero(labels == j)
        order = members[rng.permutation(len(members))]
        if len(order) >= 2:
            n_held = min(m2, len(order) // 2)
            held, rest = order[:n_held], order[n_held:]
        else:
            held, rest = order, order
        train.append(descriptors[rest])
        held_x.append(descriptors[held])
        held_y.append(np.full(len(held), j))
    return train, np.concatenate(held_x), np.concatenate(held_y)


def build_codebook(masks, config: PipelineConfig, seed: int):
    """Subsample, describe and cluster patches; returns ``(codebook, descriptors, labels)``."""
    patches, desc = sample_descriptors(masks, config.rho, np.random.default_rng(derive_seed(seed, "subsample")),
                                       config.patch)
    if len(desc) < config.k:
        raise PipelineError(f"only {len(desc)} patches sampled, fewer than k={config.k}")
    km = kmeans(desc, config.k, np.random.default_rng(derive_seed(seed, "kmeans")))
    codebook = mean_strokes(patches, km.assignments, config.k, km.centroids)
    return codebook, desc, km.assignments


def train_classifier(codebook, descriptors, labels, config: PipelineConfig, seed: int):
    """Fit the ensemble and set the codebook weights from held-out precision."""
    rng = np.random.default_rng(derive_seed(seed, "holdout"))
    pools, held_x, held_y = split_pools(descriptors, labels, config.k, config.m2, rng)
    ensemble = train_ensemble(pools, config.m1, config.r, config.reg_cost, derive_seed(seed, "ensemble"))
    report = evaluate_precision(ensemble, held_x, held_y)
    return codebook.with_weights(report.weights), ensemble, report


def write_report(report, csv_path, json_path) -> None:
    np.savetxt(csv_path, report.confusion, fmt="%d", delimiter=",")
    with open(json_path, "w") as fh:
        json.dump({"accuracy": report.accuracy, "precision": report.precision.tolist(),
                   "weights": report.weights.tolist()}, fh, indent=1)


_MSR_STATE = {}


def _msr_init(model_path):
    _MSR_STATE["model"] = load_model(model_path)


def _msr_item(job):
    src, rel, out_dir, threshold = job
    start = time.perf_counter()
    record = {"input": rel, "outputs": [], "status": "ok", "error": None, "warnings": []}
    try:
        img = load_gray(src)
    except (RasterError, OSError) as exc:
        record.update(status="error", error=str(exc))
        return record, time.perf_counter() - start
    codebook, ensemble = _MSR_STATE["model"]
    result = reconstruct(img, codebook, ensemble, threshold)
    if result.blank:
        record["warnings"].append("blank sketch, reconstruction is empty")
    stem = PurePosixPath(rel)
    target = Path(out_dir) / stem.parent
    target.mkdir(parents=True, exist_ok=True)
    name = f"{stem.stem}_msr.png"
    save_gray(result.rendered, target / name)
    record["outputs"].append((stem.parent / name).as_posix())
    return record, time.perf_counter() - start


def reconstruct_items(index: DatasetIndex, items, model_path, out_dir, threshold: int, workers: int):
    jobs = [(str(index.path(rel)), rel, str(out_dir), threshold) for rel in items]
    return _parallel_map(_msr_item, jobs, workers, _msr_init, (str(model_path),))


def run_msr_pipeline(index: DatasetIndex, split: SplitManifest, config: PipelineConfig, out_dir,
                     workers: int | None = None, test_folds=None) -> list:
    """Build codebook and classifier per split from its training folds, then
    reconstruct every item of that split.

    Writes ``split_<s>/{codebook.bin, model.bin, confusion.csv,
    precision.json, msr_manifest.jsonl}`` and ``split_<s>/msr/<class>/<stem>_msr.png``.
    """
    out = _prepare_out(out_dir)
    workers = worker_count() if workers is None else workers
    results = []
    for s in range(split.n_folds) if test_folds is None else test_folds:
        start = time.perf_counter()
        split_dir = _prepare_out(out / f"split_{s}")
        split_seed = derive_seed(config.seed, "msr", s)
        train_items = split.training_items(s)
        masks, errors = collect_skeletons([index.path(rel) for rel in train_items], config.threshold, workers)
        for rel, err in zip(train_items, errors):
            if err:
                log.warning("%s skipped for codebook: %s", rel, err)
        codebook, desc, labels = build_codebook(masks, config, split_seed)
        codebook, ensemble, report = train_classifier(codebook, desc, labels, config, split_seed)
        save_codebook(codebook, split_dir / "codebook.bin")
        save_model(split_dir / "model.bin", codebook, ensemble)
        write_report(report, split_dir / "confusion.csv", split_dir / "precision.json")

        items = [rel for rel in index.all_items() if rel in split.folds]
        pairs = reconstruct_items(index, items, split_dir / "model.bin", split_dir / "msr", config.threshold, workers)
        header = {"tool": "sketchforge", "version": __version__, "kind": "msr", "seed": config.seed,
                  "split": s, "train_items": len(train_items), "root": str(index.root),
                  "config": asdict(config)}
        manifest = AugmentationManifest(header, [r for r, _ in pairs])
        manifest.timing = {"total_s": time.perf_counter() - start, "items": {r["input"]: t for r, t in pairs}}
        manifest.write(split_dir / "msr_manifest.jsonl")
        for rec in manifest.warnings:
            log.warning("%s: %s", rec["input"], rec["error"] or "; ".join(rec["warnings"]))
        results.append({"split": s, "codebook": split_dir / "codebook.bin", "model": split_dir / "model.bin",
                        "manifest": manifest, "report": report})
    return results


# -- inspection and export ---------------------------------------------------


def contact_sheet(images, columns: int) -> np.ndarray:
    """Row-major montage on white with 4 px gutters around every tile."""
    if not images:
        raise ValueError("contact sheet needs at least one image")
    if columns < 1:
        raise ValueError("columns must be >= 1")
    tile_h = max(im.shape[0] for im in images)
    tile_w = max(im.shape[1] for im in images)
    rows = math.ceil(len(images) / columns)
    sheet = np.full((rows * tile_h + (rows + 1) * GUTTER, columns * tile_w + (columns + 1) * GUTTER),
                    255, dtype=np.uint8)
    for i, im in enumerate(images):
        r, c = divmod(i, columns)
        y = GUTTER + r * (tile_h + GUTTER)
        x = GUTTER + c * (tile_w + GUTTER)
        sheet[y:y + im.shape[0], x:x + im.shape[1]] = im
    return sheet


def read_pairs(path) -> dict:
    """``sketch -> photo`` from a two-column CSV, optional header row."""
    pairs = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            if len(row) < 2:
                raise ValueError(f"{path}: expected 'sketch,photo' rows, got {row}")
            sketch, photo = row[0].strip(), row[1].strip()
            if (sketch.lower(), photo.lower()) == ("sketch", "photo"):
                continue
            pairs[PurePosixPath(sketch).as_posix()] = photo
    return pairs


def export_triplet_manifest(pairs_path, manifest_path, seed: int, out_path):
    """One ``anchor,positive,negative`` row per deformed sketch.

    The anchor is a BPD output, the positive its source sketch's paired
    photo and the negative a seeded draw among the other photos. Returns
    ``(n_triplets, skipped_inputs)``.
    """
    pairs = read_pairs(pairs_path)
    manifest = AugmentationManifest.read(manifest_path)
    base = Path(manifest_path).parent
    photos = sorted(set(pairs.values()))
    if len(photos) < 2:
        raise ValueError("need at least two distinct photos to draw negatives")
    slot = {p: i for i, p in enumerate(photos)}
    root = manifest.header.get("root")
    rng = np.random.default_rng(seed)
    rows, skipped = [], []
    for rec in manifest.records:
        if rec["status"] != "ok":
            continue
        rel = rec["input"]
        positive = pairs.get(rel)
        if positive is None and root is not None:
            positive = pairs.get((PurePosixPath(root) / rel).as_posix())
        if positive is None:
            skipped.append(rel)
            log.warning("no paired photo for %s, skipped", rel)
            continue
        for out in rec["outputs"]:
            pick = int(rng.integers(len(photos) - 1))
            if pick >= slot[positive]:
                pick += 1
            rows.append(((base / out).as_posix(), positive, photos[pick]))
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["anchor", "positive", "negative"])
        writer.writerows(rows)
    return len(rows), skipped
