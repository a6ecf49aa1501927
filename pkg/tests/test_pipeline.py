import csv
import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sketchforge.classifier import load_model
from sketchforge.codebook import load_codebook
from sketchforge.pipeline import (
    AugmentationManifest,
    DatasetIndex,
    PipelineConfig,
    PipelineError,
    contact_sheet,
    derive_seed,
    export_triplet_manifest,
    ingest_dataset,
    make_splits,
    read_pairs,
    run_bpd_augment,
    run_msr_pipeline,
    split_pools,
    worker_count,
)
from sketches import write_dataset

SMALL = dict(k=6, rho=2, m1=10, m2=10, r=2, bpd_count=2, seed=3)


def fake_index(n_classes, per_class):
    classes = [f"c{i:03d}" for i in range(n_classes)]
    items = {c: [f"{c}/{j:03d}.png" for j in range(per_class)] for c in classes}
    return DatasetIndex(None, classes, items)


def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(0, "a/b.png") == derive_seed(0, "a/b.png")
    assert derive_seed(0, "a/b.png") != derive_seed(1, "a/b.png")
    assert derive_seed(0, "ab", "c") != derive_seed(0, "a", "bc")
    assert 0 <= derive_seed("x") < 2**64


def test_worker_count(monkeypatch):
    monkeypatch.delenv("SKETCHFORGE_WORKERS", raising=False)
    assert worker_count() == 1
    monkeypatch.setenv("SKETCHFORGE_WORKERS", "8")
    assert worker_count() == 8
    monkeypatch.setenv("SKETCHFORGE_WORKERS", "lots")
    with pytest.raises(PipelineError):
        worker_count()


def test_config_defaults_and_validation(tmp_path):
    cfg = PipelineConfig()
    assert (cfg.threshold, cfg.a, cfg.alpha, cfg.n_min, cfg.patch, cfg.rho) == (128, 32, 8.0, 8, 31, 3)
    assert (cfg.k, cfg.m1, cfg.m2, cfg.r, cfg.reg_cost, cfg.bpd_count) == (150, 100, 7000, 20, 149.0, 10)
    for bad in ({"k": 0}, {"alpha": -1}, {"patch": 30}, {"r": True}, {"k": 1.5}, {"threshold": 300}, {"colour": 1}):
        with pytest.raises(ValueError):
            PipelineConfig.from_dict(bad)
    (tmp_path / "c.json").write_text(json.dumps({"k": 12, "alpha": 4}))
    assert PipelineConfig.load(tmp_path / "c.json").k == 12
    (tmp_path / "l.json").write_text("[1, 2]")
    with pytest.raises(ValueError):
        PipelineConfig.load(tmp_path / "l.json")


def test_ingest(tmp_path, caplog):
    write_dataset(tmp_path, 2, 3)
    (tmp_path / "empty").mkdir()
    (tmp_path / "cls0" / "notes.txt").write_text("x")
    with caplog.at_level(logging.WARNING):
        index = ingest_dataset(tmp_path)
    assert "empty" in caplog.text
    assert index.classes == ["cls0", "cls1"]
    assert index.items["cls0"] == ["cls0/s00.png", "cls0/s01.png", "cls0/s02.png"]
    assert ingest_dataset(tmp_path).to_dict() == index.to_dict()
    assert DatasetIndex.from_dict(json.loads(json.dumps(index.to_dict()))).items == index.items
    with pytest.raises(PipelineError):
        ingest_dataset(tmp_path / "empty")
    with pytest.raises(PipelineError):
        ingest_dataset(tmp_path / "missing")


def test_split_sizes_for_80():
    split = make_splits(fake_index(1, 80), 3, 0)
    sizes = sorted(len(split.fold_items(f)) for f in range(3))
    assert sizes == [26, 27, 27]


@given(st.integers(1, 6), st.integers(1, 20), st.integers(2, 5), st.integers(0, 100))
@settings(max_examples=30, deadline=None)
def test_split_partition(n_classes, per_class, folds, seed):
    index = fake_index(n_classes, per_class)
    split = make_splits(index, folds, seed)
    assert sorted(split.folds) == sorted(index.all_items())
    for c in index.classes:
        sizes = [sum(1 for i in index.items[c] if split.folds[i] == f) for f in range(folds)]
        assert max(sizes) - min(sizes) <= 1
    assert make_splits(index, folds, seed).folds == split.folds
    assert set(split.training_items(0)).isdisjoint(split.fold_items(0))


def test_split_warns_on_small_class(caplog):
    with caplog.at_level(logging.WARNING):
        make_splits(fake_index(1, 2), 3, 0)
    assert "2 items for 3 folds" in caplog.text


def test_split_pools_holds_out_at_most_half():
    desc = np.arange(20, dtype=float)[:, None]
    labels = np.array([0] * 9 + [1] * 10 + [2])
    train, hx, hy = split_pools(desc, labels, 3, m2=7000, rng=np.random.default_rng(0))
    assert [len(t) for t in train] == [5, 5, 1]
    assert np.bincount(hy).tolist() == [4, 5, 1]
    assert set(train[0].ravel()).isdisjoint(hx[hy == 0].ravel())


def test_bpd_augment_tree_and_manifest(tmp_path):
    data = tmp_path / "data"
    write_dataset(data, 2, 2)
    (data / "cls1" / "broken.png").write_bytes(b"\x89PNG garbage")
    index = ingest_dataset(data)
    cfg = PipelineConfig(bpd_count=3, seed=5)
    manifest = run_bpd_augment(index, index.all_items(), cfg, tmp_path / "out", workers=1)
    assert len(manifest.records) == 5
    bad = [r for r in manifest.records if r["status"] != "ok"]
    assert len(bad) == 1 and bad[0]["input"] == "cls1/broken.png" and bad[0]["error"]
    ok = [r for r in manifest.records if r["status"] == "ok"]
    assert all(len(r["outputs"]) == 3 == len(set(r["seeds"])) for r in ok)
    assert ok[0]["outputs"][0] == "cls0/s00_bpd_000.png"
    written = sorted(p.relative_to(tmp_path / "out").as_posix() for p in (tmp_path / "out").rglob("*.png"))
    referenced = sorted(o for r in ok for o in r["outputs"] + [r["original"]])
    assert written == referenced
    back = AugmentationManifest.read(tmp_path / "out" / "bpd_manifest.jsonl")
    assert back.records == json.loads(json.dumps(manifest.records))
    timing = json.loads((tmp_path / "out" / "bpd_manifest.jsonl.timing.json").read_text())
    assert set(timing["items"]) == set(index.all_items())


def test_bpd_augment_unwritable_output(tmp_path):
    write_dataset(tmp_path / "data", 1, 1)
    (tmp_path / "file").write_text("x")
    index = ingest_dataset(tmp_path / "data")
    with pytest.raises(PipelineError):
        run_bpd_augment(index, index.all_items(), PipelineConfig(bpd_count=1), tmp_path / "file" / "out")


def test_msr_pipeline_single_split(tmp_path):
    write_dataset(tmp_path / "data", 2, 4, seed=1)
    index = ingest_dataset(tmp_path / "data")
    split = make_splits(index, 2, 0)
    cfg = PipelineConfig(folds=2, **SMALL)
    results = run_msr_pipeline(index, split, cfg, tmp_path / "msr", workers=1, test_folds=[1])
    assert [r["split"] for r in results] == [1]
    split_dir = tmp_path / "msr" / "split_1"
    for name in ("codebook.bin", "model.bin", "confusion.csv", "precision.json", "msr_manifest.jsonl"):
        assert (split_dir / name).exists()
    recs = AugmentationManifest.read(split_dir / "msr_manifest.jsonl").records
    assert [r["input"] for r in recs] == index.all_items()
    assert all((split_dir / "msr" / r["outputs"][0]).exists() for r in recs)
    cb = load_codebook(split_dir / "codebook.bin")
    assert cb.k == 6 and cb.weights is not None and cb.weights.max() == pytest.approx(1.0)
    _, ens = load_model(split_dir / "model.bin")
    assert ens.r == 2
    confusion = np.loadtxt(split_dir / "confusion.csv", delimiter=",")
    assert confusion.shape == (6, 6)
    first = (split_dir / "codebook.bin").read_bytes()
    run_msr_pipeline(index, split, cfg, tmp_path / "msr2", workers=1, test_folds=[1])
    assert (tmp_path / "msr2" / "split_1" / "codebook.bin").read_bytes() == first


def test_contact_sheet_layout():
    tiles = [np.zeros((256, 256), dtype=np.uint8)] * 7
    assert contact_sheet(tiles, 7).shape == (256 + 8, 7 * 256 + 8 * 4)
    sheet = contact_sheet(tiles[:6], 3)
    assert sheet.shape == (2 * 256 + 3 * 4, 3 * 256 + 4 * 4)
    assert np.all(sheet[:4] == 255) and np.all(sheet[4:260, 4:260] == 0)
    with pytest.raises(ValueError):
        contact_sheet([], 3)


def _bpd_manifest(path, inputs, count):
    header = {"kind": "bpd", "root": "data"}
    records = [{"input": rel, "outputs": [f"{rel[:-4]}_bpd_{i:03d}.png" for i in range(count)],
                "status": "ok"} for rel in inputs]
    AugmentationManifest(header, records).write(path)


def test_read_pairs(tmp_path):
    (tmp_path / "p.csv").write_text("sketch,photo\n# comment\na/1.png, photos/1.jpg\n\nb/2.png,photos/2.jpg\n")
    assert read_pairs(tmp_path / "p.csv") == {"a/1.png": "photos/1.jpg", "b/2.png": "photos/2.jpg"}
    (tmp_path / "bad.csv").write_text("only-one-column\n")
    with pytest.raises(ValueError):
        read_pairs(tmp_path / "bad.csv")


def test_triplets(tmp_path):
    inputs = [f"c{i % 3}/s{i}.png" for i in range(7)]
    with open(tmp_path / "pairs.csv", "w") as fh:
        fh.write("sketch,photo\n")
        for i, rel in enumerate(inputs[:6]):
            fh.write(f"{rel},photos/{i}.jpg\n")
    _bpd_manifest(tmp_path / "m.jsonl", inputs, 10)
    n, skipped = export_triplet_manifest(tmp_path / "pairs.csv", tmp_path / "m.jsonl", 4, tmp_path / "t.csv")
    assert n == 60 and skipped == [inputs[6]]
    with open(tmp_path / "t.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["anchor", "positive", "negative"]
    assert len(rows) == 61
    assert all(pos != neg for _, pos, neg in rows[1:])
    assert rows[1][0] == (tmp_path / "c0/s0_bpd_000.png").as_posix()
    first = (tmp_path / "t.csv").read_bytes()
    export_triplet_manifest(tmp_path / "pairs.csv", tmp_path / "m.jsonl", 4, tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_bytes() == first


def test_triplets_need_two_photos(tmp_path):
    (tmp_path / "pairs.csv").write_text("a.png,p.jpg\n")
    _bpd_manifest(tmp_path / "m.jsonl", ["a.png"], 2)
    with pytest.raises(ValueError):
        export_triplet_manifest(tmp_path / "pairs.csv", tmp_path / "m.jsonl", 0, tmp_path / "t.csv")
