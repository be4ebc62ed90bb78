import json
import shutil

import numpy as np
import pytest
from PIL import Image

from rgb2point.data import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    DatasetManifest,
    PreprocessSpec,
    build_manifest,
    load_gt_cloud,
    preprocess_image,
)
from rgb2point.errors import (
    DuplicateIdError,
    ImageReadError,
    InsufficientPointsError,
    ManifestError,
    MissingFileError,
    UnknownCategoryError,
)
from rgb2point.pointcloud import PointCloud, load_cloud, save_cloud

MEAN = np.asarray(IMAGENET_MEAN, dtype=np.float32)
STD = np.asarray(IMAGENET_STD, dtype=np.float32)


@pytest.fixture
def tree_copy(small_tree, tmp_path):
    dst = tmp_path / "tree"
    shutil.copytree(small_tree, dst)
    return dst


# ---------------------------------------------------------------- manifests


def test_manifest_enumerates_sorted(small_tree):
    m = build_manifest(small_tree)
    assert [(r.category, r.sample_id) for r in m.records] == [
        ("box", "box0000"), ("box", "box0001"), ("box", "box0002"),
        ("prism", "prism0000"), ("prism", "prism0001"), ("prism", "prism0002"),
    ]
    assert all(r.split == "train" for r in m.records)
    assert all(len(r.images) == 2 for r in m.records)
    assert m.categories == ["box", "prism"]


def test_split_file_is_passed_through(small_tree, tmp_path):
    assignment = {
        "box0000": "train", "box0001": "train", "box0002": "test",
        "prism0000": "train", "prism0001": "train", "prism0002": "test",
    }
    split = tmp_path / "split.json"
    split.write_text(json.dumps(assignment))
    m = build_manifest(small_tree, split_file=split)
    assert {r.sample_id: r.split for r in m.records} == assignment
    assert len(m.split("train")) == 4 and len(m.split("test")) == 2
    assert not {r.sample_id for r in m.split("train")} & {r.sample_id for r in m.split("test")}


def test_split_file_subset_and_bad_label(small_tree, tmp_path):
    split = tmp_path / "split.json"
    split.write_text(json.dumps({"box0001": "test"}))
    assert [r.sample_id for r in build_manifest(small_tree, split_file=split).records] == ["box0001"]
    split.write_text(json.dumps({"box0001": "val"}))
    with pytest.raises(ManifestError):
        build_manifest(small_tree, split_file=split)


def test_missing_cloud_names_record(tree_copy):
    for name in ("cloud.ply", "mesh.obj"):
        (tree_copy / "prism" / "prism0001" / name).unlink()
    with pytest.raises(MissingFileError, match="prism/prism0001"):
        build_manifest(tree_copy)


def test_missing_file_detected_at_validation(small_tree):
    m = build_manifest(small_tree)
    m.records[0].cloud = str(small_tree / "box" / "box0000" / "gone.ply")
    with pytest.raises(MissingFileError, match="box/box0000"):
        m.validate()


def test_duplicate_id(tree_copy):
    shutil.copytree(tree_copy / "box" / "box0000", tree_copy / "prism" / "box0000")
    with pytest.raises(DuplicateIdError):
        build_manifest(tree_copy)


def test_unknown_category(small_tree):
    with pytest.raises(UnknownCategoryError):
        build_manifest(small_tree, categories=["box"])
    assert len(build_manifest(small_tree, categories=["box", "prism"]).records) == 6


def test_missing_root(tmp_path):
    with pytest.raises(FileNotFoundError):
        build_manifest(tmp_path / "absent")


def test_real_manifests_are_test_only(small_tree, tmp_path):
    m = build_manifest(small_tree, source="pix3d-real")
    assert all(r.split == "test" for r in m.records)
    split = tmp_path / "split.json"
    split.write_text(json.dumps({"box0000": "train"}))
    with pytest.raises(ManifestError):
        build_manifest(small_tree, source="pix3d-real", split_file=split)


def test_manifest_serialization_deterministic(small_tree, tmp_path):
    a = build_manifest(small_tree).to_jsonl()
    b = build_manifest(small_tree).to_jsonl()
    assert a == b
    path = tmp_path / "m.jsonl"
    build_manifest(small_tree, gt_resolution=256).write(path)
    back = DatasetManifest.read(path)
    assert back.gt_resolution == 256
    assert back.to_jsonl() == path.read_text()
    assert len(path.read_text().splitlines()) == 6


def test_round_robin_views(small_tree):
    r = build_manifest(small_tree).records[0]
    assert [r.image_for_epoch(e) for e in range(4)] == [r.images[0], r.images[1], r.images[0], r.images[1]]


# ---------------------------------------------------------------- images


def test_preprocess_resizes_render(small_tree):
    path = next((small_tree / "box" / "box0000" / "renders").glob("*.png"))
    assert Image.open(path).size == (137, 137)
    arr = preprocess_image(path)
    assert arr.shape == (224, 224, 3) and arr.dtype == np.float32
    lo, hi = (0 - MEAN) / STD, (1 - MEAN) / STD
    assert np.all(arr >= lo - 1e-6) and np.all(arr <= hi + 1e-6)
    assert np.array_equal(arr, preprocess_image(path))


def test_preprocess_keeps_224_image(tmp_path):
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, (224, 224, 3), dtype=np.uint8)
    Image.fromarray(pixels).save(tmp_path / "x.png")
    expected = (pixels.astype(np.float32) / 255.0 - MEAN) / STD
    np.testing.assert_allclose(preprocess_image(tmp_path / "x.png"), expected, atol=1e-6)


def test_rgba_composited_over_white(tmp_path):
    rgba = np.array(
        [
            [[255, 0, 0, 255], [0, 255, 0, 0]],
            [[0, 0, 255, 128], [10, 20, 30, 64]],
        ],
        dtype=np.uint8,
    )
    Image.fromarray(rgba, "RGBA").save(tmp_path / "a.png")
    alpha = rgba[..., 3:].astype(np.float32) / 255.0
    manual = rgba[..., :3].astype(np.float32) * alpha + 255.0 * (1 - alpha)
    expected = (manual / 255.0 - MEAN) / STD
    out = preprocess_image(tmp_path / "a.png", PreprocessSpec(size=2))
    np.testing.assert_allclose(out, expected, atol=1.5 / 255.0 / STD.min())
    # fully transparent pixel is pure white
    np.testing.assert_allclose(out[0, 1], (1 - MEAN) / STD, atol=1e-6)


def test_grayscale_expanded(tmp_path):
    Image.fromarray(np.full((8, 8), 100, dtype=np.uint8), "L").save(tmp_path / "g.png")
    out = preprocess_image(tmp_path / "g.png", PreprocessSpec(size=8))
    np.testing.assert_allclose(out[0, 0], (100 / 255.0 - MEAN) / STD, atol=1e-6)


def test_unreadable_image(tmp_path):
    (tmp_path / "x.png").write_bytes(b"garbage")
    with pytest.raises(ImageReadError):
        preprocess_image(tmp_path / "x.png")
    with pytest.raises(ImageReadError):
        preprocess_image(tmp_path / "missing.png")


# ---------------------------------------------------------------- ground truth


def test_gt_subsample_is_subset(small_tree):
    rec = build_manifest(small_tree).records[0]
    full = load_cloud(rec.cloud).points
    sub = load_gt_cloud(rec, 1024, seed=3, mode="none").points
    assert sub.shape == (1024, 3)
    rows = {tuple(p) for p in full}
    assert all(tuple(p) in rows for p in sub)
    assert len({tuple(p) for p in sub}) == 1024


def test_gt_identity_when_sizes_match(small_tree):
    rec = build_manifest(small_tree).records[0]
    full = load_cloud(rec.cloud).points
    np.testing.assert_array_equal(load_gt_cloud(rec, 2048, mode="none").points, full)


def test_gt_deterministic_and_normalized(small_tree):
    rec = build_manifest(small_tree).records[2]
    a = load_gt_cloud(rec, 512, seed=1)
    assert a == load_gt_cloud(rec, 512, seed=1)
    np.testing.assert_allclose(a.points.mean(0), 0, atol=1e-9)
    assert np.sqrt((a.points ** 2).sum(1)).max() == pytest.approx(1.0)
    assert a.category == rec.category and a.id == rec.sample_id


def test_gt_resamples_mesh_when_cloud_too_small(small_tree):
    rec = build_manifest(small_tree).records[0]
    assert len(load_gt_cloud(rec, 8192)) == 8192


def test_gt_insufficient_points(tree_copy):
    (tree_copy / "box" / "box0000" / "mesh.obj").unlink()
    save_cloud(PointCloud(np.random.default_rng(0).normal(size=(100, 3))), tree_copy / "box" / "box0000" / "cloud.ply")
    rec = build_manifest(tree_copy).records[0]
    with pytest.raises(InsufficientPointsError):
        load_gt_cloud(rec, 1024)
