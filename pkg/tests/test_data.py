import numpy as np
import pytest
import torch
from PIL import Image

from mfskd.data import DatasetDescriptor, DatasetError, ingest_dataset, make_shapes_dataset, stratified_subset


def image_tree(root, classes=2, per_class=100, size=(12, 10)):
    rng = np.random.default_rng(0)
    for c in range(classes):
        d = root / f"class{c}"
        d.mkdir(parents=True)
        for i in range(per_class):
            arr = rng.integers(0, 256, (size[1], size[0], 3), dtype=np.uint8)
            Image.fromarray(arr).save(d / f"{i:03d}.png")
    return root


def test_80_20_split_per_class(tmp_path):
    root = image_tree(tmp_path / "ds")
    s = ingest_dataset(DatasetDescriptor("t", str(root), 8, 2))
    assert s.report.train_counts == {0: 80, 1: 80}
    assert s.report.test_counts == {0: 20, 1: 20}
    assert s.train_x.shape == (160, 3, 8, 8)
    assert s.train_x.min() >= -1 and s.train_x.max() <= 1


def test_split_is_deterministic(tmp_path):
    root = image_tree(tmp_path / "ds", per_class=20)
    a = ingest_dataset(DatasetDescriptor("t", str(root), 8, 2, split_seed=3))
    b = ingest_dataset(DatasetDescriptor("t", str(root), 8, 2, split_seed=3))
    c = ingest_dataset(DatasetDescriptor("t", str(root), 8, 2, split_seed=4))
    assert torch.equal(a.test_x, b.test_x)
    assert not torch.equal(a.test_x, c.test_x)


def test_resize_to_128(tmp_path):
    root = image_tree(tmp_path / "ds", classes=2, per_class=2, size=(300, 200))
    s = ingest_dataset(DatasetDescriptor("t", str(root), 128, 2, train_fraction=0.5))
    assert s.train_x.shape[1:] == (3, 128, 128)


def test_pixel_scaling():
    from mfskd.data import to_unit_range

    x = to_unit_range(np.array([[[[0, 255, 128]]]], dtype=np.uint8))
    assert x.flatten().tolist() == pytest.approx([-1.0, 1.0, 128 / 127.5 - 1], abs=1e-6)


def test_corrupt_and_missing_are_itemised(tmp_path):
    root = image_tree(tmp_path / "ds", classes=2, per_class=3)
    (root / "class1" / "bad.png").write_bytes(b"not an image")
    (root / "class1" / "notes.txt").write_text("x")
    with pytest.raises(DatasetError) as e:
        ingest_dataset(DatasetDescriptor("t", str(root), 8, 3))
    rep = e.value.report
    assert rep.files_seen == 8
    assert rep.ingested + len(rep.errors) == rep.files_seen
    assert {p.split("/")[-1] for p, _ in rep.errors} == {"bad.png", "notes.txt"}
    assert rep.missing_classes
    lenient = ingest_dataset(DatasetDescriptor("t", str(root), 8, 3), strict=False)
    assert lenient.report.ingested == 6


def test_missing_root():
    with pytest.raises(DatasetError):
        ingest_dataset(DatasetDescriptor("t", "/nonexistent/path", 8, 2))


def test_npz_layout_and_shapes_generator(tmp_path):
    root = make_shapes_dataset(tmp_path / "s", per_class=10, size=16, seed=1, fmt="npz")
    s = ingest_dataset(DatasetDescriptor("s", str(root), 16, 10))
    assert len(s.train_y) == 80 and len(s.test_y) == 20
    again = make_shapes_dataset(tmp_path / "s2", per_class=10, size=16, seed=1, fmt="npz")
    assert (root / "data.npz").read_bytes() == (again / "data.npz").read_bytes()


def test_shapes_png_layout(tmp_path):
    root = make_shapes_dataset(tmp_path / "p", per_class=5, size=16, seed=0, fmt="png")
    s = ingest_dataset(DatasetDescriptor("p", str(root), 16, 10))
    assert s.report.files_seen == 50 and s.report.ok


def test_train_test_directory_layout(tmp_path):
    image_tree(tmp_path / "ds" / "train", classes=2, per_class=4)
    image_tree(tmp_path / "ds" / "test", classes=2, per_class=2)
    s = ingest_dataset(DatasetDescriptor("t", str(tmp_path / "ds"), 8, 2))
    assert len(s.train_y) == 8 and len(s.test_y) == 4


def test_stratified_subset():
    y = torch.arange(100) % 4
    idx = stratified_subset(y, 0.1, 0)
    assert torch.bincount(y[idx]).tolist() == [2, 2, 2, 2]
    assert torch.equal(idx, stratified_subset(y, 0.1, 0))
    assert len(stratified_subset(y, 0.0, 0)) == 0
