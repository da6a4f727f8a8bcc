"""Dataset ingestion.

Accepted layouts under ``root``:

* ``root/<class>/*.png|jpg|...`` - split per class with ``split_seed``;
* ``root/train/<class>/...`` and ``root/test/<class>/...`` - predefined split;
* a packed ``.npz`` file (``root`` itself or ``root/data.npz``) with
  ``images`` (N, H, W, C) uint8, ``labels`` (N,) and optionally ``is_test``
  (N,) bool and ``class_names``.

Images are resized to the configured square size and scaled to [-1, 1].
"""

from __future__ import annotations

import colorsys
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".ppm", ".pgm", ".tif", ".tiff", ".webp"}


class DatasetError(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class DatasetDescriptor:
    name: str
    root: str
    input_size: int
    num_classes: int
    channels: int = 3
    split_seed: int = 0
    train_fraction: float = 0.8

    @classmethod
    def from_config(cls, cfg):
        d = cfg.tree["dataset"]
        return cls(
            name=d["name"],
            root=d["root"],
            input_size=d["input_size"],
            num_classes=d["num_classes"],
            channels=d["channels"],
            split_seed=d["split_seed"],
            train_fraction=d["train_fraction"],
        )


@dataclass
class IngestReport:
    files_seen: int = 0
    ingested: int = 0
    errors: list = field(default_factory=list)  # (path, reason)
    missing_classes: list = field(default_factory=list)
    train_counts: dict = field(default_factory=dict)
    test_counts: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.errors and not self.missing_classes

    def summary(self) -> str:
        lines = [f"{self.ingested}/{self.files_seen} files ingested"]
        if self.missing_classes:
            lines.append("missing classes: " + ", ".join(map(str, self.missing_classes)))
        lines += [f"  {p}: {why}" for p, why in self.errors]
        return "\n".join(lines)


@dataclass
class Splits:
    train_x: torch.Tensor
    train_y: torch.Tensor
    test_x: torch.Tensor
    test_y: torch.Tensor
    class_names: list
    report: IngestReport


def to_unit_range(images_uint8: np.ndarray) -> torch.Tensor:
    """(N, H, W, C) uint8 -> (N, C, H, W) float32 in [-1, 1]."""
    x = torch.from_numpy(np.ascontiguousarray(images_uint8)).permute(0, 3, 1, 2).float()
    return x / 127.5 - 1.0


def load_image(path, size: int, channels: int) -> np.ndarray:
    with Image.open(path) as img:
        img.load()
        img = img.convert("L" if channels == 1 else "RGB")
        if img.size != (size, size):
            img = img.resize((size, size), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.uint8)
    return arr[..., None] if channels == 1 else arr


def _resize_array(images, size, channels):
    if images.shape[1:3] == (size, size):
        return images
    out = np.empty((len(images), size, size, images.shape[3]), dtype=np.uint8)
    for i, im in enumerate(images):
        pil = Image.fromarray(im[..., 0] if im.shape[-1] == 1 else im)
        arr = np.asarray(pil.resize((size, size), Image.BILINEAR), dtype=np.uint8)
        out[i] = arr[..., None] if arr.ndim == 2 else arr
    return out


def _class_dirs(root: Path):
    return sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))


def _read_class_tree(root: Path, desc: DatasetDescriptor, report: IngestReport, class_names=None):
    dirs = _class_dirs(root)
    names = class_names or [d.name for d in dirs]
    by_name = {d.name: d for d in dirs}
    images, labels = [], []
    for label, name in enumerate(names):
        d = by_name.get(name)
        if d is None:
            report.missing_classes.append(name)
            continue
        for f in sorted(d.iterdir()):
            if not f.is_file() or f.name.startswith("."):
                continue
            report.files_seen += 1
            if f.suffix.lower() not in IMAGE_EXTS:
                report.errors.append((str(f), "not a recognised image extension"))
                continue
            try:
                images.append(load_image(f, desc.input_size, desc.channels))
                labels.append(label)
                report.ingested += 1
            except (UnidentifiedImageError, OSError, ValueError) as e:
                report.errors.append((str(f), f"unreadable: {e}"))
    for extra in sorted(set(by_name) - set(names)):
        report.errors.append((str(by_name[extra]), "class directory not present in the training split"))
    if images:
        arr = np.stack(images)
    else:
        arr = np.zeros((0, desc.input_size, desc.input_size, desc.channels), dtype=np.uint8)
    return arr, np.asarray(labels, dtype=np.int64), names


def stratified_split(labels: np.ndarray, train_fraction: float, seed: int):
    """Per-class shuffled split; returns boolean ``is_test`` mask."""
    rng = np.random.default_rng(seed)
    is_test = np.zeros(len(labels), dtype=bool)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_train = int(round(train_fraction * len(idx)))
        is_test[idx[n_train:]] = True
    return is_test


def ingest_dataset(desc: DatasetDescriptor, strict: bool = True) -> Splits:
    root = Path(desc.root)
    report = IngestReport()
    if not root.exists():
        raise DatasetError(f"dataset root {root} does not exist", report)
    npz = root if root.suffix == ".npz" else root / "data.npz"
    is_test = None
    if npz.is_file():
        with np.load(npz, allow_pickle=False) as z:
            images, labels = z["images"], z["labels"].astype(np.int64)
            is_test = z["is_test"].astype(bool) if "is_test" in z else None
            names = [str(n) for n in z["class_names"]] if "class_names" in z else [str(i) for i in range(desc.num_classes)]
        if images.ndim == 3:
            images = images[..., None]
        report.files_seen = report.ingested = len(images)
        bad = np.flatnonzero((labels < 0) | (labels >= desc.num_classes))
        for i in bad:
            report.errors.append((f"{npz}[{i}]", f"label {labels[i]} out of range"))
        keep = np.setdiff1d(np.arange(len(labels)), bad)
        report.ingested -= len(bad)
        images, labels = images[keep], labels[keep]
        is_test = is_test[keep] if is_test is not None else None
        images = _resize_array(images, desc.input_size, desc.channels)
        present = set(np.unique(labels).tolist())
        report.missing_classes = [names[c] if c < len(names) else str(c) for c in range(desc.num_classes) if c not in present]
    elif (root / "train").is_dir() and (root / "test").is_dir():
        tr_x, tr_y, names = _read_class_tree(root / "train", desc, report)
        te_x, te_y, _ = _read_class_tree(root / "test", desc, report, class_names=names)
        images = np.concatenate([tr_x, te_x])
        labels = np.concatenate([tr_y, te_y])
        is_test = np.r_[np.zeros(len(tr_y), bool), np.ones(len(te_y), bool)]
    else:
        images, labels, names = _read_class_tree(root, desc, report)

    if len(names) < desc.num_classes and not report.missing_classes:
        report.missing_classes = [f"<class {i}>" for i in range(len(names), desc.num_classes)]
    if len(names) > desc.num_classes:
        report.errors.append((str(root), f"{len(names)} classes found, config says {desc.num_classes}"))
    if strict and not report.ok:
        raise DatasetError(f"dataset {desc.name} at {root} failed ingestion:\n{report.summary()}", report)
    if is_test is None:
        is_test = stratified_split(labels, desc.train_fraction, desc.split_seed)

    x = to_unit_range(images)
    y = torch.from_numpy(labels)
    mask = torch.from_numpy(is_test)
    splits = Splits(x[~mask], y[~mask], x[mask], y[mask], list(names), report)
    report.train_counts = {int(c): int(n) for c, n in zip(*np.unique(labels[~is_test], return_counts=True))}
    report.test_counts = {int(c): int(n) for c, n in zip(*np.unique(labels[is_test], return_counts=True))}
    log.info("ingested %s: %d train / %d test", desc.name, len(splits.train_y), len(splits.test_y))
    return splits


def stratified_subset(y: torch.Tensor, fraction: float, seed: int) -> torch.Tensor:
    """Indices of a class-stratified random subset (at least one per class when fraction > 0)."""
    rng = np.random.default_rng(seed)
    labels = y.cpu().numpy()
    picked = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        k = int(round(fraction * len(idx)))
        if fraction > 0:
            k = max(k, 1)
        picked.append(rng.permutation(idx)[:k])
    return torch.from_numpy(np.sort(np.concatenate(picked))) if picked else torch.empty(0, dtype=torch.long)


# ---------------------------------------------------------------------------
# Synthetic desk-scale dataset
# ---------------------------------------------------------------------------

SHAPE_CLASSES = (
    "disc",
    "square",
    "triangle",
    "plus",
    "ring",
    "h_stripes",
    "v_stripes",
    "checker",
    "diagonal",
    "x_cross",
)


def _shape_mask(kind, size, rng):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx, cy = rng.uniform(0.35, 0.65, 2) * size
    r = rng.uniform(0.22, 0.36) * size
    dx, dy = xx - cx, yy - cy
    w = rng.uniform(0.08, 0.14) * size
    period = rng.uniform(4.0, 8.0)
    phase = rng.uniform(0, period)
    if kind == "disc":
        return dx**2 + dy**2 <= r**2
    if kind == "square":
        return (np.abs(dx) <= r * 0.85) & (np.abs(dy) <= r * 0.85)
    if kind == "triangle":
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == "plus":
        return ((np.abs(dx) <= w) & (np.abs(dy) <= r)) | ((np.abs(dy) <= w) & (np.abs(dx) <= r))
    if kind == "ring":
        d = np.sqrt(dx**2 + dy**2)
        return (d <= r) & (d >= r - 1.6 * w)
    if kind == "h_stripes":
        return ((yy + phase) % period) < period / 2
    if kind == "v_stripes":
        return ((xx + phase) % period) < period / 2
    if kind == "checker":
        return (((xx + phase) // (period / 1.5) + (yy + phase) // (period / 1.5)) % 2) == 0
    if kind == "diagonal":
        return ((xx + yy + phase) % (period * 1.4)) < period * 0.7
    if kind == "x_cross":
        return ((np.abs(dx - dy) <= w * 1.2) | (np.abs(dx + dy) <= w * 1.2)) & (np.abs(dx) <= r) & (np.abs(dy) <= r)
    raise ValueError(kind)


def synth_image(label: int, size: int, rng) -> np.ndarray:
    """One sample: a shape or texture in a class-typical hue (neighbouring
    classes overlap) on a dark or mid-grey, weakly tinted background."""
    mask = _shape_mask(SHAPE_CLASSES[label], size, rng)
    hue = (label / len(SHAPE_CLASSES) + rng.normal(0, 0.04)) % 1.0
    fg = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.5, 1.0), rng.uniform(0.6, 1.0))) * 255
    value = 0.15 if rng.uniform() < 0.5 else 0.5
    bg = np.array(colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0, 0.3), value)) * 255
    img = np.where(mask[..., None], fg, bg) + rng.normal(0, 12, (size, size, 3))
    return np.clip(img, 0, 255).astype(np.uint8)


def make_shapes_dataset(root, per_class: int = 500, size: int = 32, seed: int = 0, fmt: str = "png") -> Path:
    """Write a 10-class procedural image set as per-class PNG directories
    (``fmt="png"``) or a single ``data.npz`` (``fmt="npz"``)."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for label in range(len(SHAPE_CLASSES)):
        for _ in range(per_class):
            images.append(synth_image(label, size, rng))
            labels.append(label)
    root.mkdir(parents=True, exist_ok=True)
    if fmt == "npz":
        np.savez_compressed(
            root / "data.npz", images=np.stack(images), labels=np.asarray(labels), class_names=np.asarray(SHAPE_CLASSES)
        )
        return root
    counters = {}
    for img, label in zip(images, labels):
        d = root / SHAPE_CLASSES[label]
        d.mkdir(exist_ok=True)
        k = counters.get(label, 0)
        counters[label] = k + 1
        Image.fromarray(img).save(d / f"{k:05d}.png")
    return root
