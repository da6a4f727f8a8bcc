"""Accuracy reports, parameter/FLOP accounting, confusion matrices over real
or generated samples, Grad-CAM maps and sample-grid export."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .arch import (
    BackbonePlan,
    Classifier,
    GeneratorSpec,
    StudentSpec,
    TeacherBundle,
    build_classifier,
    build_generator,
    build_student,
)
from .attention import AttentionHead, aggregate
from .checkpoint import atomic_write_bytes, atomic_write_text
from .exceptions import SpecError

FLOP_CONVENTION = "1 FLOP = 1 multiply-accumulate of conv/linear layers; BN, activations, pooling excluded"


# ---------------------------------------------------------------------------
# Accuracy
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    per_header_acc: list = field(default_factory=list)
    ensemble_acc: Optional[float] = None
    attention_acc: Optional[float] = None
    teacher_accs: list = field(default_factory=list)
    teacher_ensemble_acc: Optional[float] = None
    num_samples: int = 0

    def as_dict(self):
        return asdict(self)


def _pct(correct, total):
    return 100.0 * correct / total


@torch.no_grad()
def evaluate(
    x: torch.Tensor,
    y: torch.Tensor,
    student=None,
    teachers: Optional[TeacherBundle] = None,
    attention: Optional[AttentionHead] = None,
    batch_size: int = 256,
) -> EvalReport:
    """Top-1 accuracies (percent) on a held-out split.

    Ensembles are scored by the argmax of the mean logits.
    """
    if len(x) == 0:
        raise SpecError("cannot evaluate on an empty split")
    rep = EvalReport(num_samples=len(x))
    models = [m for m in ([student] if student is not None else []) + (teachers.teachers if teachers else [])]
    modes = [(m, m.training) for m in models]
    for m in models:
        m.eval()
    try:
        head_c = ens_c = attn_c = tens_c = 0
        teach_c = None
        for i in range(0, len(x), batch_size):
            xb, yb = x[i : i + batch_size], y[i : i + batch_size]
            if student is not None:
                out = student(xb)
                hc = (out.header_logits.argmax(-1) == yb).sum(-1)
                head_c = hc if isinstance(head_c, int) else head_c + hc
                ens_c += (out.ensemble_logits.argmax(-1) == yb).sum().item()
                if attention is not None:
                    _, pred = aggregate(attention, out)
                    attn_c += (pred.argmax(-1) == yb).sum().item()
            if teachers is not None:
                tl = torch.stack([t(xb) for t in teachers.teachers])
                tc = (tl.argmax(-1) == yb).sum(-1)
                teach_c = tc if teach_c is None else teach_c + tc
                tens_c += (tl.mean(0).argmax(-1) == yb).sum().item()
    finally:
        for m, mode in modes:
            m.train(mode)
    n = len(x)
    if student is not None:
        rep.per_header_acc = [_pct(c, n) for c in head_c.tolist()]
        rep.ensemble_acc = _pct(ens_c, n)
        if attention is not None:
            rep.attention_acc = _pct(attn_c, n)
    if teachers is not None:
        rep.teacher_accs = [_pct(c, n) for c in teach_c.tolist()]
        rep.teacher_ensemble_acc = _pct(tens_c, n)
    return rep


# ---------------------------------------------------------------------------
# Cost accounting
# ---------------------------------------------------------------------------


@dataclass
class ModelCost:
    params: int
    flops: int
    input_size: tuple
    convention: str = FLOP_CONVENTION
    layers: list = field(default_factory=list)  # (name, params, flops) per module with own params or MACs

    def as_dict(self, with_layers=False):
        d = asdict(self)
        if not with_layers:
            d.pop("layers")
        return d


def _macs(module, inputs, output):
    if isinstance(module, nn.Conv2d):
        cin = module.in_channels // module.groups
        kh, kw = module.kernel_size
        return output.numel() // output.shape[0] * cin * kh * kw
    if isinstance(module, nn.ConvTranspose2d):
        cout = module.out_channels // module.groups
        kh, kw = module.kernel_size
        x = inputs[0]
        return x.numel() // x.shape[0] * cout * kh * kw
    if isinstance(module, nn.Linear):
        return output.numel() // output.shape[0] * module.in_features
    return 0


def _materialize(plan, num_classes):
    if isinstance(plan, nn.Module):
        return plan
    if isinstance(plan, StudentSpec):
        return build_student(plan)
    if isinstance(plan, GeneratorSpec):
        return build_generator(plan)
    if isinstance(plan, BackbonePlan):
        if num_classes is None:
            raise SpecError("a backbone plan needs num_classes to be costed")
        return build_classifier(plan, num_classes)
    raise SpecError(f"cannot cost {type(plan).__name__}")


def count_cost(plan, input_size, num_classes: Optional[int] = None) -> ModelCost:
    """Exact parameter count and MAC count for one forward of a single sample.

    ``input_size`` is ``(C, H, W)`` for image models or ``(noise_dim,)`` for
    generators; every entry must be a positive integer.
    """
    size = tuple(input_size) if isinstance(input_size, (tuple, list)) else (input_size,)
    if not size or any(not isinstance(s, int) or isinstance(s, bool) or s <= 0 for s in size):
        raise SpecError(f"count_cost needs a static positive input size, got {input_size!r}")
    model = _materialize(plan, num_classes)
    flops = {}
    handles = []
    for name, m in model.named_modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):

            def hook(mod, inp, out, name=name):
                flops[name] = flops.get(name, 0) + _macs(mod, inp, out)

            handles.append(m.register_forward_hook(hook))
    was = model.training
    model.eval()
    try:
        with torch.no_grad():
            dtype = next(model.parameters()).dtype
            model(torch.zeros((1,) + size, dtype=dtype))
    finally:
        model.train(was)
        for h in handles:
            h.remove()
    layers = []
    for name, m in model.named_modules():
        p = sum(t.numel() for t in m.parameters(recurse=False))
        f = flops.get(name, 0)
        if p or f:
            layers.append((name, p, f))
    total_params = sum(p.numel() for p in model.parameters())
    return ModelCost(params=total_params, flops=sum(flops.values()), input_size=size, layers=layers)


# ---------------------------------------------------------------------------
# Confusion matrices
# ---------------------------------------------------------------------------


@dataclass
class ConfusionRecord:
    """Row n accumulates the predictive distributions of samples labelled n."""

    matrix: np.ndarray
    counts: np.ndarray
    normalized: bool = False

    def merge(self, other: "ConfusionRecord") -> "ConfusionRecord":
        if self.normalized or other.normalized:
            raise ValueError("merge raw (unnormalised) records, then normalise")
        return ConfusionRecord(self.matrix + other.matrix, self.counts + other.counts)

    def row_normalized(self) -> "ConfusionRecord":
        m = self.matrix.copy()
        nz = self.counts > 0
        m[nz] = m[nz] / m[nz].sum(1, keepdims=True)
        return ConfusionRecord(m, self.counts.copy(), True)

    def off_diagonal_fraction(self) -> float:
        """Share of mass off the diagonal, with every non-empty row weighted equally."""
        m = self.row_normalized().matrix
        rows = self.counts > 0
        if not rows.any():
            return 0.0
        off = m[rows].sum(1) - np.diag(m)[rows]
        return float(off.mean())


@torch.no_grad()
def confusion_matrix(
    teacher,
    samples: torch.Tensor,
    labeling: str = "teacher_argmax",
    labels: Optional[torch.Tensor] = None,
    normalize: bool = False,
    num_classes: Optional[int] = None,
    batch_size: int = 256,
) -> ConfusionRecord:
    if labeling not in ("ground_truth", "teacher_argmax"):
        raise SpecError(f"unknown labeling {labeling!r}")
    if labeling == "ground_truth" and labels is None:
        raise SpecError("ground_truth labeling needs labels")
    was = teacher.training
    teacher.eval()
    try:
        probs = torch.cat([F.softmax(teacher(samples[i : i + batch_size]), -1) for i in range(0, len(samples), batch_size)])
    finally:
        teacher.train(was)
    probs = probs.double().cpu().numpy()
    c = num_classes or probs.shape[1]
    lab = probs.argmax(1) if labeling == "teacher_argmax" else labels.cpu().numpy()
    matrix = np.zeros((c, c))
    np.add.at(matrix, lab, probs)
    rec = ConfusionRecord(matrix, np.bincount(lab, minlength=c))
    return rec.row_normalized() if normalize else rec


def confusion_to_csv(record: ConfusionRecord, path=None) -> str:
    c = record.matrix.shape[0]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label"] + list(range(c)))
    for i, row in enumerate(record.matrix):
        w.writerow([i] + [repr(float(v)) for v in row])
    text = buf.getvalue()
    if path is not None:
        atomic_write_text(path, text)
    return text


def read_confusion_csv(path) -> np.ndarray:
    with open(path) as f:
        rows = list(csv.reader(f))
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]])


# ---------------------------------------------------------------------------
# Grad-CAM
# ---------------------------------------------------------------------------


def gradcam_map(
    model: nn.Module,
    sample: torch.Tensor,
    target_class: int,
    layer: nn.Module,
    select: Optional[Callable] = None,
) -> torch.Tensor:
    """Grad-CAM at ``layer`` for one sample (C, H, W); returns an (H, W) map in [0, 1].

    ``select`` maps the model output to logits (e.g. picks one student
    header). An all-zero gradient gives an all-zero map.
    """
    acts = {}
    handle = layer.register_forward_hook(lambda m, i, o: acts.__setitem__("a", o))
    was = model.training
    model.eval()
    try:
        x = sample.detach().unsqueeze(0).clone().requires_grad_(True)
        out = model(x)
        logits = select(out) if select is not None else out
        if not 0 <= target_class < logits.shape[-1]:
            raise SpecError(f"class {target_class} out of range for {logits.shape[-1]} classes")
        a = acts["a"]
        (grad,) = torch.autograd.grad(logits[0, target_class], a, allow_unused=True)
    finally:
        handle.remove()
        model.train(was)
    if grad is None:
        grad = torch.zeros_like(a)
    weights = grad.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * a).sum(1, keepdim=True)).detach()
    cam = F.interpolate(cam, size=sample.shape[-2:], mode="bilinear", align_corners=False)[0, 0]
    lo, hi = cam.min(), cam.max()
    if hi <= 0:
        return torch.zeros_like(cam)
    if hi - lo <= 1e-12 * hi:
        return torch.ones_like(cam)
    return (cam - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# Sample grids
# ---------------------------------------------------------------------------


def to_uint8(x) -> np.ndarray:
    """Map [-1, 1] to 0..255: -1 -> 0, 0 -> 128, +1 -> 255 (round half up)."""
    x = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    return np.floor((x + 1.0) * 127.5 + 0.5).astype(np.uint8)


def image_grid(images: np.ndarray, rows: int, cols: int, pad: int = 2) -> np.ndarray:
    """Tile (rows*cols, C, H, W) uint8 images; padding only between cells."""
    n, c, h, w = images.shape
    grid = np.zeros((c, rows * h + (rows - 1) * pad, cols * w + (cols - 1) * pad), dtype=np.uint8)
    for k in range(rows * cols):
        r, q = divmod(k, cols)
        grid[:, r * (h + pad) : r * (h + pad) + h, q * (w + pad) : q * (w + pad) + w] = images[k]
    return grid


def encode_png(chw: np.ndarray) -> bytes:
    img = Image.fromarray(chw[0] if chw.shape[0] == 1 else np.transpose(chw, (1, 2, 0)))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


@torch.no_grad()
def export_sample_grid(generator, rows: int, cols: int, seed: int, path, pad: int = 2) -> Path:
    """Render ``rows x cols`` generated samples to a PNG; same seed, same bytes."""
    if rows < 1 or cols < 1:
        raise SpecError("grid needs at least one row and one column")
    g = torch.Generator().manual_seed(seed)
    dtype = next(generator.parameters()).dtype
    z = torch.randn(rows * cols, generator.noise_dim, generator=g, dtype=dtype)
    was = generator.training
    generator.eval()
    try:
        x = generator(z)
    finally:
        generator.train(was)
    grid = image_grid(to_uint8(x.cpu().numpy()), rows, cols, pad)
    path = Path(path)
    atomic_write_bytes(path, encode_png(grid))
    return path
