"""Key-value aggregation of header predictions with a learned query, and its
training on mixtures of real and generated samples."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .arch import ForwardResult, TeacherBundle
from .exceptions import SpecError

log = logging.getLogger(__name__)


class AttentionHead(nn.Module):
    """Holds the query vector. It starts at zero, i.e. plain averaging."""

    def __init__(self, dim: int, num_classes: Optional[int] = None):
        super().__init__()
        self.dim = dim
        self.num_classes = num_classes
        self.q = nn.Parameter(torch.zeros(dim))


def aggregate(head: AttentionHead, forward: ForwardResult):
    """Return ``(weights, prediction)`` of shapes (B, N) and (B, C)."""
    keys = forward.header_features.transpose(0, 1)  # (B, N, D)
    values = forward.header_logits.transpose(0, 1)  # (B, N, C)
    if keys.shape[-1] != head.q.shape[0]:
        raise SpecError(f"query dim {head.q.shape[0]} != header feature dim {keys.shape[-1]}")
    scores = keys @ head.q.to(keys.dtype) / math.sqrt(head.dim)
    w = torch.softmax(scores, dim=-1)
    return w, (w.unsqueeze(-1) * values).sum(1)


@torch.no_grad()
def pseudo_label(teachers: TeacherBundle, generated: torch.Tensor) -> torch.Tensor:
    # torch.argmax returns the first maximal index, so ties go to the lowest class
    mean_logits = torch.stack([t(generated) for t in teachers.teachers]).mean(0)
    return mean_logits.argmax(-1)


def mixup(x: torch.Tensor, g: torch.Tensor, theta) -> torch.Tensor:
    """``theta * x + (1 - theta) * g``; ``theta`` is a scalar or one value per sample."""
    if x.shape != g.shape:
        raise SpecError(f"cannot mix {tuple(x.shape)} with {tuple(g.shape)}")
    theta = torch.as_tensor(theta, dtype=x.dtype, device=x.device)
    if theta.dim() == 1:
        theta = theta.view(-1, *([1] * (x.dim() - 1)))
    if theta.min() < 0 or theta.max() > 1:
        raise SpecError("mixing coefficient must lie in [0, 1]")
    return theta * x + (1 - theta) * g


@dataclass
class MixupBatch:
    x: torch.Tensor
    y: torch.Tensor
    generated: torch.Tensor
    theta: torch.Tensor  # (B,)
    pseudo: torch.Tensor

    @property
    def mixed(self) -> torch.Tensor:
        return mixup(self.x, self.generated, self.theta)


def _check_labels(labels, num_classes):
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise SpecError(f"label out of range for {num_classes} classes")


def attention_loss(head: AttentionHead, student, batch: MixupBatch, forward: Optional[ForwardResult] = None):
    """Mixed cross-entropy of the aggregated prediction on the mixed sample.

    ``forward`` may carry a precomputed student forward on ``batch.mixed``;
    the student is treated as a constant either way.
    """
    if forward is None:
        with torch.no_grad():
            forward = student(batch.mixed)
    _, pred = aggregate(head, forward)
    c = pred.shape[-1]
    _check_labels(batch.y, c)
    _check_labels(batch.pseudo, c)
    theta = torch.as_tensor(batch.theta, dtype=pred.dtype).reshape(-1).expand(pred.shape[0])
    ce_real = F.cross_entropy(pred, batch.y, reduction="none")
    ce_fake = F.cross_entropy(pred, batch.pseudo, reduction="none")
    return (theta * ce_real + (1 - theta) * ce_fake).mean()


@dataclass
class AttentionConfig:
    lr: float = 0.01
    weight_decay: float = 1e-4
    epochs: int = 30
    batch_size: int = 128
    val_fraction: float = 0.2
    seed: int = 0


def _stratified_holdout(y, fraction, gen):
    val = []
    for c in torch.unique(y):
        idx = (y == c).nonzero().flatten()
        idx = idx[torch.randperm(len(idx), generator=gen)]
        k = int(round(fraction * len(idx)))
        val.append(idx[:k])
    val = torch.cat(val) if val else torch.empty(0, dtype=torch.long)
    mask = torch.ones(len(y), dtype=torch.bool)
    mask[val] = False
    return mask.nonzero().flatten(), val


@torch.no_grad()
def _score(head, student, x, y, batch_size=512):
    correct, ce = 0, 0.0
    for i in range(0, len(x), batch_size):
        _, pred = aggregate(head, student(x[i : i + batch_size]))
        correct += (pred.argmax(-1) == y[i : i + batch_size]).sum().item()
        ce += F.cross_entropy(pred, y[i : i + batch_size], reduction="sum").item()
    return correct / len(x), ce / len(x)


def train_attention(
    head: AttentionHead,
    student,
    generator,
    teachers: TeacherBundle,
    real_x: torch.Tensor,
    real_y: torch.Tensor,
    config: AttentionConfig = AttentionConfig(),
):
    """Fit the query on the real subset; student, generator and teachers stay frozen.

    Each epoch walks the training part of the subset once; for every real
    sample a fresh generated sample and its own mixing coefficient are drawn
    (Beta(1, 1), i.e. uniform). The query with the best held-out accuracy
    (ties: lower cross-entropy, then earlier) is kept; the zero query is the
    epoch-0 candidate. Returns the head and a per-epoch history.
    """
    if len(real_x) == 0:
        raise SpecError(
            "attention training needs a non-empty real subset; "
            "without real data use plain average aggregation of the headers"
        )
    gen = torch.Generator().manual_seed(config.seed)
    if config.val_fraction > 0 and len(real_x) >= 4 * len(torch.unique(real_y)):
        train_idx, val_idx = _stratified_holdout(real_y, config.val_fraction, gen)
    else:
        train_idx = val_idx = torch.arange(len(real_x))

    was = [(m, m.training) for m in (student, generator)]
    student.eval()
    generator.eval()
    params = [(m, [p.requires_grad for p in m.parameters()]) for m in (student, generator)]
    for m, _ in params:
        m.requires_grad_(False)

    opt = torch.optim.AdamW(head.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    vx, vy = real_x[val_idx], real_y[val_idx]
    best_acc, best_ce = _score(head, student, vx, vy)
    best_state = copy.deepcopy(head.state_dict())
    history = [{"epoch": 0, "loss": float("nan"), "val_acc": best_acc, "val_ce": best_ce}]
    noise_dim = generator.noise_dim
    try:
        for epoch in range(1, config.epochs + 1):
            order = train_idx[torch.randperm(len(train_idx), generator=gen)]
            total, seen = 0.0, 0
            for i in range(0, len(order), config.batch_size):
                idx = order[i : i + config.batch_size]
                x, y = real_x[idx], real_y[idx]
                z = torch.randn(len(idx), noise_dim, generator=gen)
                theta = torch.rand(len(idx), generator=gen)
                with torch.no_grad():
                    g = generator(z)
                    batch = MixupBatch(x, y, g, theta, pseudo_label(teachers, g))
                    fwd = student(batch.mixed)
                loss = attention_loss(head, student, batch, forward=fwd)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
                seen += len(idx)
            acc, ce = _score(head, student, vx, vy)
            history.append({"epoch": epoch, "loss": total / max(seen, 1), "val_acc": acc, "val_ce": ce})
            log.info("attention epoch %d loss %.4f val_acc %.4f", epoch, total / max(seen, 1), acc)
            if acc > best_acc or (acc == best_acc and ce < best_ce):
                best_acc, best_ce = acc, ce
                best_state = copy.deepcopy(head.state_dict())
    finally:
        for (m, flags) in params:
            for p, f in zip(m.parameters(), flags):
                p.requires_grad_(f)
        for m, mode in was:
            m.train(mode)
    head.load_state_dict(best_state)
    return head, history
