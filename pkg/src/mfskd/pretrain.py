"""Teacher pretraining: N classifiers that differ only in their init seed."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .arch import BackbonePlan, Classifier, TeacherBundle, build_classifier
from .evaluation import evaluate

log = logging.getLogger(__name__)


@dataclass
class PretrainRecipe:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple = (100, 150)
    lr_decay: float = 0.1
    crop_padding: int = 4
    flip: bool = True
    accuracy_floor: float = 0.0

    @classmethod
    def from_config(cls, cfg):
        t = dict(cfg.tree["teachers"]["pretrain"])
        t["milestones"] = tuple(t["milestones"])
        return cls(**t)


def augment(x: torch.Tensor, padding: int, flip: bool, gen: torch.Generator) -> torch.Tensor:
    """Random crop after zero padding plus random horizontal flip, per sample."""
    b, _, h, w = x.shape
    if padding > 0:
        p = F.pad(x, (padding, padding, padding, padding))
        oy = torch.randint(0, 2 * padding + 1, (b,), generator=gen)
        ox = torch.randint(0, 2 * padding + 1, (b,), generator=gen)
        rows = (oy[:, None] + torch.arange(h))[:, :, None]  # (B, H, 1)
        cols = (ox[:, None] + torch.arange(w))[:, None, :]  # (B, 1, W)
        bi = torch.arange(b)[:, None, None]
        x = p.permute(0, 2, 3, 1)[bi, rows, cols].permute(0, 3, 1, 2)
    if flip:
        m = torch.rand(b, generator=gen) < 0.5
        x = torch.where(m[:, None, None, None], x.flip(-1), x)
    return x.contiguous()


def train_classifier(model: Classifier, x, y, recipe: PretrainRecipe, seed: int = 0, test=None):
    gen = torch.Generator().manual_seed(seed + 1_000_003)
    opt = torch.optim.SGD(model.parameters(), lr=recipe.lr, momentum=recipe.momentum, weight_decay=recipe.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, list(recipe.milestones), recipe.lr_decay)
    history = []
    for epoch in range(recipe.epochs):
        model.train()
        order = torch.randperm(len(x), generator=gen)
        total = correct = 0
        loss_sum = 0.0
        for i in range(0, len(order), recipe.batch_size):
            idx = order[i : i + recipe.batch_size]
            xb = augment(x[idx], recipe.crop_padding, recipe.flip, gen)
            logits = model(xb)
            loss = F.cross_entropy(logits, y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += loss.item() * len(idx)
            correct += (logits.argmax(-1) == y[idx]).sum().item()
            total += len(idx)
        sched.step()
        rec = {"epoch": epoch + 1, "loss": loss_sum / total, "train_acc": 100.0 * correct / total}
        if test is not None:
            rec["test_acc"] = evaluate(test[0], test[1], teachers=TeacherBundle([model])).teacher_accs[0]
            # TeacherBundle froze the model; unfreeze for the next epoch
            model.requires_grad_(True)
        history.append(rec)
        log.info("teacher seed %d epoch %d %s", seed, epoch + 1, rec)
    return model, history


@dataclass
class PretrainReport:
    seeds: list
    teacher_accs: list
    teacher_ensemble_acc: float
    histories: list = field(default_factory=list)
    warnings: list = field(default_factory=list)


def pretrain_teachers(plan: BackbonePlan, num_classes: int, seeds, splits, recipe: PretrainRecipe):
    """Train one classifier per seed; returns the frozen bundle and a report."""
    teachers, histories = [], []
    for seed in seeds:
        torch.manual_seed(seed)
        model = build_classifier(plan, num_classes)
        model, hist = train_classifier(model, splits.train_x, splits.train_y, recipe, seed=seed)
        teachers.append(model)
        histories.append(hist)
    bundle = TeacherBundle(teachers)
    rep = evaluate(splits.test_x, splits.test_y, teachers=bundle)
    warnings = [
        f"teacher {n} (seed {s}) test accuracy {a:.2f}% is below the floor {recipe.accuracy_floor:.2f}%"
        for n, (s, a) in enumerate(zip(seeds, rep.teacher_accs))
        if a < recipe.accuracy_floor
    ]
    for w in warnings:
        log.warning(w)
    return bundle, PretrainReport(list(seeds), rep.teacher_accs, rep.teacher_ensemble_acc, histories, warnings)
