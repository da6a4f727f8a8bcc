"""Training objectives.

Reduction convention for every l1 term: sum over the class (or feature)
dimension, mean over the batch, mean over header/teacher pairs. The BN term
averages over layers inside a teacher, then over teachers.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .arch import BNStatRecord, ForwardResult
from .exceptions import SpecError


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 5.0
    beta: float = 0.2
    gamma: float = 0.1
    lam: float = 0.0

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not math.isfinite(v) or v < 0:
                raise SpecError(f"loss weight {name} must be finite and >= 0, got {v}")


@dataclass
class LossReport:
    bn: float = float("nan")
    head: float = float("nan")
    ens: float = float("nan")
    feat: float = float("nan")
    student_total: float = float("nan")
    generator_total: float = float("nan")

    def as_dict(self):
        return asdict(self)


def _stack(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.stack(list(x))


def _pairs(student, teacher, what):
    if student.shape[0] != teacher.shape[0]:
        raise SpecError(f"{student.shape[0]} student headers vs {teacher.shape[0]} teacher {what}")
    if student.shape[1:] != teacher.shape[1:]:
        raise SpecError(f"student {what} shape {tuple(student.shape[1:])} vs teacher {tuple(teacher.shape[1:])}")


def bn_loss(records: Sequence[Sequence[BNStatRecord]]) -> torch.Tensor:
    """Multi-teacher BN statistics constraint.

    ``records[n]`` holds one record per BN layer of teacher n.
    """
    if not records:
        raise SpecError("bn_loss needs records from at least one teacher")
    per_teacher = []
    for n, layers in enumerate(records):
        if not layers:
            raise SpecError(f"teacher {n} has an empty BN registry")
        terms = []
        for r in layers:
            if r.batch_mean.shape != r.running_mean.shape or r.batch_std.shape != r.running_std.shape:
                raise SpecError(
                    f"teacher {n} layer {r.layer}: observed {tuple(r.batch_mean.shape)} channels "
                    f"vs stored {tuple(r.running_mean.shape)}"
                )
            terms.append(
                torch.linalg.vector_norm(r.batch_mean - r.running_mean)
                + torch.linalg.vector_norm(r.batch_std - r.running_std)
            )
        per_teacher.append(torch.stack(terms).mean())
    return torch.stack(per_teacher).mean()


def header_loss(student_out: ForwardResult, teacher_logits) -> torch.Tensor:
    t = _stack(teacher_logits)
    s = student_out.header_logits
    _pairs(s, t, "logits")
    return (s - t).abs().sum(-1).mean()


def ensemble_loss(student_out: ForwardResult, teacher_logits) -> torch.Tensor:
    t = _stack(teacher_logits)
    _pairs(student_out.header_logits, t, "logits")
    return (student_out.ensemble_logits - t.mean(0)).abs().sum(-1).mean()


def feature_loss(student_out: ForwardResult, teacher_features) -> torch.Tensor:
    t = _stack(teacher_features)
    s = student_out.feature_targets
    if s.shape[-1] != t.shape[-1]:
        raise SpecError(
            f"student feature dim {s.shape[-1]} != teacher feature dim {t.shape[-1]}; "
            "enable feature_projection to pair them"
        )
    _pairs(s, t, "features")
    return (s - t).abs().sum(-1).mean()


def student_objective(head, ens, feat, weights: LossWeights):
    return head + weights.alpha * ens + weights.beta * feat


def generator_objective(head, bn, weights: LossWeights):
    return -head + weights.gamma * bn


def kd_baseline_loss(student_logits, teacher_logits, labels, weights: LossWeights, temperature: float = 1.0):
    """Data-required KD: KL from the teacher's softened distribution to the
    student's, plus ``lam`` times cross-entropy on the true labels."""
    num_classes = student_logits.shape[-1]
    if labels is not None and labels.numel() and (labels.max() >= num_classes or labels.min() < 0):
        raise SpecError(f"label index out of range for {num_classes} classes")
    t = temperature
    kl = F.kl_div(
        F.log_softmax(student_logits / t, dim=-1),
        F.log_softmax(teacher_logits / t, dim=-1),
        reduction="batchmean",
        log_target=True,
    ) * (t * t)
    if weights.lam == 0:
        return kl
    return kl + weights.lam * F.cross_entropy(student_logits, labels)
