"""Asymmetric adversarial data-free distillation loop."""

from __future__ import annotations

import json
import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import torch

from . import checkpoint as ckpt
from .arch import TeacherBundle, teacher_forward
from .exceptions import CheckpointError, NonFiniteLossError, SpecError
from .losses import (
    LossReport,
    LossWeights,
    bn_loss,
    ensemble_loss,
    feature_loss,
    generator_objective,
    header_loss,
    student_objective,
)

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "iter", "bn", "head", "ens", "feat", "student_total", "generator_total", "lr_s", "lr_g")


@dataclass(frozen=True)
class DistillSchedule:
    epochs: int = 300
    iters_per_epoch: int = 50
    student_steps: int = 5
    batch_size: int = 256
    lr_student: float = 0.1
    lr_generator: float = 1e-3
    lr_milestones: tuple = (100, 200)
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    generator_betas: tuple = (0.9, 0.999)
    generator_weight_decay: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "lr_milestones", tuple(int(m) for m in self.lr_milestones))
        object.__setattr__(self, "generator_betas", tuple(float(b) for b in self.generator_betas))
        for name in ("epochs", "iters_per_epoch", "student_steps"):
            if getattr(self, name) < 0:
                raise SpecError(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise SpecError("batch_size must be >= 1")
        if self.lr_student < 0 or self.lr_generator < 0:
            raise SpecError("learning rates must be >= 0")
        ms = self.lr_milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise SpecError(f"lr_milestones must be strictly increasing, got {list(ms)}")
        if ms and self.epochs and ms[-1] >= self.epochs:
            raise SpecError(f"lr milestone {ms[-1]} is not below epochs={self.epochs}")


@dataclass
class DistillState:
    epoch: int = 0  # completed epochs
    iteration: int = 0  # completed iterations, all epochs
    lr_s: float = 0.1
    lr_g: float = 1e-3
    student_updates: int = 0
    generator_updates: int = 0
    seed: int = 0
    last: dict = field(default_factory=dict)


def lr_decay(state: DistillState, schedule: DistillSchedule):
    """Apply the milestone decay after ``state.epoch`` completed epochs."""
    if state.epoch in schedule.lr_milestones:
        state.lr_s *= schedule.lr_decay
        state.lr_g *= schedule.lr_decay
    return state.lr_s, state.lr_g


@contextmanager
def frozen(module):
    flags = [p.requires_grad for p in module.parameters()]
    module.requires_grad_(False)
    try:
        yield module
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)


def _check_finite(loss, what, diagnostics):
    if not torch.isfinite(loss).all():
        raise NonFiniteLossError(f"non-finite {what} loss ({loss.item()}); diagnostics: {diagnostics}", diagnostics)


def student_step(generator, student, teachers: TeacherBundle, weights: LossWeights, optimizer, z, diagnostics=None):
    """One update of the student on a fresh generated batch.

    The generator is only sampled; its BN layers keep training-mode
    statistics collection, as do the student's.
    """
    generator.train()
    student.train()
    with torch.no_grad():
        x = generator(z)
        touts = teacher_forward(teachers, x)
    t_logits = torch.stack([o.logits for o in touts])
    t_feats = torch.stack([o.feature for o in touts])
    out = student(x)
    head = header_loss(out, t_logits)
    ens = ensemble_loss(out, t_logits)
    feat = feature_loss(out, t_feats)
    loss = student_objective(head, ens, feat, weights)
    _check_finite(loss, "student", diagnostics)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return LossReport(head=head.item(), ens=ens.item(), feat=feat.item(), student_total=loss.item())


def generator_step(generator, student, teachers: TeacherBundle, weights: LossWeights, optimizer, z, diagnostics=None):
    """One update of the generator: ascend the header discrepancy while
    matching the teachers' stored BN statistics."""
    generator.train()
    student.train()
    x = generator(z)
    with frozen(student):
        out = student(x)
        touts = teacher_forward(teachers, x, capture_bn=weights.gamma > 0)
    t_logits = torch.stack([o.logits for o in touts])
    head = header_loss(out, t_logits)
    bn = bn_loss([o.bn for o in touts]) if weights.gamma > 0 else torch.zeros((), dtype=head.dtype)
    loss = generator_objective(head, bn, weights)
    _check_finite(loss, "generator", diagnostics)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return LossReport(head=head.item(), bn=bn.item(), generator_total=loss.item())


def make_optimizers(student, generator, schedule: DistillSchedule):
    opt_s = torch.optim.SGD(
        student.parameters(), lr=schedule.lr_student, momentum=schedule.momentum, weight_decay=schedule.weight_decay
    )
    opt_g = torch.optim.Adam(
        generator.parameters(),
        lr=schedule.lr_generator,
        betas=schedule.generator_betas,
        weight_decay=schedule.generator_weight_decay,
    )
    return opt_s, opt_g


class Distiller:
    """Runs the loop: per iteration ``student_steps`` student updates then one
    generator update, each on its own noise batch; learning rates decay at
    milestone epochs; one metrics record per iteration; one checkpoint per
    epoch when ``checkpoint_dir`` is given.
    """

    def __init__(
        self,
        student,
        generator,
        teachers: TeacherBundle,
        weights: LossWeights,
        schedule: DistillSchedule,
        seed: int = 0,
        manifest: Optional[dict] = None,
    ):
        self.student = student
        self.generator = generator
        self.teachers = teachers
        self.weights = weights
        self.schedule = schedule
        self.manifest = dict(manifest or {})
        self.opt_s, self.opt_g = make_optimizers(student, generator, schedule)
        self.noise = torch.Generator().manual_seed(seed)
        self.state = DistillState(lr_s=schedule.lr_student, lr_g=schedule.lr_generator, seed=seed)

    def sample_noise(self):
        batch_seed = int(torch.randint(0, 2**62, (1,), generator=self.noise).item())
        g = torch.Generator().manual_seed(batch_seed)
        dtype = next(self.generator.parameters()).dtype
        z = torch.randn(self.schedule.batch_size, self.generator.noise_dim, generator=g, dtype=dtype)
        return z, batch_seed

    def _set_lrs(self):
        for group in self.opt_s.param_groups:
            group["lr"] = self.state.lr_s
        for group in self.opt_g.param_groups:
            group["lr"] = self.state.lr_g

    def run_iteration(self) -> dict:
        st = self.state
        rep = LossReport()
        for step in range(self.schedule.student_steps):
            z, bseed = self.sample_noise()
            diag = {"epoch": st.epoch, "iter": st.iteration, "student_step": step, "batch_seed": bseed}
            rep = student_step(self.generator, self.student, self.teachers, self.weights, self.opt_s, z, diag)
            st.student_updates += 1
        z, bseed = self.sample_noise()
        diag = {"epoch": st.epoch, "iter": st.iteration, "generator_step": True, "batch_seed": bseed}
        grep = generator_step(self.generator, self.student, self.teachers, self.weights, self.opt_g, z, diag)
        st.generator_updates += 1
        record = {
            "epoch": st.epoch,
            "iter": st.iteration,
            "bn": grep.bn,
            "head": rep.head,
            "ens": rep.ens,
            "feat": rep.feat,
            "student_total": rep.student_total,
            "generator_total": grep.generator_total,
            "lr_s": st.lr_s,
            "lr_g": st.lr_g,
        }
        st.iteration += 1
        st.last = record
        return record

    def run(
        self,
        metrics_path=None,
        checkpoint_dir=None,
        on_record: Optional[Callable[[dict], None]] = None,
    ) -> list:
        """Run the remaining epochs; returns the records emitted by this call."""
        records = []
        log_file = None
        if metrics_path is not None:
            Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
            log_file = open(metrics_path, "a")
        try:
            self._set_lrs()
            while self.state.epoch < self.schedule.epochs:
                for _ in range(self.schedule.iters_per_epoch):
                    rec = self.run_iteration()
                    records.append(rec)
                    if log_file is not None:
                        log_file.write(json.dumps(rec) + "\n")
                        log_file.flush()
                    if on_record is not None:
                        on_record(rec)
                self.state.epoch += 1
                lr_decay(self.state, self.schedule)
                self._set_lrs()
                last = self.state.last
                log.info(
                    "epoch %d/%d head %.4f bn %.4f lr_s %.4g",
                    self.state.epoch,
                    self.schedule.epochs,
                    last.get("head", math.nan),
                    last.get("bn", math.nan),
                    self.state.lr_s,
                )
                if checkpoint_dir is not None:
                    self.save(Path(checkpoint_dir) / f"epoch_{self.state.epoch:04d}")
        finally:
            if log_file is not None:
                log_file.close()
        return records

    def save(self, path) -> Path:
        manifest = {
            **self.manifest,
            "kind": "distill",
            "schedule": asdict(self.schedule),
            "weights": asdict(self.weights),
            "state": {k: v for k, v in asdict(self.state).items()},
            "loss_conventions": LOSS_CONVENTIONS,
        }
        return ckpt.save_checkpoint(
            path,
            {
                "student": self.student,
                "generator": self.generator,
                "opt_student": self.opt_s,
                "opt_generator": self.opt_g,
                "rng": {"noise": self.noise.get_state()},
            },
            manifest,
        )

    def resume(self, path) -> None:
        c = ckpt.load_checkpoint(path, {"student": self.student, "generator": self.generator})
        if c.manifest.get("kind") != "distill":
            raise CheckpointError(f"{path} is not a distillation checkpoint")
        ckpt.restore(c, student=self.student, generator=self.generator, opt_student=self.opt_s, opt_generator=self.opt_g)
        self.noise.set_state(c.blobs["rng"]["noise"])
        self.state = DistillState(**c.manifest["state"])
        self._set_lrs()


LOSS_CONVENTIONS = {
    "l1_reduction": "sum over classes/features, mean over batch, mean over headers",
    "bn_layer_reduction": "mean over layers, then mean over teachers",
    "bn_sigma": "standard deviation; stored = sqrt(running_var), observed = sqrt(biased batch var)",
    "ensemble_prediction": "arithmetic mean of header logits",
    "generator_terms": "-head + gamma*bn (ensemble/feature terms do not reach the generator)",
}


def distill_run(schedule: DistillSchedule, student, generator, teachers, weights, seed=0, **kwargs):
    d = Distiller(student, generator, teachers, weights, schedule, seed=seed)
    records = d.run(**kwargs)
    return student, generator, records
