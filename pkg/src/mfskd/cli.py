"""Command-line entry point.

    mfskd <command> --config <path> [--resume <ckpt>] [--seed <int>] [--out <dir>]

Artifacts go to ``<out>/run-<config hash prefix>/``; the output root is
``--out``, else ``$MFSKD_OUTPUT_ROOT``, else ``output_dir`` from the config.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from . import plotting
from .arch import TeacherBundle, build_classifier, build_generator, build_student
from .attention import AttentionHead, train_attention
from .config import ExperimentConfig, load_config
from .data import DatasetDescriptor, DatasetError, ingest_dataset, make_shapes_dataset, stratified_subset
from .distill import LOSS_CONVENTIONS, Distiller
from .evaluation import (
    confusion_matrix,
    confusion_to_csv,
    count_cost,
    evaluate,
    export_sample_grid,
    gradcam_map,
)
from .exceptions import CheckpointError, PrerequisiteError, SpecError
from .pretrain import PretrainRecipe, pretrain_teachers

log = logging.getLogger("mfskd")

COMMANDS = ("pretrain", "distill", "attention", "eval", "export-samples", "count", "confusion", "gradcam")
OUTPUT_ENV = "MFSKD_OUTPUT_ROOT"


def run_dir(cfg: ExperimentConfig, out=None) -> Path:
    root = out or os.environ.get(OUTPUT_ENV) or cfg["output_dir"]
    return Path(root) / f"run-{cfg.hash[:12]}"


def _base_manifest(cfg, kind):
    return {"kind": kind, "config_hash": cfg.hash, "seed": cfg["seed"]}


def _write_config(cfg, rd: Path):
    rd.mkdir(parents=True, exist_ok=True)
    ckpt.atomic_write_text(rd / "config.yaml", cfg.to_yaml())


def _splits(cfg):
    return ingest_dataset(DatasetDescriptor.from_config(cfg))


def _require(path: Path, what: str, command: str):
    if not (path / ckpt.MANIFEST).exists():
        raise PrerequisiteError(f"{what} not found at {path}; run `mfskd {command} --config ...` first")


# ---------------------------------------------------------------------------
# loading artifacts
# ---------------------------------------------------------------------------


def load_teachers(cfg, rd: Path) -> TeacherBundle:
    plan = cfg.teacher_plan()
    teachers = []
    for n in range(cfg["teachers.count"]):
        path = rd / "teachers" / f"teacher_{n}"
        _require(path, f"teacher {n}", "pretrain")
        model = build_classifier(plan, cfg["dataset.num_classes"])
        c = ckpt.load_checkpoint(path, {"model": model})
        ckpt.restore(c, model=model)
        teachers.append(model)
    return TeacherBundle(teachers)


def build_models(cfg):
    torch.manual_seed(cfg["seed"])
    student = build_student(cfg.student_spec())
    generator = build_generator(cfg.generator_spec())
    return student, generator


def load_distilled(cfg, rd: Path):
    path = rd / "distill" / "final"
    _require(path, "distilled student", "distill")
    student, generator = build_models(cfg)
    c = ckpt.load_checkpoint(path, {"student": student, "generator": generator})
    ckpt.restore(c, student=student, generator=generator)
    return student, generator


def load_attention(rd: Path, student):
    path = rd / "attention"
    if not (path / ckpt.MANIFEST).exists():
        return None
    c = ckpt.load_checkpoint(path)
    if c.manifest.get("student_architecture_hash") != ckpt.architecture_hash(student):
        raise CheckpointError(f"{path}: query vector was trained for a different student architecture")
    head = AttentionHead(c.manifest["dim"], c.manifest.get("num_classes"))
    head.load_state_dict(c.blobs["attention"])
    return head


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_pretrain(cfg, rd, args):
    splits = _splits(cfg)
    recipe = PretrainRecipe.from_config(cfg)
    bundle, report = pretrain_teachers(
        cfg.teacher_plan(), cfg["dataset.num_classes"], cfg.teacher_seeds, splits, recipe
    )
    for n, (teacher, seed, registry) in enumerate(zip(bundle.teachers, cfg.teacher_seeds, bundle.bn_registry)):
        manifest = _base_manifest(cfg, "teacher")
        manifest.update(
            {
                "index": n,
                "init_seed": seed,
                "test_acc": report.teacher_accs[n],
                "recipe": asdict(recipe),
                "value_hash": ckpt.state_hash(teacher),
                "bn_registry": [{"layer": name, "channels": bn.num_features} for name, bn in registry],
            }
        )
        ckpt.save_checkpoint(rd / "teachers" / f"teacher_{n}", {"model": teacher}, manifest)
    out = {
        "config_hash": cfg.hash,
        "seeds": report.seeds,
        "teacher_accs": report.teacher_accs,
        "teacher_ensemble_acc": report.teacher_ensemble_acc,
        "warnings": report.warnings,
        "histories": report.histories,
        "ingest": {
            "train_counts": splits.report.train_counts,
            "test_counts": splits.report.test_counts,
            "files_seen": splits.report.files_seen,
            "ingested": splits.report.ingested,
        },
    }
    ckpt.write_json(rd / "teachers" / "report.json", out)
    print(f"teachers: {['%.2f' % a for a in report.teacher_accs]}  ensemble: {report.teacher_ensemble_acc:.2f}")
    for w in report.warnings:
        print(f"warning: {w}")
    return {"report": rd / "teachers" / "report.json"}


def cmd_distill(cfg, rd, args):
    teachers = load_teachers(cfg, rd)
    student, generator = build_models(cfg)
    if cfg["student.feature_projection"] is False and student.feature_dim != teachers.feature_dim:
        raise SpecError(
            f"student feature dim {student.feature_dim} != teacher feature dim {teachers.feature_dim}; "
            "set student.feature_projection: true"
        )
    manifest = _base_manifest(cfg, "distill")
    d = Distiller(student, generator, teachers, cfg.loss_weights(), cfg.schedule(), seed=cfg["seed"], manifest=manifest)
    ddir = rd / "distill"
    metrics = ddir / "metrics.jsonl"
    if args.resume:
        d.resume(args.resume)
        if metrics.exists():
            kept = [ln for ln in metrics.read_text().splitlines() if ln and json.loads(ln)["iter"] < d.state.iteration]
            ckpt.atomic_write_text(metrics, "".join(ln + "\n" for ln in kept))
    elif metrics.exists():
        metrics.unlink()
    d.run(metrics_path=metrics, checkpoint_dir=ddir / "checkpoints")
    d.save(ddir / "final")
    records = [json.loads(ln) for ln in metrics.read_text().splitlines() if ln] if metrics.exists() else []
    plotting.plot_losses(records, ddir / "losses.png")
    print(f"distilled {d.state.epoch} epochs, {d.state.iteration} iterations -> {ddir / 'final'}")
    return {"final": ddir / "final", "metrics": metrics}


def cmd_attention(cfg, rd, args):
    frac = cfg["attention.subset_fraction"]
    if frac <= 0:
        raise SpecError(
            "attention.subset_fraction is 0: no real samples are available, so attention cannot be trained; "
            "use the data-free average aggregation reported by `mfskd eval`"
        )
    teachers = load_teachers(cfg, rd)
    student, generator = load_distilled(cfg, rd)
    splits = _splits(cfg)
    acfg = cfg.attention_config()
    idx = stratified_subset(splits.train_y, frac, acfg.seed)
    head = AttentionHead(student.feature_dim, cfg["dataset.num_classes"])
    head, history = train_attention(head, student, generator, teachers, splits.train_x[idx], splits.train_y[idx], acfg)
    manifest = _base_manifest(cfg, "attention")
    manifest.update(
        {
            "dim": head.dim,
            "num_classes": cfg["dataset.num_classes"],
            "student_architecture_hash": ckpt.architecture_hash(student),
            "subset_size": int(len(idx)),
            "subset_fraction": frac,
            "settings": asdict(acfg),
        }
    )
    ckpt.save_checkpoint(rd / "attention", {"attention": head}, manifest)
    ckpt.write_json(rd / "attention_history.json", history)
    print(f"attention query trained on {len(idx)} real samples -> {rd / 'attention'}")
    return {"attention": rd / "attention"}


def cmd_eval(cfg, rd, args):
    teachers = load_teachers(cfg, rd)
    student, _ = load_distilled(cfg, rd)
    head = load_attention(rd, student)
    splits = _splits(cfg)
    rep = evaluate(splits.test_x, splits.test_y, student=student, teachers=teachers, attention=head)
    out = {**rep.as_dict(), "config_hash": cfg.hash, "loss_conventions": LOSS_CONVENTIONS}
    ckpt.write_json(rd / "eval" / "report.json", out)
    plotting.plot_accuracies(out, rd / "eval" / "accuracy.png")
    line = f"headers {['%.2f' % a for a in rep.per_header_acc]}  ensemble {rep.ensemble_acc:.2f}"
    if rep.attention_acc is not None:
        line += f"  attention {rep.attention_acc:.2f}"
    print(line + f"  teacher ensemble {rep.teacher_ensemble_acc:.2f}")
    return {"report": rd / "eval" / "report.json"}


def cmd_export_samples(cfg, rd, args):
    _, generator = load_distilled(cfg, rd)
    seed = cfg["seed"] if args.seed is None else args.seed
    path = export_sample_grid(generator, args.rows, args.cols, seed, rd / "samples" / f"grid_seed{seed}.png")
    print(path)
    return {"grid": path}


def cost_table(cfg):
    size = cfg.input_shape
    c = cfg["dataset.num_classes"]
    entries = {
        "teacher": count_cost(cfg.teacher_plan(), size, c),
        "student_backbone": count_cost(cfg.student_spec().backbone, size, c),
        "student": count_cost(cfg.student_spec(), size),
        "generator": count_cost(cfg.generator_spec(), (cfg["generator.noise_dim"],)),
    }
    return entries


def cmd_count(cfg, rd, args):
    entries = cost_table(cfg)
    rows = ["model,params,flops,input_size"]
    for name, cost in entries.items():
        rows.append(f"{name},{cost.params},{cost.flops},{'x'.join(map(str, cost.input_size))}")
    ckpt.atomic_write_text(rd / "count" / "cost.csv", "\n".join(rows) + "\n")
    out = {name: cost.as_dict() for name, cost in entries.items()}
    out["student_flops_overhead"] = entries["student"].flops / entries["student_backbone"].flops - 1
    out["config_hash"] = cfg.hash
    ckpt.write_json(rd / "count" / "cost.json", out)
    for name, cost in entries.items():
        print(f"{name:18s} params {cost.params / 1e6:8.3f}M  flops {cost.flops / 1e9:8.4f}G")
    return {"cost": rd / "count" / "cost.json"}


def cmd_confusion(cfg, rd, args):
    teachers = load_teachers(cfg, rd)
    _, generator = load_distilled(cfg, rd)
    splits = _splits(cfg)
    teacher = teachers.teachers[args.teacher]
    c = cfg["dataset.num_classes"]
    real = confusion_matrix(teacher, splits.test_x, "ground_truth", splits.test_y, num_classes=c)
    g = torch.Generator().manual_seed(cfg["seed"] if args.seed is None else args.seed)
    n = args.num_samples or len(splits.test_x)
    generator.eval()
    with torch.no_grad():
        z = torch.randn(n, generator.noise_dim, generator=g)
        fake = torch.cat([generator(z[i : i + 256]) for i in range(0, n, 256)])
    gen = confusion_matrix(teacher, fake, "teacher_argmax", num_classes=c)
    cdir = rd / "confusion"
    confusion_to_csv(real, cdir / "real.csv")
    confusion_to_csv(gen, cdir / "generated.csv")
    plotting.plot_confusion_pair(real.row_normalized().matrix, gen.row_normalized().matrix, cdir / "confusion.png")
    summary = {
        "teacher": args.teacher,
        "real_off_diagonal": real.off_diagonal_fraction(),
        "generated_off_diagonal": gen.off_diagonal_fraction(),
        "generated_samples": n,
        "generated_label_counts": gen.counts.tolist(),
    }
    summary["ratio"] = summary["generated_off_diagonal"] / max(summary["real_off_diagonal"], 1e-12)
    ckpt.write_json(cdir / "summary.json", summary)
    print(
        f"off-diagonal mass: real {summary['real_off_diagonal']:.4f}  "
        f"generated {summary['generated_off_diagonal']:.4f}  ratio {summary['ratio']:.2f}"
    )
    return {"summary": cdir / "summary.json"}


def cmd_gradcam(cfg, rd, args):
    teachers = load_teachers(cfg, rd)
    student, _ = load_distilled(cfg, rd)
    splits = _splits(cfg)
    n = min(args.num_samples or 4, len(splits.test_x))
    images, maps, rows = [], [], []
    cols = [f"T{i + 1}" for i in range(len(teachers))] + [f"S{i + 1}" for i in range(len(student.headers))]
    for k in range(n):
        x, y = splits.test_x[k], int(splits.test_y[k])
        row = [gradcam_map(t, x, y, t.cam_layer).numpy() for t in teachers.teachers]
        for h in range(len(student.headers)):
            row.append(
                gradcam_map(student, x, y, student.cam_layer(h), select=lambda out, h=h: out.header_logits[h]).numpy()
            )
        maps.append(row)
        images.append(((x.permute(1, 2, 0).numpy() + 1) / 2).clip(0, 1).squeeze())
        rows.append(f"y={y}")
    gdir = rd / "gradcam"
    gdir.mkdir(parents=True, exist_ok=True)
    np.savez(gdir / "maps.npz", maps=np.array(maps), labels=splits.test_y[:n].numpy(), columns=np.array(cols))
    plotting.plot_gradcam(images, maps, rows, cols, gdir / "gradcam.png")
    print(gdir / "gradcam.png")
    return {"maps": gdir / "maps.npz"}


HANDLERS = {
    "pretrain": cmd_pretrain,
    "distill": cmd_distill,
    "attention": cmd_attention,
    "eval": cmd_eval,
    "export-samples": cmd_export_samples,
    "count": cmd_count,
    "confusion": cmd_confusion,
    "gradcam": cmd_gradcam,
}


def run(command: str, cfg: ExperimentConfig, args=None) -> dict:
    if command not in HANDLERS:
        raise SpecError(f"unknown command {command!r}; choose from {', '.join(COMMANDS)}")
    args = args or build_parser().parse_args([command, "--config", "-"])
    rd = run_dir(cfg, getattr(args, "out", None))
    _write_config(cfg, rd)
    return HANDLERS[command](cfg, rd, args)


def build_parser():
    p = argparse.ArgumentParser(prog="mfskd", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True)
        s.add_argument("--resume", default=None, help="checkpoint directory to resume from (distill)")
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--out", default=None, help="output root")
        if name == "export-samples":
            s.add_argument("--rows", type=int, default=8)
            s.add_argument("--cols", type=int, default=8)
        if name in ("confusion", "gradcam"):
            s.add_argument("--num-samples", type=int, default=None)
        if name == "confusion":
            s.add_argument("--teacher", type=int, default=0)
    m = sub.add_parser("make-dataset", help="write the synthetic 10-class shapes set")
    m.add_argument("root")
    m.add_argument("--per-class", type=int, default=500)
    m.add_argument("--size", type=int, default=32)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--format", choices=("png", "npz"), default="png")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "make-dataset":
            print(make_shapes_dataset(args.root, args.per_class, args.size, args.seed, args.format))
            return 0
        cfg = load_config(args.config)
        if args.seed is not None and args.command in ("pretrain", "distill", "attention"):
            cfg = ExperimentConfig({**cfg.tree, "seed": args.seed}, cfg.source)
        run(args.command, cfg, args)
    except (SpecError, PrerequisiteError, DatasetError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
