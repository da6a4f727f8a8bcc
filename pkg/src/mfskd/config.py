"""Experiment configuration: a YAML key-value tree validated against a fixed
schema, with defaults taken from the named dataset's profile."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any

import yaml

from .arch import BackbonePlan, GeneratorSpec, StudentSpec, backbone_plan
from .attention import AttentionConfig
from .distill import DistillSchedule
from .exceptions import SpecError
from .losses import LossWeights

REQUIRED = ("dataset.name", "dataset.root")

# path -> type tag; every accepted key appears here
SCHEMA = {
    "seed": "int",
    "output_dir": "str",
    "dataset.name": "str",
    "dataset.root": "str",
    "dataset.input_size": "int",
    "dataset.channels": "int",
    "dataset.num_classes": "int",
    "dataset.split_seed": "int",
    "dataset.train_fraction": "float",
    "teachers.arch": "str",
    "teachers.block_counts": "list[int]?",
    "teachers.widths": "list[int]?",
    "teachers.count": "int",
    "teachers.seeds": "list[int]?",
    "teachers.pretrain.epochs": "int",
    "teachers.pretrain.batch_size": "int",
    "teachers.pretrain.lr": "float",
    "teachers.pretrain.momentum": "float",
    "teachers.pretrain.weight_decay": "float",
    "teachers.pretrain.milestones": "list[int]",
    "teachers.pretrain.lr_decay": "float",
    "teachers.pretrain.crop_padding": "int",
    "teachers.pretrain.flip": "bool",
    "teachers.pretrain.accuracy_floor": "float",
    "student.arch": "str",
    "student.block_counts": "list[int]?",
    "student.widths": "list[int]?",
    "student.layout": "str",
    "student.feature_projection": "bool",
    "generator.noise_dim": "int",
    "generator.upsampling_mode": "str",
    "generator.output_block": "str",
    "generator.base_width": "int",
    "loss.alpha": "float",
    "loss.beta": "float",
    "loss.gamma": "float",
    "loss.lam": "float",
    "loss.kd_temperature": "float",
    "schedule.epochs": "int",
    "schedule.iters_per_epoch": "int",
    "schedule.student_steps": "int",
    "schedule.batch_size": "int",
    "schedule.lr_student": "float",
    "schedule.lr_generator": "float",
    "schedule.lr_milestones": "list[int]",
    "schedule.lr_decay": "float",
    "schedule.momentum": "float",
    "schedule.weight_decay": "float",
    "schedule.generator_weight_decay": "float",
    "attention.subset_fraction": "float",
    "attention.lr": "float",
    "attention.weight_decay": "float",
    "attention.epochs": "int",
    "attention.batch_size": "int",
    "attention.val_fraction": "float",
    "attention.seed": "int",
}

BASE = {
    "seed": 0,
    "output_dir": "runs",
    "dataset": {"channels": 3, "split_seed": 0, "train_fraction": 0.8},
    "teachers": {
        "arch": "resnet34",
        "block_counts": None,
        "widths": None,
        "count": 3,
        "seeds": None,
        "pretrain": {
            "epochs": 200,
            "batch_size": 128,
            "lr": 0.1,
            "momentum": 0.9,
            "weight_decay": 5e-4,
            "milestones": [100, 150],
            "lr_decay": 0.1,
            "crop_padding": 4,
            "flip": True,
            "accuracy_floor": 0.0,
        },
    },
    "student": {"arch": "resnet18", "block_counts": None, "widths": None, "layout": "aligned", "feature_projection": False},
    "generator": {"noise_dim": 256, "upsampling_mode": "nearest_x2", "output_block": "tanh_then_bn", "base_width": 64},
    "loss": {"alpha": 5.0, "beta": 0.2, "gamma": 0.1, "lam": 0.0, "kd_temperature": 1.0},
    "schedule": {
        "epochs": 300,
        "iters_per_epoch": 50,
        "student_steps": 5,
        "batch_size": 256,
        "lr_student": 0.1,
        "lr_generator": 1e-3,
        "lr_milestones": [100, 200],
        "lr_decay": 0.1,
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "generator_weight_decay": 0.0,
    },
    "attention": {
        "subset_fraction": 0.1,
        "lr": 0.01,
        "weight_decay": 1e-4,
        "epochs": 30,
        "batch_size": 128,
        "val_fraction": 0.2,
        "seed": 0,
    },
}

PROFILES = {
    "cifar100": {
        "dataset": {"input_size": 32, "num_classes": 100},
    },
    "caltech101": {
        "dataset": {"input_size": 128, "num_classes": 101},
        "generator": {"upsampling_mode": "transposed_conv_k4", "output_block": "tanh_only"},
        "schedule": {"batch_size": 64},
    },
    "mini-imagenet": {
        "dataset": {"input_size": 224, "num_classes": 100},
        "generator": {"upsampling_mode": "transposed_conv_k4", "output_block": "tanh_then_bn"},
        "loss": {"alpha": 1.0, "beta": 0.05},
        "schedule": {"epochs": 100, "iters_per_epoch": 750, "batch_size": 64, "lr_milestones": [30, 60, 90]},
    },
    # not a paper setting: small synthetic 10-class set for CPU-scale runs
    "desk": {
        "dataset": {"input_size": 32, "num_classes": 10},
        "teachers": {
            "arch": "custom",
            "block_counts": [1, 1, 1],
            "widths": [8, 16, 32],
            "pretrain": {"epochs": 8, "batch_size": 64, "lr": 0.05, "milestones": [6], "accuracy_floor": 50.0},
        },
        "student": {"arch": "custom", "block_counts": [1, 1, 1], "widths": [8, 16, 32]},
        "generator": {"noise_dim": 64, "base_width": 16},
        "schedule": {
            "epochs": 40,
            "iters_per_epoch": 20,
            "student_steps": 5,
            "batch_size": 64,
            "lr_student": 0.02,
            "lr_milestones": [30],
        },
        "attention": {"epochs": 10, "batch_size": 64},
    },
}


def _deep_update(base, over):
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = copy.deepcopy(v)
    return base


def _flatten(tree, prefix=""):
    out = {}
    for k, v in tree.items():
        path = f"{prefix}{k}"
        if isinstance(v, dict) and not any(s == path for s in SCHEMA):
            out.update(_flatten(v, path + "."))
        else:
            out[path] = v
    return out


def _check_type(path, value, tag):
    optional = tag.endswith("?")
    tag = tag.rstrip("?")
    if value is None:
        if optional:
            return value
        raise SpecError(f"{path}: expected {tag}, got null")
    if tag == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise SpecError(f"{path}: expected int, got {type(value).__name__}")
    elif tag == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SpecError(f"{path}: expected number, got {type(value).__name__}")
        value = float(value)
    elif tag == "str":
        if not isinstance(value, str):
            raise SpecError(f"{path}: expected string, got {type(value).__name__}")
    elif tag == "bool":
        if not isinstance(value, bool):
            raise SpecError(f"{path}: expected bool, got {type(value).__name__}")
    elif tag.startswith("list["):
        inner = tag[5:-1]
        if not isinstance(value, list):
            raise SpecError(f"{path}: expected list of {inner}, got {type(value).__name__}")
        value = [_check_type(f"{path}[{i}]", v, inner) for i, v in enumerate(value)]
    return value


def _unflatten(flat):
    tree: dict = {}
    for path, v in flat.items():
        node = tree
        *parents, leaf = path.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = v
    return tree


class ExperimentConfig:
    """Resolved configuration. ``tree`` is the full nested dict."""

    def __init__(self, tree: dict, source=None):
        self.tree = tree
        self.source = source
        self._validate()

    # -- derived objects -------------------------------------------------
    def __getitem__(self, path: str) -> Any:
        node = self.tree
        for p in path.split("."):
            node = node[p]
        return node

    @property
    def hash(self) -> str:
        tree = {k: v for k, v in self.tree.items() if k != "output_dir"}
        return hashlib.sha256(json.dumps(tree, sort_keys=True).encode()).hexdigest()

    @property
    def input_shape(self) -> tuple:
        s = self["dataset.input_size"]
        return (self["dataset.channels"], s, s)

    @property
    def teacher_seeds(self) -> list:
        seeds = self["teachers.seeds"]
        return list(seeds) if seeds is not None else list(range(self["teachers.count"]))

    def _plan(self, section) -> BackbonePlan:
        over = {"in_channels": self["dataset.channels"]}
        if self[f"{section}.block_counts"] is not None:
            over["block_counts"] = tuple(self[f"{section}.block_counts"])
        if self[f"{section}.widths"] is not None:
            over["widths"] = tuple(self[f"{section}.widths"])
        return backbone_plan(self[f"{section}.arch"], self["dataset.input_size"], **over)

    def teacher_plan(self) -> BackbonePlan:
        return self._plan("teachers")

    def student_spec(self) -> StudentSpec:
        plan = self._plan("student")
        proj = None
        if self["student.feature_projection"]:
            proj = self.teacher_plan().feature_dim
        return StudentSpec(
            backbone=plan,
            num_headers=self["teachers.count"],
            num_classes=self["dataset.num_classes"],
            layout=self["student.layout"],
            feature_projection=proj,
        )

    def generator_spec(self) -> GeneratorSpec:
        s = self["dataset.input_size"]
        return GeneratorSpec(
            noise_dim=self["generator.noise_dim"],
            output_height=s,
            output_width=s,
            output_channels=self["dataset.channels"],
            upsampling_mode=self["generator.upsampling_mode"],
            output_block=self["generator.output_block"],
            base_width=self["generator.base_width"],
        )

    def loss_weights(self) -> LossWeights:
        t = self.tree["loss"]
        return LossWeights(alpha=t["alpha"], beta=t["beta"], gamma=t["gamma"], lam=t["lam"])

    def schedule(self) -> DistillSchedule:
        t = dict(self.tree["schedule"])
        t["lr_milestones"] = tuple(t["lr_milestones"])
        return DistillSchedule(**t)

    def attention_config(self) -> AttentionConfig:
        t = {k: v for k, v in self.tree["attention"].items() if k != "subset_fraction"}
        return AttentionConfig(**t)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.tree, sort_keys=True)

    def _validate(self):
        count = self["teachers.count"]
        if count < 1:
            raise SpecError(f"teachers.count: need at least one teacher, got {count}")
        seeds = self["teachers.seeds"]
        if seeds is not None and len(seeds) != count:
            raise SpecError(f"teachers.seeds: {len(seeds)} seeds for {count} teachers")
        if self["dataset.num_classes"] < 2:
            raise SpecError("dataset.num_classes: need at least two classes")
        if self["dataset.input_size"] < 1:
            raise SpecError("dataset.input_size: must be positive")
        if not 0 < self["dataset.train_fraction"] < 1:
            raise SpecError("dataset.train_fraction: must lie in (0, 1)")
        if not 0 <= self["attention.subset_fraction"] <= 1:
            raise SpecError("attention.subset_fraction: must lie in [0, 1]")
        # build once so plan errors surface at load time
        self.teacher_plan()
        self.student_spec()
        self.generator_spec()
        self.loss_weights()
        self.schedule()


def config_from_tree(user: dict, source=None) -> ExperimentConfig:
    if user is None:
        user = {}
    if not isinstance(user, dict):
        raise SpecError("config root must be a mapping")
    flat = _flatten(user)
    unknown = sorted(p for p in flat if p not in SCHEMA)
    if unknown:
        raise SpecError("unknown config keys: " + ", ".join(unknown))
    missing = [p for p in REQUIRED if flat.get(p) is None]
    if missing:
        raise SpecError("missing required config keys: " + ", ".join(missing))
    for p, v in flat.items():
        flat[p] = _check_type(p, v, SCHEMA[p])
    name = flat["dataset.name"]
    tree = copy.deepcopy(BASE)
    if name in PROFILES:
        _deep_update(tree, PROFILES[name])
    _deep_update(tree, _unflatten(flat))
    resolved = _flatten(tree)
    absent = sorted(p for p in SCHEMA if p not in resolved)
    if absent:
        raise SpecError(f"dataset {name!r} has no profile; set explicitly: " + ", ".join(absent))
    return ExperimentConfig(tree, source)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        user = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise SpecError(f"{path}: not a valid YAML key-value tree: {e}") from e
    return config_from_tree(user, source=path)
