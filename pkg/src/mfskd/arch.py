"""Model families: DCGAN-style generator, multi-header student with
multi-level feature sharing, and frozen teacher wrappers that can report
batch-norm statistics of whatever passes through them."""

from __future__ import annotations

import re
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import SpecError, StructuralError

UPSAMPLING_MODES = ("nearest_x2", "transposed_conv_k4")
OUTPUT_BLOCKS = ("tanh_then_bn", "tanh_only")
LAYOUTS = ("preceding", "aligned")


# ---------------------------------------------------------------------------
# Plans
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BackbonePlan:
    """A residual backbone split into groups; each group output is a tap.

    ``kind="resnet"`` uses post-activation basic blocks, ``kind="wrn"`` the
    pre-activation wide blocks (with a final BN-ReLU before pooling).
    """

    kind: str = "resnet"
    block_counts: tuple = (2, 2, 2, 2)
    widths: tuple = (64, 128, 256, 512)
    stem: str = "cifar"
    in_channels: int = 3
    stem_width: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "block_counts", tuple(int(b) for b in self.block_counts))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.kind not in ("resnet", "wrn"):
            raise SpecError(f"unknown backbone kind {self.kind!r}")
        if self.stem not in ("cifar", "imagenet"):
            raise SpecError(f"unknown stem {self.stem!r}")
        if not self.widths or len(self.widths) != len(self.block_counts):
            raise SpecError("backbone needs one width per block group")
        if min(self.widths) <= 0 or min(self.block_counts) <= 0 or self.in_channels <= 0:
            raise SpecError("backbone widths, block counts and input channels must be positive")

    @property
    def strides(self) -> tuple:
        return (1,) + (2,) * (len(self.widths) - 1)

    @property
    def first_width(self) -> int:
        if self.stem_width is not None:
            return self.stem_width
        return 16 if self.kind == "wrn" else self.widths[0]

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]


_NAMED_RESNETS = {
    "resnet10": (1, 1, 1, 1),
    "resnet18": (2, 2, 2, 2),
    "resnet34": (3, 4, 6, 3),
}


def backbone_plan(name: str, input_size: int = 32, **overrides) -> BackbonePlan:
    """Resolve a named plan (``resnet18``, ``resnet34``, ``wrn-40-2``, ...).

    The stem follows the input size: a 3x3 stride-1 stem for small inputs,
    the 7x7 stride-2 + max-pool stem above 64 pixels.
    """
    stem = "cifar" if input_size <= 64 else "imagenet"
    if name in _NAMED_RESNETS:
        kwargs = dict(kind="resnet", block_counts=_NAMED_RESNETS[name], widths=(64, 128, 256, 512), stem=stem)
    elif m := re.fullmatch(r"wrn-(\d+)-(\d+)", name):
        depth, k = int(m.group(1)), int(m.group(2))
        if (depth - 4) % 6:
            raise SpecError(f"WRN depth must be 6n+4, got {depth}")
        n = (depth - 4) // 6
        kwargs = dict(kind="wrn", block_counts=(n, n, n), widths=(16 * k, 32 * k, 64 * k), stem="cifar")
    elif name == "custom":
        kwargs = dict(stem=stem)
    else:
        raise SpecError(f"unknown backbone plan {name!r}")
    kwargs.update(overrides)
    return BackbonePlan(**kwargs)


@dataclass(frozen=True)
class HeaderBlockSpec:
    in_channels: int
    out_channels: int
    stride: int = 1


@dataclass(frozen=True)
class StudentSpec:
    """Multi-header student plan.

    ``layout`` picks which backbone tap header block j (j > 1) is concatenated
    with: ``"preceding"`` reads tap j-1 and keeps the resolution/width of
    group j; ``"aligned"`` reads tap j, downsamples by 2 and emits the width
    of group j+1 (the last block emits the final width).
    """

    backbone: BackbonePlan = field(default_factory=BackbonePlan)
    num_headers: int = 3
    num_classes: int = 100
    layout: str = "preceding"
    num_share_points: Optional[int] = None
    backbone_block_channels: Optional[tuple] = None
    feature_projection: Optional[int] = None

    def __post_init__(self):
        if self.num_headers < 1:
            raise SpecError(f"num_headers must be >= 1, got {self.num_headers}")
        if self.num_classes < 1:
            raise SpecError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.layout not in LAYOUTS:
            raise SpecError(f"layout must be one of {LAYOUTS}, got {self.layout!r}")
        m = len(self.backbone.widths)
        if self.num_share_points is not None and self.num_share_points != m:
            raise SpecError(f"num_share_points={self.num_share_points} but the backbone exposes {m} taps")
        if self.backbone_block_channels is not None:
            given = tuple(int(c) for c in self.backbone_block_channels)
            if len(given) != m:
                raise SpecError(f"backbone_block_channels has {len(given)} entries, backbone has {m} blocks")
            for j, (a, b) in enumerate(zip(given, self.backbone.widths), start=1):
                if a != b:
                    raise SpecError(f"backbone block {j}: declared {a} channels, plan produces {b}")

    @property
    def M(self) -> int:
        return len(self.backbone.widths)

    @property
    def feature_dim(self) -> int:
        return self.backbone.widths[-1]


def header_block_specs(spec: StudentSpec) -> list:
    c = spec.backbone.widths
    s = spec.backbone.strides
    m = len(c)
    blocks = []
    for j in range(m):
        if spec.layout == "preceding":
            cin = c[0] if j == 0 else 2 * c[j - 1]
            blocks.append(HeaderBlockSpec(cin, c[j], s[j]))
        else:
            cin = c[0] if j == 0 else 2 * c[j]
            cout = c[j + 1] if j + 1 < m else c[-1]
            blocks.append(HeaderBlockSpec(cin, cout, 2))
    return blocks


def validate_header_blocks(spec: StudentSpec, blocks: Sequence[HeaderBlockSpec]) -> None:
    expected = header_block_specs(spec)
    if len(blocks) != len(expected):
        raise SpecError(f"expected {len(expected)} header blocks, got {len(blocks)}")
    for j, (got, want) in enumerate(zip(blocks, expected), start=1):
        if got.in_channels != want.in_channels:
            raise SpecError(f"header block {j}: in_channels {got.in_channels} != {want.in_channels}")
        if got.out_channels != want.out_channels:
            raise SpecError(f"header block {j}: out_channels {got.out_channels} != {want.out_channels}")
        if got.stride not in (1, 2):
            raise SpecError(f"header block {j}: stride must be 1 or 2, got {got.stride}")


@dataclass(frozen=True)
class GeneratorSpec:
    noise_dim: int = 256
    output_height: int = 32
    output_width: int = 32
    output_channels: int = 3
    upsampling_mode: str = "nearest_x2"
    output_block: str = "tanh_then_bn"
    base_width: int = 64

    def __post_init__(self):
        for name in ("noise_dim", "output_height", "output_width", "output_channels", "base_width"):
            if getattr(self, name) <= 0:
                raise SpecError(f"generator {name} must be positive, got {getattr(self, name)}")
        if self.upsampling_mode not in UPSAMPLING_MODES:
            raise SpecError(f"upsampling_mode must be one of {UPSAMPLING_MODES}")
        if self.output_block not in OUTPUT_BLOCKS:
            raise SpecError(f"output_block must be one of {OUTPUT_BLOCKS}")


def upsampling_chain(height: int, width: int, mode: str, min_seed: int = 4) -> tuple:
    """Return ``(seed_h, seed_w, n_doublings)`` for the generator trunk.

    Nearest-neighbour generators always upsample twice from a quarter-size
    seed. Transposed-conv generators double as many times as the size allows
    while the seed stays at least ``min_seed`` pixels.
    """
    if mode == "nearest_x2":
        if height % 4 or width % 4:
            raise SpecError(f"nearest_x2 generator needs sizes divisible by 4, got {height}x{width}")
        return height // 4, width // 4, 2

    def doublings(n):
        k = 0
        while n % 2 == 0 and n // 2 >= min_seed:
            n //= 2
            k += 1
        return k

    k = min(doublings(height), doublings(width))
    if k == 0:
        raise SpecError(f"{height}x{width} is not reachable by doubling a seed of >= {min_seed} pixels")
    return height >> k, width >> k, k


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------


class Generator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        self.noise_dim = spec.noise_dim
        sh, sw, k = upsampling_chain(spec.output_height, spec.output_width, spec.upsampling_mode)
        self.seed_shape = (sh, sw)
        self.num_upsamplings = k
        ngf, nc = spec.base_width, spec.output_channels

        if spec.upsampling_mode == "nearest_x2":
            self.project = nn.Linear(spec.noise_dim, 2 * ngf * sh * sw)
            self.seed_channels = 2 * ngf
            self.trunk = nn.Sequential(
                nn.BatchNorm2d(2 * ngf),
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(2 * ngf, 2 * ngf, 3, 1, 1, bias=False),
                nn.BatchNorm2d(2 * ngf),
                nn.LeakyReLU(0.2, inplace=True),
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(2 * ngf, ngf, 3, 1, 1, bias=False),
                nn.BatchNorm2d(ngf),
                nn.LeakyReLU(0.2, inplace=True),
                nn.Conv2d(ngf, nc, 3, 1, 1),
            )
        else:
            width = ngf * 2 ** (k - 1)
            self.project = None
            self.seed_channels = spec.noise_dim
            layers = [
                nn.ConvTranspose2d(spec.noise_dim, width, (sh, sw), 1, 0, bias=False),
                nn.BatchNorm2d(width),
                nn.ReLU(inplace=True),
            ]
            for _ in range(k - 1):
                layers += [
                    nn.ConvTranspose2d(width, width // 2, 4, 2, 1, bias=False),
                    nn.BatchNorm2d(width // 2),
                    nn.ReLU(inplace=True),
                ]
                width //= 2
            layers.append(nn.ConvTranspose2d(width, nc, 4, 2, 1, bias=False))
            self.trunk = nn.Sequential(*layers)

        self.tanh = nn.Tanh()
        self.out_bn = nn.BatchNorm2d(nc, affine=False) if spec.output_block == "tanh_then_bn" else None

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if self.project is not None:
            x = self.project(z.flatten(1)).view(z.shape[0], self.seed_channels, *self.seed_shape)
        else:
            x = z.view(z.shape[0], self.seed_channels, 1, 1)
        x = self.tanh(self.trunk(x))
        if self.out_bn is not None:
            x = self.out_bn(x)
        return x


def build_generator(spec: GeneratorSpec) -> Generator:
    return Generator(spec)


# ---------------------------------------------------------------------------
# Backbones and classifiers
# ---------------------------------------------------------------------------


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class WideBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Conv2d(cin, cout, 1, stride, bias=False)

    def forward(self, x):
        o = F.relu(self.bn1(x))
        y = self.conv1(o)
        y = self.conv2(F.relu(self.bn2(y)))
        return y + (x if self.shortcut is None else self.shortcut(o))


class Backbone(nn.Module):
    """Stem plus block groups; ``forward`` returns every group output."""

    def __init__(self, plan: BackbonePlan):
        super().__init__()
        self.plan = plan
        w0 = plan.first_width
        if plan.kind == "wrn":
            self.stem = nn.Conv2d(plan.in_channels, w0, 3, 1, 1, bias=False)
        elif plan.stem == "cifar":
            self.stem = nn.Sequential(
                nn.Conv2d(plan.in_channels, w0, 3, 1, 1, bias=False), nn.BatchNorm2d(w0), nn.ReLU(inplace=True)
            )
        else:
            self.stem = nn.Sequential(
                nn.Conv2d(plan.in_channels, w0, 7, 2, 3, bias=False),
                nn.BatchNorm2d(w0),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(3, 2, 1),
            )
        block = WideBlock if plan.kind == "wrn" else BasicBlock
        groups = []
        cin = w0
        for count, width, stride in zip(plan.block_counts, plan.widths, plan.strides):
            blocks = []
            for b in range(count):
                blocks.append(block(cin, width, stride if b == 0 else 1))
                cin = width
            groups.append(nn.Sequential(*blocks))
        self.groups = nn.ModuleList(groups)
        # pre-activation nets normalise the last tap before pooling
        self.final = nn.Sequential(nn.BatchNorm2d(cin), nn.ReLU(inplace=True)) if plan.kind == "wrn" else None

    @property
    def out_channels(self) -> tuple:
        return self.plan.widths

    def forward(self, x):
        x = self.stem(x)
        taps = []
        for g in self.groups:
            x = g(x)
            taps.append(x)
        return taps

    def finish(self, last_tap):
        return last_tap if self.final is None else self.final(last_tap)


class Classifier(nn.Module):
    """Backbone + global average pooling + linear head (teacher models)."""

    def __init__(self, plan: BackbonePlan, num_classes: int):
        super().__init__()
        self.plan = plan
        self.num_classes = num_classes
        self.backbone = Backbone(plan)
        self.fc = nn.Linear(plan.feature_dim, num_classes)

    @property
    def feature_dim(self) -> int:
        return self.plan.feature_dim

    @property
    def cam_layer(self) -> nn.Module:
        return self.backbone.groups[-1]

    def extract(self, x):
        feat = self.backbone.finish(self.backbone(x)[-1])
        feat = F.adaptive_avg_pool2d(feat, 1).flatten(1)
        return self.fc(feat), feat

    def forward(self, x):
        return self.extract(x)[0]


def build_classifier(plan: BackbonePlan, num_classes: int) -> Classifier:
    return Classifier(plan, num_classes)


# ---------------------------------------------------------------------------
# Multi-header student
# ---------------------------------------------------------------------------


class HeaderBlock(nn.Sequential):
    """Two depthwise-separable units; the first carries the stride."""

    def __init__(self, spec: HeaderBlockSpec):
        cin, cout = spec.in_channels, spec.out_channels
        super().__init__(
            nn.Conv2d(cin, cin, 3, spec.stride, 1, groups=cin, bias=False),
            nn.Conv2d(cin, cin, 1, bias=False),
            nn.BatchNorm2d(cin),
            nn.ReLU(inplace=True),
            nn.Conv2d(cin, cin, 3, 1, 1, groups=cin, bias=False),
            nn.Conv2d(cin, cout, 1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )
        self.spec = spec


class Header(nn.Module):
    def __init__(self, blocks: Sequence[HeaderBlockSpec], num_classes: int, projection: Optional[int] = None):
        super().__init__()
        self.blocks = nn.ModuleList(HeaderBlock(b) for b in blocks)
        dim = blocks[-1].out_channels
        self.fc = nn.Linear(dim, num_classes)
        self.proj = nn.Linear(dim, projection) if projection else None


@dataclass
class ForwardResult:
    header_logits: torch.Tensor  # (N, B, C)
    header_features: torch.Tensor  # (N, B, D)
    ensemble_logits: torch.Tensor  # (B, C)
    projected_features: Optional[torch.Tensor] = None  # (N, B, D_teacher)

    @property
    def num_headers(self) -> int:
        return self.header_logits.shape[0]

    @property
    def feature_targets(self) -> torch.Tensor:
        """Features that are compared against the teachers'."""
        return self.header_features if self.projected_features is None else self.projected_features


class MFSStudent(nn.Module):
    def __init__(self, spec: StudentSpec, header_blocks: Optional[Sequence[HeaderBlockSpec]] = None):
        super().__init__()
        self.spec = spec
        blocks = list(header_blocks) if header_blocks is not None else header_block_specs(spec)
        validate_header_blocks(spec, blocks)
        self.block_specs = blocks
        self.backbone = Backbone(spec.backbone)
        self.headers = nn.ModuleList(
            Header(blocks, spec.num_classes, spec.feature_projection) for _ in range(spec.num_headers)
        )

    @property
    def feature_dim(self) -> int:
        return self.block_specs[-1].out_channels

    def cam_layer(self, n: int) -> nn.Module:
        return self.headers[n].blocks[-1]

    def _header_input(self, j, taps, prev):
        if j == 0:
            return taps[0]
        shared = taps[j - 1] if self.spec.layout == "preceding" else taps[j]
        if shared.shape[-2:] != prev.shape[-2:]:
            raise StructuralError(
                f"header block {j + 1}: shared feature {tuple(shared.shape[-2:])} "
                f"vs header feature {tuple(prev.shape[-2:])}"
            )
        return torch.cat([shared, prev], dim=1)

    def forward(self, x) -> ForwardResult:
        taps = self.backbone(x)
        logits, feats, projected = [], [], []
        for header in self.headers:
            h = None
            for j, block in enumerate(header.blocks):
                h = block(self._header_input(j, taps, h))
            f = F.adaptive_avg_pool2d(h, 1).flatten(1)
            feats.append(f)
            logits.append(header.fc(f))
            if header.proj is not None:
                projected.append(header.proj(f))
        header_logits = torch.stack(logits)
        return ForwardResult(
            header_logits=header_logits,
            header_features=torch.stack(feats),
            ensemble_logits=header_logits.mean(0),
            projected_features=torch.stack(projected) if projected else None,
        )


def build_student(spec: StudentSpec, header_blocks=None) -> MFSStudent:
    return MFSStudent(spec, header_blocks)


def student_forward(student: MFSStudent, batch: torch.Tensor) -> ForwardResult:
    return student(batch)


# ---------------------------------------------------------------------------
# Teachers and BN statistics
# ---------------------------------------------------------------------------


def _safe_std(var):
    # exact zero for constant inputs, finite gradient everywhere
    pos = var > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, var, torch.ones_like(var))), torch.zeros_like(var))


@dataclass
class BNStatRecord:
    """Stored statistics of one BN layer next to those of the current batch.

    ``running_std`` is the square root of the stored running variance;
    ``batch_std`` the square root of the biased batch variance.
    """

    layer: str
    running_mean: torch.Tensor
    running_std: torch.Tensor
    batch_mean: torch.Tensor
    batch_std: torch.Tensor


def batch_stats(x: torch.Tensor):
    dims = [0] + list(range(2, x.dim()))
    mean = x.mean(dim=dims)
    var = x.var(dim=dims, unbiased=False)
    return mean, _safe_std(var)


def bn_layers(model: nn.Module) -> list:
    return [(name, m) for name, m in model.named_modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]


@contextmanager
def capture_bn_stats(model: nn.Module, layers=None):
    """Record per-layer batch statistics of the activations entering each BN
    layer while the block is active. Yields the (growing) record list."""
    layers = bn_layers(model) if layers is None else layers
    if not layers:
        raise SpecError(f"{type(model).__name__} has no batch-norm layers to capture")
    records: list = []

    def hook_for(name, bn):
        def hook(module, inputs, output):
            mean, std = batch_stats(inputs[0])
            records.append(
                BNStatRecord(
                    layer=name,
                    running_mean=bn.running_mean.detach(),
                    running_std=bn.running_var.detach().clamp_min(0).sqrt(),
                    batch_mean=mean,
                    batch_std=std,
                )
            )

        return hook

    handles = [bn.register_forward_hook(hook_for(name, bn)) for name, bn in layers]
    try:
        yield records
    finally:
        for h in handles:
            h.remove()


@dataclass
class TeacherOutput:
    logits: torch.Tensor
    feature: torch.Tensor
    bn: Optional[list] = None


class TeacherBundle:
    """Frozen teachers. Parameters never receive gradients; BN layers use
    their stored statistics."""

    def __init__(self, teachers: Sequence[Classifier]):
        if not teachers:
            raise SpecError("a teacher bundle needs at least one teacher")
        self.teachers = list(teachers)
        shapes = {(t.plan.in_channels, t.num_classes) for t in self.teachers}
        if len(shapes) != 1:
            raise SpecError(f"teachers disagree on input channels / class count: {sorted(shapes)}")
        dims = {t.feature_dim for t in self.teachers}
        if len(dims) != 1:
            raise SpecError(f"teachers disagree on feature dim: {sorted(dims)}")
        self.feature_dim = dims.pop()
        self.num_classes = self.teachers[0].num_classes
        for t in self.teachers:
            t.eval()
            t.requires_grad_(False)
        self.bn_registry = [bn_layers(t) for t in self.teachers]

    def __len__(self):
        return len(self.teachers)

    def eval(self):
        for t in self.teachers:
            t.eval()
        return self

    def to(self, device):
        for t in self.teachers:
            t.to(device)
        return self


def teacher_forward(bundle: TeacherBundle, batch: torch.Tensor, capture_bn: bool = False) -> list:
    outs = []
    for teacher, registry in zip(bundle.teachers, bundle.bn_registry):
        if capture_bn:
            with capture_bn_stats(teacher, registry) as records:
                logits, feat = teacher.extract(batch)
            outs.append(TeacherOutput(logits, feat, list(records)))
        else:
            logits, feat = teacher.extract(batch)
            outs.append(TeacherOutput(logits, feat))
    return outs
