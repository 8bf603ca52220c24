"""1-D backbones (ResNet34, MobileNetV1, ShuffleNetV1) for single-channel windows.

Every model is a :class:`BackboneModel`: a feature extractor producing a
fixed-size embedding by global average pooling over time, followed by one
linear classifier. The two halves are separately callable so that features
of one model can be fed to the classifier of another model of the same
architecture.
"""

from __future__ import annotations

import contextlib
import hashlib
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import torch
import torch.nn as nn

from .checkpoint import load_sections, save_sections
from .errors import LoadError, NumericalError, ShapeError
from .signals import WINDOW_LEN


class Arch(str, Enum):
    RESNET34 = "ResNet34_1D"
    MOBILENET_V1 = "MobileNetV1_1D"
    SHUFFLENET_V1 = "ShuffleNetV1_1D"


# ---------------------------------------------------------------------------
# ResNet


class BasicBlock1D(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv1d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm1d(out_ch)
        self.conv2 = nn.Conv1d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm1d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv1d(in_ch, out_ch, 1, stride, bias=False), nn.BatchNorm1d(out_ch)
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class ResNet1DFeatures(nn.Module):
    def __init__(self, layers=(3, 4, 6, 3), widths=(64, 128, 256, 512)):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv1d(1, widths[0], 7, 2, 3, bias=False),
            nn.BatchNorm1d(widths[0]),
            nn.ReLU(inplace=True),
            nn.MaxPool1d(3, 2, 1),
        )
        blocks = []
        in_ch = widths[0]
        for i, (n, w) in enumerate(zip(layers, widths)):
            for j in range(n):
                stride = 2 if (i > 0 and j == 0) else 1
                blocks.append(BasicBlock1D(in_ch, w, stride))
                in_ch = w
        self.blocks = nn.Sequential(*blocks)
        self.pool = nn.AdaptiveAvgPool1d(1)
        self.out_dim = in_ch

    def forward(self, x):
        return self.pool(self.blocks(self.stem(x))).flatten(1)


# ---------------------------------------------------------------------------
# MobileNetV1

_MOBILENET_CFG = [(64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2)] + [(512, 1)] * 5 + [
    (1024, 2),
    (1024, 1),
]


def _conv_bn_relu(in_ch, out_ch, k, stride, groups=1):
    return [
        nn.Conv1d(in_ch, out_ch, k, stride, k // 2, groups=groups, bias=False),
        nn.BatchNorm1d(out_ch),
        nn.ReLU(inplace=True),
    ]


class MobileNetV1Features(nn.Module):
    def __init__(self, stem=32, cfg=tuple(_MOBILENET_CFG)):
        super().__init__()
        layers = _conv_bn_relu(1, stem, 3, 2)
        in_ch = stem
        for out_ch, stride in cfg:
            layers += _conv_bn_relu(in_ch, in_ch, 3, stride, groups=in_ch)
            layers += _conv_bn_relu(in_ch, out_ch, 1, 1)
            in_ch = out_ch
        self.body = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool1d(1)
        self.out_dim = in_ch

    def forward(self, x):
        return self.pool(self.body(x)).flatten(1)


# ---------------------------------------------------------------------------
# ShuffleNetV1


def channel_shuffle(x, groups):
    b, c, n = x.shape
    return x.view(b, groups, c // groups, n).transpose(1, 2).reshape(b, c, n)


class ShuffleUnit1D(nn.Module):
    def __init__(self, in_ch, out_ch, stride, groups, first_group_conv=True):
        super().__init__()
        self.stride = stride
        self.groups = groups
        mid = out_ch // 4
        branch_out = out_ch - in_ch if stride == 2 else out_ch
        g1 = groups if first_group_conv else 1
        self.gconv1 = nn.Conv1d(in_ch, mid, 1, groups=g1, bias=False)
        self.bn1 = nn.BatchNorm1d(mid)
        self.dwconv = nn.Conv1d(mid, mid, 3, stride, 1, groups=mid, bias=False)
        self.bn2 = nn.BatchNorm1d(mid)
        self.gconv2 = nn.Conv1d(mid, branch_out, 1, groups=groups, bias=False)
        self.bn3 = nn.BatchNorm1d(branch_out)
        self.relu = nn.ReLU(inplace=True)
        self.shortcut = nn.AvgPool1d(3, 2, 1) if stride == 2 else None

    def forward(self, x):
        out = self.relu(self.bn1(self.gconv1(x)))
        out = channel_shuffle(out, self.groups)
        out = self.bn2(self.dwconv(out))
        out = self.bn3(self.gconv2(out))
        if self.shortcut is not None:
            return self.relu(torch.cat([self.shortcut(x), out], dim=1))
        return self.relu(out + x)


class ShuffleNetV1Features(nn.Module):
    def __init__(self, groups=3, stem=24, stage_out=(240, 480, 960), repeats=(4, 8, 4)):
        super().__init__()
        self.stem = nn.Sequential(*_conv_bn_relu(1, stem, 3, 2), nn.MaxPool1d(3, 2, 1))
        units = []
        in_ch = stem
        for i, (out_ch, n) in enumerate(zip(stage_out, repeats)):
            for j in range(n):
                units.append(
                    ShuffleUnit1D(
                        in_ch, out_ch, 2 if j == 0 else 1, groups, first_group_conv=not (i == 0 and j == 0)
                    )
                )
                in_ch = out_ch
        self.units = nn.Sequential(*units)
        self.pool = nn.AdaptiveAvgPool1d(1)
        self.out_dim = in_ch

    def forward(self, x):
        return self.pool(self.units(self.stem(x))).flatten(1)


def _make_features(arch: Arch, tiny: bool) -> nn.Module:
    if arch is Arch.RESNET34:
        return ResNet1DFeatures((1, 1), (16, 32)) if tiny else ResNet1DFeatures()
    if arch is Arch.MOBILENET_V1:
        return MobileNetV1Features(16, ((32, 2), (32, 1))) if tiny else MobileNetV1Features()
    if arch is Arch.SHUFFLENET_V1:
        if tiny:
            return ShuffleNetV1Features(groups=3, stem=12, stage_out=(48,), repeats=(2,))
        return ShuffleNetV1Features()
    raise ValueError(f"unknown arch {arch}")


# ---------------------------------------------------------------------------
# model wrapper


class BackboneModel(nn.Module):
    """Feature extractor plus linear classifier.

    ``modality`` records which signal the model consumes ("ECG" for a teacher,
    "PPG" for a student); evaluation uses it to decide which channel to read.
    """

    def __init__(
        self,
        arch: Arch | str,
        num_classes: int,
        tiny: bool = False,
        modality: str = "PPG",
        window_len: int = WINDOW_LEN,
    ):
        super().__init__()
        self.arch = Arch(arch)
        self.tiny = bool(tiny)
        self.modality = modality
        self.window_len = window_len
        self.num_classes = num_classes
        self.features = _make_features(self.arch, self.tiny)
        self.feature_dim = self.features.out_dim
        self.classifier = nn.Linear(self.feature_dim, num_classes)

    def extract(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 2:
            x = x.unsqueeze(1)
        if x.dim() != 3 or x.shape[1] != 1 or x.shape[-1] != self.window_len:
            raise ShapeError(
                f"expected windows of shape (B, {self.window_len}), got {tuple(x.shape)}"
            )
        return self.features(x)

    def forward(self, x):
        return self.classifier(self.extract(x))

    def describe(self) -> dict:
        return {
            "arch": self.arch.value,
            "num_classes": self.num_classes,
            "tiny": self.tiny,
            "modality": self.modality,
            "window_len": self.window_len,
        }


def init_weights(model: nn.Module):
    for m in model.modules():
        if isinstance(m, nn.Conv1d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, 0.0, m.in_features**-0.5)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm1d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_backbone(
    arch: Arch | str,
    num_classes: int,
    tiny: bool = False,
    seed: int = 0,
    modality: str = "PPG",
    window_len: int = WINDOW_LEN,
) -> BackboneModel:
    """Construct and deterministically initialize a backbone.

    The global torch RNG is left untouched.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = BackboneModel(arch, num_classes, tiny, modality, window_len)
        init_weights(model)
    return model


def check_homogeneous(teacher: BackboneModel, student: BackboneModel):
    if teacher.arch != student.arch or teacher.tiny != student.tiny:
        raise ShapeError(
            f"teacher ({teacher.arch.value}, tiny={teacher.tiny}) and student "
            f"({student.arch.value}, tiny={student.tiny}) must share an architecture"
        )
    if teacher.num_classes != student.num_classes:
        raise ShapeError("teacher and student classifiers disagree on num_classes")


# ---------------------------------------------------------------------------
# batch types and functional ops


@dataclass
class EmbeddingBatch:
    values: torch.Tensor
    subject_labels: torch.Tensor | None = None

    def __len__(self):
        return self.values.shape[0]


@dataclass
class LogitsBatch:
    values: torch.Tensor
    subject_labels: torch.Tensor | None = None


@contextlib.contextmanager
def inference_mode(model: nn.Module):
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            yield model
    finally:
        model.train(was_training)


def _as_tensor(x, like: nn.Module) -> torch.Tensor:
    dtype = next(like.parameters()).dtype
    return torch.as_tensor(x).to(dtype)


def feature_extract(model: BackboneModel, windows, labels=None, batch_size: int = 512) -> EmbeddingBatch:
    """Inference-mode embeddings for a ``(B, window_len)`` batch of windows."""
    x = _as_tensor(windows, model)
    if x.dim() != 2 or x.shape[1] != model.window_len:
        raise ShapeError(f"expected windows of shape (B, {model.window_len}), got {tuple(x.shape)}")
    with inference_mode(model):
        parts = [model.extract(x[i : i + batch_size]) for i in range(0, x.shape[0], batch_size)]
    values = torch.cat(parts) if parts else x.new_zeros((0, model.feature_dim))
    return EmbeddingBatch(values, None if labels is None else torch.as_tensor(labels))


def classify(model: BackboneModel, features) -> LogitsBatch:
    """Apply the linear classifier of ``model`` to features from any same-arch model."""
    labels = None
    if isinstance(features, EmbeddingBatch):
        features, labels = features.values, features.subject_labels
    if features.dim() != 2 or features.shape[1] != model.feature_dim:
        raise ShapeError(
            f"classifier expects (B, {model.feature_dim}) features, got {tuple(features.shape)}"
        )
    return LogitsBatch(model.classifier(features), labels)


def parameter_layout(model: nn.Module) -> list[tuple[str, tuple[int, ...]]]:
    return [(name, tuple(p.shape)) for name, p in model.named_parameters()]


def flat_parameters(model: nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()])


def set_flat_parameters(model: nn.Module, flat: torch.Tensor):
    offset = 0
    with torch.no_grad():
        for p in model.parameters():
            n = p.numel()
            p.copy_(flat[offset : offset + n].view_as(p))
            offset += n
    if offset != flat.numel():
        raise ShapeError(f"flat vector has {flat.numel()} entries, model has {offset}")


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def backward(model: nn.Module, loss: torch.Tensor, op: str = "loss") -> torch.Tensor:
    """Gradient of a scalar ``loss`` w.r.t. every parameter, flattened in layout order.

    Parameters the loss does not depend on get zero gradient.
    """
    if loss.dim() != 0:
        raise ShapeError(f"{op}: loss must be a scalar, got shape {tuple(loss.shape)}")
    if not torch.isfinite(loss):
        raise NumericalError(f"{op}: non-finite loss value {loss.item()}")
    params = list(model.parameters())
    if not loss.requires_grad:
        return torch.zeros(sum(p.numel() for p in params), dtype=params[0].dtype)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    flat = torch.cat(
        [torch.zeros_like(p).reshape(-1) if g is None else g.reshape(-1) for p, g in zip(params, grads)]
    )
    if not torch.all(torch.isfinite(flat)):
        raise NumericalError(f"{op}: non-finite gradient")
    return flat


def state_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# checkpoints


def save_backbone(path, model: BackboneModel, meta: dict | None = None):
    header = {"kind": "backbone", "model": model.describe()}
    header.update(meta or {})
    save_sections(path, {"model": model.state_dict()}, header)
    return Path(path)


def load_backbone(path) -> tuple[BackboneModel, dict]:
    sections, meta = load_sections(path)
    if meta.get("kind") != "backbone" or "model" not in sections:
        raise LoadError(f"{path}: not a backbone checkpoint")
    desc = meta["model"]
    model = BackboneModel(
        desc["arch"], desc["num_classes"], desc["tiny"], desc["modality"], desc["window_len"]
    )
    model.load_state_dict(sections["model"])
    model.eval()
    return model, meta
