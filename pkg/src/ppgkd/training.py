"""Three-phase training: ECG teacher, alignment heads, PPG student.

The student phase minimizes the composite objective

    task + kd + rel + cross_kd

where each non-task term can be switched off. The baseline student goes
through exactly the same loop with every non-task term disabled.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from .alignment import AlignmentConfig, AlignmentHeads, load_heads, save_heads, train_alignment
from .backbones import (
    BackboneModel,
    build_backbone,
    check_homogeneous,
    load_backbone,
    save_backbone,
)
from .batching import pk_batches, shuffled_batches
from .errors import ConfigError, NumericalError
from .losses import (
    LossConfig,
    RelKind,
    cka_loss,
    cross_modal_triplet,
    kd_loss,
    mmd_loss,
    task_loss_components,
    total_loss,
)
from .signals import DatasetSplit, Modality, SplitMode, SplitParams, build_split, load_records, pair_records

log = logging.getLogger(__name__)

PHASES = ("teacher", "align", "student-baseline", "student-distill")


@dataclass
class TrainConfig:
    """Every tunable of a run; flat so each key maps to one CLI flag."""

    data_dir: str = "data"
    run_dir: str = "runs/default"
    arch: str = "ResNet34_1D"
    tiny: bool = True
    mode: str = "sample-wise"
    seed: int = 0
    teacher_epochs: int = 20
    student_epochs: int = 20
    align_epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    pk_p: int = 8
    pk_k: int = 4
    tau_infonce: float = 0.07
    tau_kd: float = 4.0
    margin_m: float = 1.0
    # 0 selects the median heuristic
    mmd_sigma: float = 0.0
    enable_kd: bool = True
    enable_clip: bool = True
    enable_cka: bool = True
    rel_without_clip: bool = False
    kd_tau_squared: bool = False
    w_task: float = 1.0
    w_kd: float = 1.0
    w_rel: float = 1.0
    w_cross_kd: float = 1.0
    align_heldout: int = 64
    window_len: int = 300
    train_seconds: float = 384.0
    test_seconds: float = 96.0
    # 0 selects the full-scale proportion of held-out subjects
    n_test_subjects: int = 0
    split_seed: int = 0
    n_shot: int = 1
    # 0 uses every available core
    threads: int = 0

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def field_types(cls) -> dict[str, type]:
        defaults = cls()
        return {k: type(getattr(defaults, k)) for k in cls.keys()}

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = sorted(set(data) - set(cls.keys()))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        types = cls.field_types()
        kwargs = {}
        for k, v in data.items():
            kwargs[k] = coerce_value(k, v, types[k])
        return cls(**kwargs).validate()

    def validate(self) -> "TrainConfig":
        try:
            SplitMode(self.mode)
        except ValueError:
            raise ConfigError(f"mode must be one of {[m.value for m in SplitMode]}") from None
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.pk_p < 2 or self.pk_k < 2:
            raise ConfigError("pk_p and pk_k must be >= 2")
        for name in ("teacher_epochs", "student_epochs", "align_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.n_shot < 1:
            raise ConfigError("n_shot must be >= 1")
        self.loss_config()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    @property
    def split_mode(self) -> SplitMode:
        return SplitMode(self.mode)

    def loss_config(self) -> LossConfig:
        return LossConfig(
            tau_infonce=self.tau_infonce,
            tau_kd=self.tau_kd,
            margin_m=self.margin_m,
            mmd_bandwidth_sigma=self.mmd_sigma or None,
            enable_kd=self.enable_kd,
            enable_clip_align=self.enable_clip,
            enable_cka=self.enable_cka,
            rel_without_clip=self.rel_without_clip,
            kd_tau_squared=self.kd_tau_squared,
            weights={"task": self.w_task, "kd": self.w_kd, "rel": self.w_rel, "cross_kd": self.w_cross_kd},
        ).validate(self.mode)

    def align_config(self) -> AlignmentConfig:
        return AlignmentConfig(
            epochs=self.align_epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            betas=(self.beta1, self.beta2),
            tau=self.tau_infonce,
            seed=self.seed,
            heldout_size=self.align_heldout,
        )

    def split_params(self) -> SplitParams:
        return SplitParams(
            train_seconds=self.train_seconds,
            test_seconds=self.test_seconds,
            window_len=self.window_len,
            n_test_subjects=self.n_test_subjects or None,
            seed=self.split_seed,
        )


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def coerce_value(key: str, value, typ: type):
    if isinstance(value, typ) and not (typ is int and isinstance(value, bool)):
        return value
    try:
        if typ is bool:
            s = str(value).strip().lower()
            if s in _TRUE:
                return True
            if s in _FALSE:
                return False
            raise ValueError(value)
        if typ is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if typ is float:
            return float(value)
        return typ(value)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r}: cannot interpret {value!r} as {typ.__name__}") from None


# ---------------------------------------------------------------------------
# loss trace


class LossTrace:
    """Append-only per-step record of loss components."""

    def __init__(self):
        self.rows: list[tuple[str, int, int, str, float]] = []

    def log_step(self, phase: str, step: int, epoch: int, components: dict[str, float], total: float):
        for name, value in components.items():
            self.rows.append((phase, step, epoch, name, value))
        self.rows.append((phase, step, epoch, "total", total))
        log.debug(
            "phase=%s step=%d %s total=%.6f",
            phase,
            step,
            " ".join(f"{k}={v:.6f}" for k, v in components.items()),
            total,
        )

    def steps(self, phase: str | None = None) -> dict[tuple[str, int], dict[str, float]]:
        out: dict[tuple[str, int], dict[str, float]] = {}
        for ph, step, _, name, value in self.rows:
            if phase is None or ph == phase:
                out.setdefault((ph, step), {})[name] = value
        return out

    def components(self, phase: str | None = None) -> set[str]:
        return {r[3] for r in self.rows if phase is None or r[0] == phase} - {"total"}

    def write(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["phase", "step", "epoch", "component", "value"])
            for ph, step, epoch, name, value in self.rows:
                w.writerow([ph, step, epoch, name, repr(value)])


# ---------------------------------------------------------------------------
# optimization


def make_optimizer(params: Iterable[torch.nn.Parameter], cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), weight_decay=0.0)


def optimizer_step(optimizer: torch.optim.Optimizer, params, grads):
    """Install ``grads`` on ``params`` and take one Adam step."""
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise ConfigError("params and grads differ in length")
    for p, g in zip(params, grads):
        if g is None:
            p.grad = None
            continue
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {tuple(g.shape)} does not match parameter {tuple(p.shape)}")
        if not torch.all(torch.isfinite(g)):
            raise NumericalError("non-finite gradient passed to optimizer_step")
        p.grad = g.detach().clone()
    optimizer.step()


def _derived_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


_TEACHER_STREAM, _STUDENT_STREAM = 0, 1


def _epoch_batches(labels: np.ndarray, cfg: TrainConfig, rng: np.random.Generator):
    if cfg.split_mode is SplitMode.SUBJECT_WISE:
        return pk_batches(labels, cfg.pk_p, cfg.pk_k, rng)
    return shuffled_batches(len(labels), cfg.batch_size, rng)


def _fit(
    split: DatasetSplit,
    cfg: TrainConfig,
    modality: Modality,
    phase: str,
    trace: LossTrace | None,
    teacher: BackboneModel | None = None,
    heads: AlignmentHeads | None = None,
    loss_cfg: LossConfig | None = None,
) -> BackboneModel:
    mode = cfg.split_mode
    stream = _TEACHER_STREAM if modality is Modality.ECG else _STUDENT_STREAM
    epochs = cfg.teacher_epochs if modality is Modality.ECG else cfg.student_epochs
    margin = cfg.margin_m
    x_np, y_np = split.arrays("train", modality)
    x, y = torch.from_numpy(x_np), torch.from_numpy(y_np)
    if teacher is not None:
        x_ecg = torch.from_numpy(split.arrays("train", Modality.ECG)[0])

    model = build_backbone(
        cfg.arch, split.num_classes, cfg.tiny, seed=_derived_seed(cfg.seed, stream),
        modality=modality.value, window_len=cfg.window_len,
    )
    if teacher is not None:
        check_homogeneous(teacher, model)
    opt = make_optimizer(model.parameters(), cfg)
    rng = np.random.default_rng([cfg.seed, stream])
    step = 0
    for epoch in range(epochs):
        model.train()
        for idx in _epoch_batches(y_np, cfg, rng):
            b = torch.from_numpy(idx)
            f_s = model.extract(x[b])
            q_s = model.classifier(f_s)
            parts = task_loss_components(q_s, y[b], mode, f_s, margin)
            comps = {k: v.double() for k, v in parts.items()}
            task = sum(comps.values())
            if teacher is None:
                total = task
            else:
                extra = _distill_terms(model, teacher, heads, loss_cfg, x_ecg[b], y[b], f_s, q_s)
                total = total_loss(
                    task, extra.get("kd", 0.0), extra.get("rel", 0.0), extra.get("cross_kd", 0.0), loss_cfg
                )
                w = loss_cfg.weights
                comps = {k: w.get("task", 1.0) * v for k, v in comps.items()}
                comps.update({k: w.get(k, 1.0) * v for k, v in extra.items()})
            if not torch.isfinite(total):
                bad = [k for k, v in comps.items() if not torch.isfinite(v)]
                raise NumericalError(f"{phase}: non-finite loss at step {step} (components: {bad or 'total'})")
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            if trace is not None:
                trace.log_step(phase, step, epoch, {k: v.item() for k, v in comps.items()}, total.item())
            step += 1
    model.eval()
    return model


def _distill_terms(
    student, teacher, heads, loss_cfg: LossConfig, ecg, labels, f_s, q_s
) -> dict[str, torch.Tensor]:
    out: dict[str, torch.Tensor] = {}
    with torch.no_grad():
        f_t = teacher.extract(ecg)
        p_t = teacher.classifier(f_t)
    tau = loss_cfg.tau_kd
    if loss_cfg.enable_kd:
        out["kd"] = kd_loss(p_t, q_s, tau, loss_cfg.kd_tau_squared).double()
    if loss_cfg.rel_enabled:
        if loss_cfg.enable_clip_align:
            t_rel, s_rel = heads(f_t, f_s)
        else:
            t_rel, s_rel = f_t, f_s
        if loss_cfg.rel_kind is RelKind.MMD:
            rel = mmd_loss(t_rel, s_rel, loss_cfg.mmd_bandwidth_sigma)
        else:
            rel = cross_modal_triplet(s_rel, t_rel, labels, loss_cfg.margin_m)
        out["rel"] = rel.double()
    if loss_cfg.enable_cka:
        # teacher classifier judges student features; student classifier reads teacher features
        q_t = teacher.classifier(f_s)
        p_s = student.classifier(f_t)
        out["cross_kd"] = cka_loss(p_t, q_t, p_s, q_s, tau, loss_cfg.kd_tau_squared).double()
    return out


def train_teacher(split: DatasetSplit, cfg: TrainConfig, trace: LossTrace | None = None) -> BackboneModel:
    """Supervised ECG model trained on the task loss only."""
    cfg.validate()
    return _fit(split, cfg, Modality.ECG, "teacher", trace)


def train_student_baseline(split: DatasetSplit, cfg: TrainConfig, trace: LossTrace | None = None) -> BackboneModel:
    """Supervised PPG model trained on the task loss only."""
    cfg.validate()
    return _fit(split, cfg, Modality.PPG, "student-baseline", trace)


def train_student_distilled(
    split: DatasetSplit,
    teacher: BackboneModel,
    heads: AlignmentHeads | None,
    cfg: TrainConfig,
    trace: LossTrace | None = None,
) -> BackboneModel:
    """PPG student trained on the composite objective under a frozen teacher.

    The student starts from the same initialization and sees the same batch
    order as :func:`train_student_baseline`; with every optional term off the
    two are numerically identical.
    """
    cfg.validate()
    loss_cfg = cfg.loss_config()
    if loss_cfg.enable_clip_align and heads is None:
        raise ConfigError("alignment term enabled but no alignment heads were provided")
    frozen_teacher = copy.deepcopy(teacher).eval()
    for p in frozen_teacher.parameters():
        p.requires_grad_(False)
    frozen_heads = None
    if heads is not None:
        frozen_heads = copy.deepcopy(heads).freeze()
    return _fit(split, cfg, Modality.PPG, "student-distill", trace, frozen_teacher, frozen_heads, loss_cfg)


# ---------------------------------------------------------------------------
# run directories

CHECKPOINT_NAMES = {
    "teacher": "teacher.safetensors",
    "align": "heads.safetensors",
    "student-baseline": "student-baseline.safetensors",
    "student-distill": "student-distill.safetensors",
}


@dataclass
class RunArtifacts:
    run_dir: Path
    checkpoint: Path
    trace: Path
    config_hash: str
    seed: int


def write_config_snapshot(cfg: TrainConfig, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def load_split(cfg: TrainConfig) -> DatasetSplit:
    records = load_records(cfg.data_dir)
    pairs = pair_records(records, cfg.window_len)
    return build_split(pairs, cfg.split_mode, cfg.split_params())


def checkpoint_path(cfg: TrainConfig, phase: str) -> Path:
    return Path(cfg.run_dir) / CHECKPOINT_NAMES[phase]


def _require(cfg: TrainConfig, phase: str, needed_by: str) -> Path:
    path = checkpoint_path(cfg, phase)
    if not path.exists():
        raise ConfigError(f"phase {needed_by!r} needs the {phase!r} checkpoint; run --phase {phase} first ({path})")
    return path


def run_phase(phase: str, cfg: TrainConfig, split: DatasetSplit | None = None) -> RunArtifacts:
    """Execute one training phase and write its checkpoint and loss trace."""
    if phase not in PHASES:
        raise ConfigError(f"unknown phase {phase!r}; expected one of {PHASES}")
    cfg.validate()
    # prerequisites are checked before any data is touched
    if phase in ("align", "student-distill"):
        _require(cfg, "teacher", phase)
    if phase == "student-distill" and cfg.enable_clip:
        _require(cfg, "align", phase)

    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    split = split if split is not None else load_split(cfg)
    stamp = {"config_hash": cfg.hash(), "seed": cfg.seed, "phase": phase}
    trace = LossTrace()
    out = checkpoint_path(cfg, phase)

    if phase == "teacher":
        save_backbone(out, train_teacher(split, cfg, trace), stamp)
    elif phase == "student-baseline":
        save_backbone(out, train_student_baseline(split, cfg, trace), stamp)
    elif phase == "align":
        teacher, _ = load_backbone(_require(cfg, "teacher", phase))
        heads = train_alignment(split.train, teacher, cfg.align_config())
        for epoch, (tr, ho) in enumerate(zip(heads.history["train_nce"], heads.history["heldout_nce"][1:])):
            trace.rows.append(("align", epoch, epoch, "info_nce", tr))
            trace.rows.append(("align", epoch, epoch, "heldout_info_nce", ho))
        save_heads(out, heads, stamp)
    else:
        teacher, _ = load_backbone(_require(cfg, "teacher", phase))
        heads = load_heads(_require(cfg, "align", phase))[0] if cfg.enable_clip else None
        save_backbone(out, train_student_distilled(split, teacher, heads, cfg, trace), stamp)

    trace_path = run_dir / f"trace_{phase}.csv"
    trace.write(trace_path)
    write_config_snapshot(cfg, run_dir / f"config_{phase}.json")
    return RunArtifacts(run_dir, out, trace_path, stamp["config_hash"], cfg.seed)
