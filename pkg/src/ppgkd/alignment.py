"""Contrastive alignment of teacher and student embedding spaces.

A pair of single-layer projection heads maps teacher (ECG) and student (PPG)
embeddings into a common 256-dimensional space. The heads are fitted with
symmetric InfoNCE on paired windows and then frozen; only they are carried
forward into distillation.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .backbones import BackboneModel, EmbeddingBatch, build_backbone, inference_mode
from .batching import shuffled_batches
from .checkpoint import load_sections, save_sections
from .errors import ConfigError, LoadError, ShapeError
from .losses import info_nce
from .signals import PairedSegment

ALIGN_DIM = 256
log = logging.getLogger(__name__)


class Side(str, Enum):
    TEACHER = "teacher"
    STUDENT = "student"


class AlignmentHeads(nn.Module):
    def __init__(self, teacher_dim: int, student_dim: int, out_dim: int = ALIGN_DIM):
        super().__init__()
        self.P_t = nn.Linear(teacher_dim, out_dim)
        self.P_s = nn.Linear(student_dim, out_dim)
        self.out_dim = out_dim
        self.frozen = False

    def freeze(self) -> "AlignmentHeads":
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self

    def head(self, side: Side | str) -> nn.Linear:
        return self.P_t if Side(side) is Side.TEACHER else self.P_s

    def forward(self, f_t=None, f_s=None):
        return (
            None if f_t is None else self.P_t(f_t),
            None if f_s is None else self.P_s(f_s),
        )

    def describe(self):
        return {
            "teacher_dim": self.P_t.in_features,
            "student_dim": self.P_s.in_features,
            "out_dim": self.out_dim,
            "frozen": self.frozen,
        }


def project(heads: AlignmentHeads, features, side: Side | str):
    """Affine projection of teacher or student embeddings into the shared space."""
    labels = None
    values = features
    if isinstance(features, EmbeddingBatch):
        values, labels = features.values, features.subject_labels
    lin = heads.head(side)
    if values.dim() != 2 or values.shape[1] != lin.in_features:
        raise ShapeError(
            f"{Side(side).value} head expects (B, {lin.in_features}) embeddings, got {tuple(values.shape)}"
        )
    return EmbeddingBatch(lin(values.to(lin.weight.dtype)), labels)


@dataclass
class AlignmentConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    tau: float = 0.07
    seed: int = 0
    heldout_size: int = 64


@dataclass
class AlignmentTrainState:
    E_t: BackboneModel
    E_s: BackboneModel
    heads: AlignmentHeads
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    loss_history: list[float] = field(default_factory=list)
    heldout_history: list[float] = field(default_factory=list)

    def heldout_loss(self, ecg, ppg, tau) -> float:
        with inference_mode(self.E_t), inference_mode(self.E_s):
            f_t, f_s = self.heads(self.E_t.extract(ecg), self.E_s.extract(ppg))
            return info_nce(f_t, f_s, tau).item()


def fit_alignment(
    pairs: Sequence[PairedSegment], teacher: BackboneModel, config: AlignmentConfig | None = None
) -> AlignmentTrainState:
    """Train heads plus a fresh student-arch encoder; returns the full training state.

    The teacher feature extractor is used frozen, in inference mode, as the
    ECG encoder. A seeded subset of ``heldout_size`` pairs is withheld to
    track held-out InfoNCE before training and after every epoch.
    """
    cfg = config or AlignmentConfig()
    if cfg.batch_size < 2:
        raise ConfigError("alignment batch_size must be >= 2")
    rng = np.random.default_rng([cfg.seed, 2])
    ecg = torch.as_tensor(np.stack([p.ecg for p in pairs]), dtype=torch.float32)
    ppg = torch.as_tensor(np.stack([p.ppg for p in pairs]), dtype=torch.float32)
    order = rng.permutation(len(pairs))
    n_held = min(cfg.heldout_size, len(pairs) // 5)
    if n_held < 2:
        raise ConfigError("too few pairs to hold out an alignment validation batch")
    held, fit = order[:n_held], order[n_held:]

    E_t = copy.deepcopy(teacher).eval()
    for p in E_t.parameters():
        p.requires_grad_(False)
    E_s = build_backbone(teacher.arch, teacher.num_classes, teacher.tiny, seed=cfg.seed + 7919)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed + 104729)
        heads = AlignmentHeads(E_t.feature_dim, E_s.feature_dim)
    params = list(E_s.features.parameters()) + list(heads.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas)
    state = AlignmentTrainState(E_t, E_s, heads, opt)

    held_ecg, held_ppg = ecg[held], ppg[held]
    state.heldout_history.append(state.heldout_loss(held_ecg, held_ppg, cfg.tau))
    for epoch in range(cfg.epochs):
        E_s.train()
        total, count = 0.0, 0
        for idx in shuffled_batches(len(fit), cfg.batch_size, rng):
            b = torch.as_tensor(fit[idx])
            with torch.no_grad():
                f_t = E_t.extract(ecg[b])
            f_ta, f_sa = heads(f_t, E_s.extract(ppg[b]))
            loss = info_nce(f_ta, f_sa, cfg.tau)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(b)
            count += len(b)
        state.epoch = epoch + 1
        state.loss_history.append(total / max(count, 1))
        state.heldout_history.append(state.heldout_loss(held_ecg, held_ppg, cfg.tau))
        log.info(
            "align epoch %d: train_nce=%.4f heldout_nce=%.4f",
            state.epoch,
            state.loss_history[-1],
            state.heldout_history[-1],
        )
    heads.freeze()
    return state


def train_alignment(
    pairs: Sequence[PairedSegment], teacher: BackboneModel, config: AlignmentConfig | None = None
) -> AlignmentHeads:
    """Fit and freeze the projection heads; the auxiliary student encoder is discarded."""
    state = fit_alignment(pairs, teacher, config)
    state.heads.history = {
        "train_nce": list(state.loss_history),
        "heldout_nce": list(state.heldout_history),
    }
    return state.heads


def save_heads(path, heads: AlignmentHeads, meta: dict | None = None):
    header = {"kind": "heads", "heads": heads.describe()}
    header.update(meta or {})
    save_sections(path, {"heads": heads.state_dict()}, header)
    return Path(path)


def load_heads(path) -> tuple[AlignmentHeads, dict]:
    sections, meta = load_sections(path)
    if meta.get("kind") != "heads" or "heads" not in sections:
        raise LoadError(f"{path}: not an alignment-heads checkpoint")
    desc = meta["heads"]
    heads = AlignmentHeads(desc["teacher_dim"], desc["student_dim"], desc["out_dim"])
    heads.load_state_dict(sections["heads"])
    heads.freeze()
    return heads, meta
