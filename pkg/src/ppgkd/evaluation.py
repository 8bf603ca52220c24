"""Evaluation protocols: seen-subject classification and unseen-subject N-shot
identification, plus embedding export.

Inference reads exactly one channel of each segment, the one named by the
model's ``modality`` tag, and calls nothing but the model itself. A PPG
student is therefore evaluated without ECG data, teacher weights or
alignment heads.
"""

from __future__ import annotations

import csv
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.metrics import f1_score

from .backbones import BackboneModel, classify, feature_extract
from .errors import ConfigError, DataError, InsufficientDataError
from .signals import Modality, PairedSegment, SplitMode


@dataclass
class EvalReport:
    mode: SplitMode
    oa: float
    f1_macro: float | None = None
    eer: float | None = None
    n_shot: int | None = None
    # class/subject id -> {"correct", "total", ...}
    breakdown: dict = field(default_factory=dict)
    genuine_scores: list[float] = field(default_factory=list)
    impostor_scores: list[float] = field(default_factory=list)

    def metrics(self) -> "OrderedDict[str, object]":
        out: OrderedDict[str, object] = OrderedDict(mode=self.mode.value, oa=self.oa)
        if self.mode is SplitMode.SAMPLE_WISE:
            out["f1"] = self.f1_macro
        else:
            out["eer"] = self.eer
            out["n_shot"] = self.n_shot
        return out

    def to_text(self) -> str:
        lines = [f"{k}: {v!r}" if isinstance(v, float) else f"{k}: {v}" for k, v in self.metrics().items()]
        lines.append("")
        cols = sorted({c for row in self.breakdown.values() for c in row})
        lines.append("[breakdown]")
        lines.append("\t".join(["id"] + cols))
        for key, row in self.breakdown.items():
            lines.append("\t".join([str(key)] + [_fmt(row[c]) for c in cols]))
        if self.genuine_scores or self.impostor_scores:
            lines.append("")
            lines.append("[scores]")
            lines.append("kind\tscore")
            lines += [f"genuine\t{s!r}" for s in self.genuine_scores]
            lines += [f"impostor\t{s!r}" for s in self.impostor_scores]
        return "\n".join(lines) + "\n"

    def write(self, path):
        Path(path).write_text(self.to_text())


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def parse_report_metrics(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            break
        key, _, value = line.partition(": ")
        out[key] = value
    return out


# ---------------------------------------------------------------------------
# inference helpers


def _check_model(model):
    if not isinstance(model, BackboneModel):
        raise ConfigError(f"evaluation takes a single BackboneModel, got {type(model).__name__}")


def _windows(model: BackboneModel, segments: Sequence[PairedSegment]) -> np.ndarray:
    channel = Modality(model.modality).value.lower()
    if not segments:
        return np.zeros((0, model.window_len), dtype=np.float32)
    return np.stack([np.asarray(getattr(s, channel), dtype=np.float32) for s in segments])


def embed(model: BackboneModel, segments: Sequence[PairedSegment]) -> torch.Tensor:
    _check_model(model)
    return feature_extract(model, _windows(model, segments)).values


def predict(model: BackboneModel, segments: Sequence[PairedSegment]) -> np.ndarray:
    _check_model(model)
    logits = classify(model, feature_extract(model, _windows(model, segments))).values
    return logits.argmax(1).numpy()


# ---------------------------------------------------------------------------
# sample-wise


def classification_report(y_true, y_pred, class_ids: Sequence[str] | None = None) -> EvalReport:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise ConfigError("empty evaluation set")
    labels = np.union1d(y_true, y_pred)
    per_class_f1 = f1_score(y_true, y_pred, labels=labels, average=None, zero_division=0)
    breakdown = OrderedDict()
    for c, f1 in zip(labels, per_class_f1):
        name = class_ids[c] if class_ids is not None else int(c)
        mask = y_true == c
        breakdown[name] = {
            "correct": int(np.sum(y_pred[mask] == c)),
            "total": int(mask.sum()),
            "f1": float(f1),
        }
    oa = float(np.mean(y_true == y_pred))
    return EvalReport(SplitMode.SAMPLE_WISE, oa, f1_macro=float(np.mean(per_class_f1)), breakdown=breakdown)


def eval_sample_wise(
    model: BackboneModel, test: Sequence[PairedSegment], label_map: dict[str, int]
) -> EvalReport:
    """Closed-set classification: overall accuracy and macro-F1."""
    _check_model(model)
    unknown = sorted({s.subject_id for s in test} - set(label_map))
    if unknown:
        raise DataError(f"test subjects missing from the label map: {unknown[:5]}")
    y_true = np.array([label_map[s.subject_id] for s in test], dtype=np.int64)
    y_pred = predict(model, test)
    ids = [None] * len(label_map)
    for sid, i in label_map.items():
        ids[i] = sid
    return classification_report(y_true, y_pred, ids)


# ---------------------------------------------------------------------------
# subject-wise


@dataclass
class Gallery:
    subjects: list[str]
    prototypes: torch.Tensor
    enrolled: dict[str, list[PairedSegment]]
    probes: list[PairedSegment]
    n_shot: int


def enroll(model: BackboneModel, segments: Sequence[PairedSegment], n_shot: int) -> Gallery:
    """Enroll each subject from its first ``n_shot`` segments in time order.

    The prototype is the L2-normalized mean embedding; every remaining
    segment becomes a probe.
    """
    _check_model(model)
    if n_shot < 1:
        raise ConfigError("n_shot must be >= 1")
    by_subject: OrderedDict[str, list[PairedSegment]] = OrderedDict()
    for s in segments:
        by_subject.setdefault(s.subject_id, []).append(s)
    subjects = sorted(by_subject)
    enrolled, probes, protos = {}, [], []
    for sid in subjects:
        segs = sorted(by_subject[sid], key=lambda s: s.segment_index)
        if len(segs) <= n_shot:
            raise InsufficientDataError(
                f"subject {sid}: {len(segs)} segments, need more than n_shot={n_shot}"
            )
        enrolled[sid] = segs[:n_shot]
        probes.extend(segs[n_shot:])
        protos.append(embed(model, segs[:n_shot]).double().mean(0))
    prototypes = F.normalize(torch.stack(protos), dim=1) if protos else torch.zeros(0, model.feature_dim)
    return Gallery(subjects, prototypes, enrolled, probes, n_shot)


def compute_eer(genuine, impostor) -> float:
    """Equal error rate from a sweep over the observed scores.

    At threshold ``t`` a trial is accepted when its score is ``>= t``:
    FAR(t) is the fraction of impostor scores ``>= t`` and FRR(t) the
    fraction of genuine scores ``< t``. Over ``t`` in the sorted union of
    scores, the threshold minimizing ``|FAR - FRR|`` is selected (the lowest
    such threshold on ties) and ``(FAR + FRR) / 2`` is returned there.
    """
    g = np.sort(np.asarray(genuine, dtype=np.float64))
    i = np.sort(np.asarray(impostor, dtype=np.float64))
    if g.size == 0 or i.size == 0:
        raise ConfigError("compute_eer needs non-empty genuine and impostor score lists")
    thresholds = np.unique(np.concatenate([g, i]))
    far = (i.size - np.searchsorted(i, thresholds, side="left")) / i.size
    frr = np.searchsorted(g, thresholds, side="left") / g.size
    k = int(np.argmin(np.abs(far - frr)))
    return float((far[k] + frr[k]) / 2)


def eval_subject_wise(model: BackboneModel, gallery: Gallery, probes: Sequence[PairedSegment] | None = None) -> EvalReport:
    """Rank-1 identification accuracy and EER against gallery prototypes (cosine)."""
    _check_model(model)
    if not gallery.subjects:
        raise ConfigError("empty gallery")
    probes = gallery.probes if probes is None else list(probes)
    index = {sid: k for k, sid in enumerate(gallery.subjects)}
    unknown = sorted({p.subject_id for p in probes} - set(index))
    if unknown:
        raise DataError(f"probe subjects not enrolled: {unknown[:5]}")
    if not probes:
        raise ConfigError("no probes to score")
    emb = F.normalize(embed(model, probes).double(), dim=1)
    scores = (emb @ gallery.prototypes.double().T).numpy()
    own = np.array([index[p.subject_id] for p in probes])
    rows = np.arange(len(probes))
    correct = scores.argmax(1) == own
    genuine = scores[rows, own]
    mask = np.ones_like(scores, dtype=bool)
    mask[rows, own] = False
    impostor = scores[mask]

    breakdown = OrderedDict()
    for sid in gallery.subjects:
        sel = own == index[sid]
        breakdown[sid] = {"correct": int(correct[sel].sum()), "total": int(sel.sum())}
    return EvalReport(
        SplitMode.SUBJECT_WISE,
        oa=float(correct.mean()),
        eer=compute_eer(genuine, impostor),
        n_shot=gallery.n_shot,
        breakdown=breakdown,
        genuine_scores=sorted(float(s) for s in genuine),
        impostor_scores=sorted(float(s) for s in impostor),
    )


# ---------------------------------------------------------------------------
# export


def export_embeddings(model: BackboneModel, segments: Sequence[PairedSegment], path, model_tag: str | None = None):
    """Write one row per segment: model tag, subject, segment index, embedding values."""
    _check_model(model)
    tag = model_tag or model.modality
    emb = embed(model, segments).numpy()
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "subject_id", "segment_index"] + [f"e{j}" for j in range(emb.shape[1])])
            for s, row in zip(segments, emb):
                w.writerow([tag, s.subject_id, s.segment_index] + [repr(float(v)) for v in row])
    except OSError as exc:
        raise DataError(f"cannot write embeddings to {path}: {exc}") from None
    return path


def read_embeddings(path):
    """Parse an export back into ``(rows, matrix)`` with ``rows`` of (tag, subject, index)."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        rows, values = [], []
        for line in r:
            rows.append((line[0], line[1], int(line[2])))
            values.append([float(v) for v in line[3:]])
    return rows, np.asarray(values)
