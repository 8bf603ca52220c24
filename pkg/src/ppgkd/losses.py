"""Differentiable losses for cross-modal distillation.

All functions take and return torch tensors and are pure. Teacher-side
inputs that act as targets (``p_t`` in the KD terms, ``p_s`` in the
learning-side assessment term) are detached inside the loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from enum import Enum

import torch
import torch.nn.functional as F

from .errors import ConfigError, NumericalError, ShapeError
from .signals import SplitMode


class RelKind(str, Enum):
    MMD = "mmd"
    TRIPLET = "triplet"


def rel_kind_for_mode(mode: SplitMode | str) -> RelKind:
    return RelKind.MMD if SplitMode(mode) is SplitMode.SAMPLE_WISE else RelKind.TRIPLET


@dataclass
class LossConfig:
    tau_infonce: float = 0.07
    tau_kd: float = 4.0
    margin_m: float = 1.0
    # None selects the per-batch median heuristic
    mmd_bandwidth_sigma: float | None = None
    enable_kd: bool = True
    enable_clip_align: bool = True
    enable_cka: bool = True
    rel_kind: RelKind | None = None
    # apply the relation term to raw embeddings when alignment is disabled
    rel_without_clip: bool = False
    # multiply the KD and CKA terms by tau^2 inside the training objective;
    # off by default, which keeps the objective as the plain softened KL
    kd_tau_squared: bool = False
    weights: dict = field(
        default_factory=lambda: {"task": 1.0, "kd": 1.0, "rel": 1.0, "cross_kd": 1.0}
    )

    def validate(self, mode: SplitMode | str | None = None) -> "LossConfig":
        for name in ("tau_infonce", "tau_kd", "margin_m"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.mmd_bandwidth_sigma is not None and not self.mmd_bandwidth_sigma > 0:
            raise ConfigError("mmd_bandwidth_sigma must be positive (or None for the median heuristic)")
        if self.rel_kind is not None:
            self.rel_kind = RelKind(self.rel_kind)
        if mode is not None:
            expected = rel_kind_for_mode(mode)
            if self.rel_kind is None:
                self.rel_kind = expected
            elif self.rel_kind is not expected:
                raise ConfigError(
                    f"rel_kind {self.rel_kind.value} is inconsistent with {SplitMode(mode).value} mode "
                    f"(expected {expected.value})"
                )
        return self

    @property
    def rel_enabled(self) -> bool:
        return self.enable_clip_align or self.rel_without_clip

    def enabled_components(self) -> list[str]:
        comps = ["task"]
        if self.enable_kd:
            comps.append("kd")
        if self.rel_enabled:
            comps.append("rel")
        if self.enable_cka:
            comps.append("cross_kd")
        return comps

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def _finite(op: str, value: torch.Tensor) -> torch.Tensor:
    if not torch.all(torch.isfinite(value.detach())):
        raise NumericalError(f"{op}: non-finite value")
    return value


def _same_shape(op: str, *tensors):
    shapes = {tuple(t.shape) for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"{op}: shape mismatch {sorted(shapes)}")


# ---------------------------------------------------------------------------
# alignment


def info_nce(ecg_emb: torch.Tensor, ppg_emb: torch.Tensor, tau: float = 0.07, normalize: bool = True):
    """Symmetric InfoNCE over the ``B x B`` similarity matrix of paired embeddings.

    Row ``i`` of ``ecg_emb`` and row ``i`` of ``ppg_emb`` are the positive
    pair; every other row of the opposite modality is a negative. The result
    averages the ECG->PPG and PPG->ECG cross-entropies.
    """
    _same_shape("info_nce", ecg_emb, ppg_emb)
    if ecg_emb.dim() != 2 or ecg_emb.shape[0] == 0:
        raise ConfigError("info_nce needs a non-empty (B, D) batch")
    if not tau > 0:
        raise ConfigError("tau must be positive")
    if normalize:
        ecg_emb = F.normalize(ecg_emb, dim=1)
        ppg_emb = F.normalize(ppg_emb, dim=1)
    sim = ecg_emb @ ppg_emb.T / tau
    target = torch.arange(sim.shape[0], device=sim.device)
    loss = 0.5 * (F.cross_entropy(sim, target) + F.cross_entropy(sim.T, target))
    return _finite("info_nce", loss)


# ---------------------------------------------------------------------------
# relation terms


def gaussian_kernel(x: torch.Tensor, y: torch.Tensor, sigma: float) -> torch.Tensor:
    """exp(-||x - y||^2 / (2 sigma^2)) along the last axis."""
    if x.shape[-1] != y.shape[-1]:
        raise ShapeError("gaussian_kernel: dimension mismatch")
    if not sigma > 0:
        raise ConfigError("gaussian_kernel: sigma must be positive")
    d2 = ((x - y) ** 2).sum(-1)
    return torch.exp(-d2 / (2.0 * sigma**2))


def _kernel_matrix(x, y, sigma):
    return gaussian_kernel(x[:, None, :], y[None, :, :], sigma)


def median_bandwidth(x: torch.Tensor, y: torch.Tensor) -> float:
    """Median pairwise Euclidean distance over the pooled sample (no gradient)."""
    z = torch.cat([x, y]).detach()
    d = torch.cdist(z, z)
    iu = torch.triu_indices(z.shape[0], z.shape[0], offset=1)
    vals = d[iu[0], iu[1]]
    if vals.numel() == 0:
        return 1.0
    med = vals.median().item()
    return med if med > 0 else 1.0


def mmd_loss(t_emb: torch.Tensor, s_emb: torch.Tensor, sigma: float | None = None):
    """Biased (V-statistic) estimate of squared MMD with a Gaussian kernel."""
    if t_emb.dim() != 2 or s_emb.dim() != 2 or t_emb.shape[1] != s_emb.shape[1]:
        raise ShapeError(f"mmd_loss: incompatible shapes {tuple(t_emb.shape)}, {tuple(s_emb.shape)}")
    if sigma is None:
        sigma = median_bandwidth(t_emb, s_emb)
    k_tt = _kernel_matrix(t_emb, t_emb, sigma).mean()
    k_ss = _kernel_matrix(s_emb, s_emb, sigma).mean()
    k_ts = _kernel_matrix(t_emb, s_emb, sigma).mean()
    return _finite("mmd_loss", k_tt + k_ss - 2.0 * k_ts)


def _euclidean(a, b):
    # clamped so the gradient stays finite when two points coincide
    return ((a - b) ** 2).sum(-1).clamp_min(1e-12).sqrt()


def triplet_loss(anchor_s, positive_t, negative_t, m: float = 1.0):
    """max(d(a, p) - d(a, n) + m, 0), averaged when given row batches."""
    _same_shape("triplet_loss", anchor_s, positive_t, negative_t)
    loss = F.relu(_euclidean(anchor_s, positive_t) - _euclidean(anchor_s, negative_t) + m)
    return _finite("triplet_loss", loss.mean())


def _pairwise_euclidean(a, b):
    return _euclidean(a[:, None, :], b[None, :, :])


def batch_hard_triplet(emb: torch.Tensor, labels: torch.Tensor, m: float = 1.0):
    """Within-batch triplet term: hardest positive and hardest negative per anchor.

    Anchors without an in-batch positive or negative are skipped; if no
    anchor qualifies the result is zero.
    """
    d = _pairwise_euclidean(emb, emb)
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(len(labels), dtype=torch.bool, device=emb.device)
    pos_mask = same & ~eye
    neg_mask = ~same
    valid = pos_mask.any(1) & neg_mask.any(1)
    if not valid.any():
        return emb.sum() * 0.0
    hardest_pos = torch.where(pos_mask, d, torch.full_like(d, -torch.inf)).amax(1)
    hardest_neg = torch.where(neg_mask, d, torch.full_like(d, torch.inf)).amin(1)
    loss = F.relu(hardest_pos - hardest_neg + m)[valid]
    return _finite("batch_hard_triplet", loss.mean())


def cross_modal_triplet(s_emb: torch.Tensor, t_emb: torch.Tensor, labels: torch.Tensor, m: float = 1.0):
    """Student-anchored triplet against teacher embeddings.

    Row ``i`` of ``t_emb`` is the time-aligned teacher embedding of
    student row ``i`` and serves as the positive; the negative is the
    closest teacher embedding of a different subject in the batch.
    Anchors with no different-subject row in the batch are skipped.
    """
    _same_shape("cross_modal_triplet", s_emb, t_emb)
    d = _pairwise_euclidean(s_emb, t_emb)
    neg_mask = labels[:, None] != labels[None, :]
    valid = neg_mask.any(1)
    if not valid.any():
        return s_emb.sum() * 0.0
    pos = d.diagonal()
    hardest_neg = torch.where(neg_mask, d, torch.full_like(d, torch.inf)).amin(1)
    loss = F.relu(pos - hardest_neg + m)[valid]
    return _finite("cross_modal_triplet", loss.mean())


# ---------------------------------------------------------------------------
# logit distillation


def kd_loss(p_t: torch.Tensor, q_s: torch.Tensor, tau: float = 4.0, tau_squared: bool = True):
    """tau^2 * mean_b KL(softmax(p_t / tau) || softmax(q_s / tau)); ``p_t`` is a target.

    With ``tau_squared=False`` the plain temperature-softened KL is returned.
    """
    _same_shape("kd_loss", p_t, q_s)
    if not tau > 0:
        raise ConfigError("tau must be positive")
    log_p = F.log_softmax(p_t.detach() / tau, dim=1)
    log_q = F.log_softmax(q_s / tau, dim=1)
    kl = (log_p.exp() * (log_p - log_q)).sum(1).mean()
    return _finite("kd_loss", kl * tau**2 if tau_squared else kl)


def cka_terms(p_t, q_t, p_s, q_s, tau: float = 4.0, tau_squared: bool = True):
    """(teaching-side, learning-side) assessment terms."""
    _same_shape("cka_loss", p_t, q_t, p_s, q_s)
    return kd_loss(p_t, q_t, tau, tau_squared), kd_loss(p_s, q_s, tau, tau_squared)


def cka_loss(p_t, q_t, p_s, q_s, tau: float = 4.0, tau_squared: bool = True):
    """Mean of KL(p_t || q_t) and KL(p_s || q_s), both temperature-scaled.

    ``q_t`` is the teacher classifier applied to student features and
    ``p_s`` the student classifier applied to teacher features.
    """
    l_t, l_l = cka_terms(p_t, q_t, p_s, q_s, tau, tau_squared)
    return 0.5 * (l_t + l_l)


# ---------------------------------------------------------------------------
# task and composite objective


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor):
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ConfigError(f"labels outside [0, {logits.shape[1]})")
    return _finite("cross_entropy", F.cross_entropy(logits, labels))


def task_loss_components(logits, labels, mode, embeddings=None, margin: float = 1.0) -> dict:
    mode = SplitMode(mode)
    out = {"ce": cross_entropy(logits, labels)}
    if mode is SplitMode.SUBJECT_WISE:
        if embeddings is None:
            raise ConfigError("subject-wise task loss needs embeddings for its triplet term")
        out["triplet"] = batch_hard_triplet(embeddings, torch.as_tensor(labels), margin)
    return out


def task_loss(logits, labels, mode, embeddings=None, margin: float = 1.0):
    """Cross-entropy; subject-wise mode adds a batch-hard triplet on ``embeddings``."""
    return sum(task_loss_components(logits, labels, mode, embeddings, margin).values())


def total_loss(task, kd, rel, cross_kd, toggles: LossConfig | None = None):
    """Weighted sum of the enabled components; disabled ones contribute nothing."""
    toggles = toggles or LossConfig()
    w = toggles.weights
    out = w.get("task", 1.0) * task
    if toggles.enable_kd:
        out = out + w.get("kd", 1.0) * kd
    if toggles.rel_enabled:
        out = out + w.get("rel", 1.0) * rel
    if toggles.enable_cka:
        out = out + w.get("cross_kd", 1.0) * cross_kd
    return out
