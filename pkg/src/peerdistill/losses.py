"""Training objective for the peer cohort.

Four ingredients, combined per step:
  * label-smoothed cross entropy per peer (summed over peers),
  * temperature-softened distillation KL between a softened one-hot target
    and each peer's softened prediction (summed over peers),
  * a supervised cross-peer contrastive term per embedding level (region,
    channel), summed over ordered peer pairs,
  * a weighted total with the KL scaled by the squared distillation
    temperature.

All functions are shape-strict and raise ValidationError on malformed
inputs rather than broadcasting their way into silent nonsense.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ValidationError

KL_FLOOR = 1e-12  # probability floor inside logs


@dataclass
class LossWeights:
    """Scalar knobs of the combined objective."""

    distill_temperature: float = 2.0
    contrastive_temperature: float = 0.1
    region_weight: float = 0.2
    channel_weight: float = 0.2
    label_smoothing: float = 0.1

    def check(self) -> None:
        if self.distill_temperature <= 0:
            raise ValidationError("distill_temperature must be > 0")
        if self.contrastive_temperature <= 0:
            raise ValidationError("contrastive_temperature must be > 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValidationError("label_smoothing must be in [0, 1)")
        if self.region_weight < 0 or self.channel_weight < 0:
            raise ValidationError("loss weights must be >= 0")


@dataclass
class LossBreakdown:
    """Scalar components of one combined-loss evaluation (floats)."""

    ce: float
    kl: float
    region_contrast: float
    channel_contrast: float
    total: float
    ce_per_peer: list[float] = field(default_factory=list)
    kl_per_peer: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "ce": self.ce,
            "kl": self.kl,
            "region_contrast": self.region_contrast,
            "channel_contrast": self.channel_contrast,
            "total": self.total,
            "ce_per_peer": list(self.ce_per_peer),
            "kl_per_peer": list(self.kl_per_peer),
        }


def _as_long(labels, n: int) -> torch.Tensor:
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if y.ndim != 1 or y.shape[0] != n:
        raise ValidationError(f"labels must be [{n}], got shape {tuple(y.shape)}")
    return y


def softmax_probs(z: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax of logits [N][C], computed max-shifted."""
    if z.ndim != 2:
        raise ValidationError(f"logits must be [N][C], got {tuple(z.shape)}")
    shifted = z - z.max(dim=1, keepdim=True).values
    e = torch.exp(shifted)
    return e / e.sum(dim=1, keepdim=True)


def smoothed_targets(labels, class_count: int, smoothing: float,
                     dtype=torch.float32) -> torch.Tensor:
    """(1 - s) * onehot + s / C, rows sum to 1."""
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long).reshape(-1)
    if (y < 0).any() or (y >= class_count).any():
        raise ValidationError("label outside [0, class_count)")
    hot = torch.zeros(y.shape[0], class_count, dtype=dtype)
    hot[torch.arange(y.shape[0]), y] = 1.0
    return (1.0 - smoothing) * hot + smoothing / class_count


def cross_entropy_loss(z_per_peer, labels, smoothing: float = 0.1):
    """Label-smoothed CE per peer plus the cohort sum.

    Returns (per_peer: list[Tensor scalar], total: Tensor scalar). Each
    per-peer value is the batch mean of -sum_c q_c log p_c.
    """
    if len(z_per_peer) == 0:
        raise ValidationError("no peer logits given")
    n, c = z_per_peer[0].shape
    y = _as_long(labels, n)
    per_peer = []
    for z in z_per_peer:
        if z.shape != (n, c):
            raise ValidationError("peer logits disagree on [N][C]")
        q = smoothed_targets(y, c, smoothing, dtype=z.dtype)
        logp = torch.log_softmax(z, dim=1)
        per_peer.append(-(q * logp).sum(dim=1).mean())
    total = per_peer[0]
    for v in per_peer[1:]:
        total = total + v
    return per_peer, total


def soften_onehot(labels, class_count: int, temperature: float) -> torch.Tensor:
    """Softmax of (onehot / temperature): the softened true-label target.

    Accepts a scalar label (returns [C]) or a batch [N] (returns [N][C]).
    """
    if temperature <= 0:
        raise ValidationError("temperature must be > 0")
    scalar = np.isscalar(labels) or (
        isinstance(labels, (np.ndarray, torch.Tensor)) and getattr(labels, "ndim", 1) == 0)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long).reshape(-1)
    if (y < 0).any() or (y >= class_count).any():
        raise ValidationError("label outside [0, class_count)")
    hot = torch.zeros(y.shape[0], class_count, dtype=torch.float64)
    hot[torch.arange(y.shape[0]), y] = 1.0
    out = softmax_probs(hot / temperature)
    return out[0] if scalar else out


def soften_logits(z: torch.Tensor, temperature: float) -> torch.Tensor:
    """Softmax of (z / temperature), rows of [N][C]."""
    if temperature <= 0:
        raise ValidationError("temperature must be > 0")
    return softmax_probs(z / temperature)


def distillation_kl(soft_labels: torch.Tensor, soft_preds_per_peer):
    """KL(soft target || softened prediction), batch-averaged, per peer.

    soft_labels [N][C], each peer prediction [N][C]. Zero-probability target
    entries contribute nothing; predictions are floored at KL_FLOOR inside
    the log. Returns (per_peer: list[Tensor], total: Tensor).
    """
    if soft_labels.ndim != 2:
        raise ValidationError("soft labels must be [N][C]")
    n, c = soft_labels.shape
    per_peer = []
    for p in soft_preds_per_peer:
        if p.shape != (n, c):
            raise ValidationError("prediction shape disagrees with soft labels")
        mask = soft_labels > 0
        ratio = soft_labels / p.clamp_min(KL_FLOOR)
        terms = torch.where(mask, soft_labels * torch.log(ratio.clamp_min(KL_FLOOR)),
                            torch.zeros((), dtype=p.dtype))
        per_peer.append(terms.sum(dim=1).mean())
    if not per_peer:
        raise ValidationError("no peer predictions given")
    total = per_peer[0]
    for v in per_peer[1:]:
        total = total + v
    return per_peer, total


def _check_unit_rows(v: torch.Tensor, name: str, tol: float = 1e-4) -> None:
    with torch.no_grad():
        norms = v.norm(dim=1)
        worst = (norms - 1.0).abs().max().item()
    if worst > tol:
        raise ValidationError(
            f"{name} rows must be unit-norm (worst deviation {worst:.2e})")


def contrastive_pair_loss(v_a: torch.Tensor, v_b: torch.Tensor, labels,
                          temperature: float = 0.1) -> torch.Tensor:
    """Directed supervised contrastive term from peer a's view onto peer b's.

    For each anchor i, every same-class row j of v_b (including j = i) is a
    positive; the log-odds denominator for that pair is the pair's own
    exponential plus the anchor's different-class mass only. Positive-pair
    logs are averaged over the anchor's class count and summed over anchors.

    Requires unit-norm rows and at least two occurrences of every label
    present in the batch. Gradients flow into both views.
    """
    if temperature <= 0:
        raise ValidationError("temperature must be > 0")
    if v_a.ndim != 2 or v_a.shape != v_b.shape:
        raise ValidationError(
            f"views must share [N][d], got {tuple(v_a.shape)} vs {tuple(v_b.shape)}")
    n = v_a.shape[0]
    y = _as_long(labels, n)
    binc = torch.bincount(y)
    present = torch.unique(y)
    if (binc[present] < 2).any():
        lonely = [int(c) for c in present[binc[present] < 2]]
        raise ValidationError(
            f"every class in the batch needs >= 2 samples; classes {lonely} "
            "appear once (balanced batch plan violated?)")
    _check_unit_rows(v_a, "v_a")
    _check_unit_rows(v_b, "v_b")

    sim = (v_a @ v_b.T) / temperature          # [N][N], anchor x candidate
    pos = y[:, None] == y[None, :]
    row_max = sim.max(dim=1, keepdim=True).values
    exp_shift = torch.exp(sim - row_max)
    neg_mass = (exp_shift * (~pos)).sum(dim=1, keepdim=True)
    # log[ e^s / (e^s + Z_i) ] with the row max factored out of both parts
    log_frac = (sim - row_max) - torch.log(exp_shift + neg_mass)
    counts = pos.sum(dim=1).to(v_a.dtype)
    per_anchor = (log_frac * pos).sum(dim=1) / counts
    return -per_anchor.sum()


def contrastive_loss(views_per_peer, labels,
                     temperature: float = 0.1) -> torch.Tensor:
    """Sum of both directed terms over every unordered peer pair."""
    m = len(views_per_peer)
    if m < 2:
        raise ValidationError("cross-peer contrastive loss needs >= 2 peers")
    n = views_per_peer[0].shape[0]
    for v in views_per_peer:
        if v.shape[0] != n:
            raise ValidationError("peer views disagree on batch size")
    total = None
    for a in range(m):
        for b in range(a + 1, m):
            term = (contrastive_pair_loss(views_per_peer[a], views_per_peer[b],
                                          labels, temperature)
                    + contrastive_pair_loss(views_per_peer[b], views_per_peer[a],
                                            labels, temperature))
            total = term if total is None else total + term
    return total


def combine_losses(z_per_peer, labels, v_rg_per_peer, v_ch_per_peer,
                   weights: LossWeights, include_kl: bool = True,
                   include_region: bool = True, include_channel: bool = True):
    """Assemble the full objective; returns (total: Tensor, LossBreakdown).

    total = ce + T^2 * kl + region_weight * cr_rg + channel_weight * cr_ch,
    with disabled components reported as 0 and not added. Toggles only gate
    which terms contribute; callers still run every forward pass.
    """
    weights.check()
    ce_parts, ce_total = cross_entropy_loss(z_per_peer, labels,
                                            weights.label_smoothing)
    total = ce_total
    temp = weights.distill_temperature

    kl_parts: list[torch.Tensor] = []
    kl_total = None
    if include_kl:
        c = z_per_peer[0].shape[1]
        soft_y = soften_onehot(labels, c, temp).to(z_per_peer[0].dtype)
        soft_preds = [soften_logits(z, temp) for z in z_per_peer]
        kl_parts, kl_total = distillation_kl(soft_y, soft_preds)
        total = total + (temp * temp) * kl_total

    rg_total = None
    if include_region:
        rg_total = contrastive_loss(v_rg_per_peer, labels,
                                    weights.contrastive_temperature)
        total = total + weights.region_weight * rg_total

    ch_total = None
    if include_channel:
        ch_total = contrastive_loss(v_ch_per_peer, labels,
                                    weights.contrastive_temperature)
        total = total + weights.channel_weight * ch_total

    breakdown = LossBreakdown(
        ce=float(ce_total.detach()),
        kl=float(kl_total.detach()) if kl_total is not None else 0.0,
        region_contrast=float(rg_total.detach()) if rg_total is not None else 0.0,
        channel_contrast=float(ch_total.detach()) if ch_total is not None else 0.0,
        total=float(total.detach()),
        ce_per_peer=[float(v.detach()) for v in ce_parts],
        kl_per_peer=[float(v.detach()) for v in kl_parts],
    )
    return total, breakdown
