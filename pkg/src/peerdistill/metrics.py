"""Deployment-cost accounting, fold aggregation, embedding dumps and the
human-readable report.

Cost convention (documented, per sample):
  * MACs count the scalar multiplies of the layer arithmetic: weight
    applications (dense/conv/attention matmuls), LSTM gate products, the
    attention scale, and the squares inside l2 normalization. Bias adds
    and pooling sums contribute none.
  * FLOPs = 2 * MACs + one per elementwise nonlinearity or normalization
    element (ReLU/sigmoid/tanh evaluations, softmax rows, layer-norm
    elements, the division+sqrt of l2 normalization).
Training cost covers all peers with projection heads; inference cost is
the single deployed peer without heads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from .data import FnirsDataset
from .errors import ConfigError, FormatError, ValidationError
from .models import PeerConfig, PeerEnsemble, PeerNet, count_params
from .trainer import FoldResult

EMBED_MAGIC = "peerdistill-embeddings"


# ---- analytic cost model --------------------------------------------------- #

def _head_macs(cfg: PeerConfig) -> int:
    # linear map + d squares inside the row norm, per head
    per_head = lambda e: e * cfg.contrastive_dim + cfg.contrastive_dim
    return per_head(cfg.embed_region_dim) + per_head(cfg.embed_channel_dim)


def _head_norm_elems(cfg: PeerConfig) -> int:
    # division of d elements + one sqrt, per head
    return 2 * (cfg.contrastive_dim + 1)


def _cnn_lstm_macs(cfg: PeerConfig, include_heads: bool) -> int:
    width = 2 * cfg.n_channels
    c1, c2 = cfg.conv_channels
    k1, k2 = cfg.conv_kernels
    l1, l2 = cfg.conv_lengths()
    h = cfg.embed_channel_dim
    t = cfg.n_samples
    macs = l1 * c1 * (width * k1)
    macs += l2 * c2 * (c1 * k2)
    macs += (c2 * l2) * cfg.embed_region_dim
    # LSTM: 4 gate matmuls per step per layer, plus 3 elementwise gate
    # products per hidden unit per step
    macs += t * (4 * h * (width + h) + 3 * h)   # layer 1
    macs += t * (4 * h * (h + h) + 3 * h)       # layer 2
    macs += (cfg.embed_region_dim + cfg.embed_channel_dim) * cfg.class_count
    if include_heads:
        macs += _head_macs(cfg)
    return macs


def _cnn_lstm_nonlin(cfg: PeerConfig, include_heads: bool) -> int:
    c1, c2 = cfg.conv_channels
    l1, l2 = cfg.conv_lengths()
    h = cfg.embed_channel_dim
    t = cfg.n_samples
    elems = l1 * c1 + l2 * c2                    # ReLUs
    elems += t * 5 * h * 2                       # 4 gate + 1 cell activation, 2 layers
    if include_heads:
        elems += _head_norm_elems(cfg)
    return elems


def _branch_macs(cfg: PeerConfig, tokens: int, width: int, out_dim: int) -> int:
    d = cfg.d_model
    f = cfg.ffn_mult * d
    macs = tokens * width * d                    # token projection
    per_layer = (3 * tokens * d * d              # q, k, v
                 + tokens * tokens * d           # scores
                 + tokens * tokens               # 1/sqrt(dh) scale
                 + tokens * tokens * d           # scores @ v
                 + tokens * d * d                # output projection
                 + 2 * tokens * d * f)           # feed-forward pair
    macs += cfg.n_layers * per_layer
    macs += d * out_dim                          # pooled affine
    return macs


def _branch_nonlin(cfg: PeerConfig, tokens: int) -> int:
    d = cfg.d_model
    f = cfg.ffn_mult * d
    per_layer = (cfg.n_heads * tokens * tokens   # softmax rows
                 + 2 * tokens * d                # two layer norms
                 + tokens * f)                   # ReLU
    return cfg.n_layers * per_layer


def _transformer_macs(cfg: PeerConfig, include_heads: bool) -> int:
    macs = _branch_macs(cfg, cfg.n_channels, 2 * cfg.n_samples,
                        cfg.embed_region_dim)
    macs += _branch_macs(cfg, cfg.n_samples, 2 * cfg.n_channels,
                         cfg.embed_channel_dim)
    macs += (cfg.embed_region_dim + cfg.embed_channel_dim) * cfg.class_count
    if include_heads:
        macs += _head_macs(cfg)
    return macs


def _transformer_nonlin(cfg: PeerConfig, include_heads: bool) -> int:
    elems = _branch_nonlin(cfg, cfg.n_channels)
    elems += _branch_nonlin(cfg, cfg.n_samples)
    if include_heads:
        elems += _head_norm_elems(cfg)
    return elems


def analytic_macs(cfg: PeerConfig, phase: str = "inference") -> int:
    """Per-sample forward multiplies for one peer."""
    if phase not in ("inference", "training"):
        raise ConfigError(f"phase must be inference or training, got {phase!r}")
    heads = phase == "training"
    if cfg.kind == "cnn_lstm":
        return _cnn_lstm_macs(cfg, heads)
    return _transformer_macs(cfg, heads)


def analytic_flops(cfg: PeerConfig, phase: str = "inference") -> int:
    heads = phase == "training"
    if cfg.kind == "cnn_lstm":
        nonlin = _cnn_lstm_nonlin(cfg, heads)
    else:
        nonlin = _transformer_nonlin(cfg, heads)
    return 2 * analytic_macs(cfg, phase) + nonlin


@dataclass
class CompressionReport:
    """Training-cohort vs deployed-peer cost, per sample."""

    train_params: int
    infer_params: int
    compression_ratio: float
    macs_train: int
    macs_infer: int
    flops_train: int
    flops_infer: int

    def to_dict(self) -> dict:
        return {"train_params": self.train_params,
                "infer_params": self.infer_params,
                "compression_ratio": self.compression_ratio,
                "macs_train": self.macs_train, "macs_infer": self.macs_infer,
                "flops_train": self.flops_train, "flops_infer": self.flops_infer}


def compression_report(ensemble: PeerEnsemble,
                       selected_peer: PeerNet) -> CompressionReport:
    """Cohort training cost against the one peer that ships."""
    train_params = ensemble.count_params("training")
    infer_params = count_params(selected_peer, "inference")
    cfg_train = ensemble.config
    cfg_infer = selected_peer.config
    macs_train = len(ensemble) * analytic_macs(cfg_train, "training")
    flops_train = len(ensemble) * analytic_flops(cfg_train, "training")
    return CompressionReport(
        train_params=train_params,
        infer_params=infer_params,
        compression_ratio=1.0 - infer_params / train_params,
        macs_train=macs_train,
        macs_infer=analytic_macs(cfg_infer, "inference"),
        flops_train=flops_train,
        flops_infer=analytic_flops(cfg_infer, "inference"))


def compression_from_params(train_params: int, infer_params: int) -> float:
    """1 - deployed/training parameter ratio (the headline percentage)."""
    if train_params <= 0:
        raise ConfigError("train_params must be positive")
    return 1.0 - infer_params / train_params


# ---- fold aggregation ------------------------------------------------------ #

def aggregate_folds(results: list[FoldResult]) -> dict:
    """Per-fold selected accuracies plus their mean, table-ready."""
    if not results:
        raise ValidationError("no fold results to aggregate")
    accs = [r.selected_accuracy for r in results]
    return {"fold_accuracies": accs,
            "mean_accuracy": float(np.mean(accs)),
            "selected_peers": [r.selected_peer for r in results],
            "peer_accuracies": [list(r.peer_accuracies) for r in results]}


# ---- embedding dumps ------------------------------------------------------- #

def export_embeddings(peer: PeerNet, dataset: FnirsDataset, path,
                      fold_id: int = 0, peer_index: int = 0,
                      indices=None, batch_size: int = 256) -> int:
    """Write pre-projection embeddings [e_region | e_channel] for analysis.

    Rows follow dataset order (or `indices` order); header carries per-row
    subject and label plus the fold/peer identity of the dump. Returns the
    row count.
    """
    idx = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    if idx.size == 0:
        raise ValidationError("nothing to embed: empty index set")
    cfg = peer.config
    rows = np.empty((idx.size, cfg.embed_region_dim + cfg.embed_channel_dim),
                    dtype=np.float32)
    peer.eval()
    with torch.no_grad():
        for lo in range(0, idx.size, batch_size):
            sel = idx[lo: lo + batch_size]
            out = peer.forward_full(dataset.signals[sel])
            rows[lo: lo + sel.size, : cfg.embed_region_dim] = out.e_region.numpy()
            rows[lo: lo + sel.size, cfg.embed_region_dim:] = out.e_channel.numpy()
    header = [
        EMBED_MAGIC,
        "version: 1",
        f"region_dim: {cfg.embed_region_dim}",
        f"channel_dim: {cfg.embed_channel_dim}",
        f"row_count: {idx.size}",
        f"fold: {fold_id}",
        f"peer: {peer_index}",
        "subjects: " + ",".join(dataset.subjects[i] for i in idx),
        "labels: " + ",".join(str(int(dataset.labels[i])) for i in idx),
        "end_header",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode())
        fh.write(rows.astype("<f4").tobytes())
    return int(idx.size)


def load_embeddings(path) -> tuple[dict, np.ndarray, np.ndarray]:
    """Read a dump back: (header fields, e_region rows, e_channel rows)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    marker = b"\nend_header\n"
    cut = blob.find(marker)
    if cut < 0:
        raise FormatError("no end_header marker; not an embedding dump")
    lines = blob[:cut].decode("utf-8").split("\n")
    if lines[0] != EMBED_MAGIC:
        raise FormatError("not an embedding dump (bad magic)")
    fields = {}
    for ln in lines[1:]:
        key, _, val = ln.partition(":")
        fields[key.strip()] = val.strip()
    try:
        rg = int(fields["region_dim"])
        ch = int(fields["channel_dim"])
        count = int(fields["row_count"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"embedding header malformed: {exc}") from None
    header = {"region_dim": rg, "channel_dim": ch, "row_count": count,
              "fold": int(fields.get("fold", 0)),
              "peer": int(fields.get("peer", 0)),
              "subjects": fields["subjects"].split(","),
              "labels": [int(v) for v in fields["labels"].split(",")]}
    payload = blob[cut + len(marker):]
    if len(payload) != count * (rg + ch) * 4:
        raise ValidationError("embedding payload does not match header shape")
    rows = np.frombuffer(payload, dtype="<f4").reshape(count, rg + ch)
    return header, rows[:, :rg], rows[:, rg:]


# ---- report rendering ------------------------------------------------------ #

def _pct(x: float) -> str:
    return f"{100.0 * x:6.2f}"


def render_report(summary: dict, compression: CompressionReport | None = None,
                  ablations: dict | None = None,
                  title: str = "Cross-subject evaluation") -> tuple[str, dict]:
    """Fixed-width text report plus a JSON-ready payload holding the same
    numbers. Sections with no data are omitted."""
    accs = summary["fold_accuracies"]
    lines = [title, "=" * len(title), ""]
    head = "Fold      " + "".join(f"{i + 1:>8d}" for i in range(len(accs)))
    lines.append(head + f"{'Avg.':>8s}")
    lines.append("Acc. (%)  " + "".join(_pct(a) + "  " for a in accs).rstrip()
                 + f"  {_pct(summary['mean_accuracy'])}")
    lines.append("Selected peer per fold: "
                 + ", ".join(str(p) for p in summary["selected_peers"]))
    lines.append("(selection uses held-out subjects; accuracies are optimistic)")
    payload: dict = {"summary": dict(summary)}
    if compression is not None:
        lines += ["", "Deployment cost (per sample)",
                  "-" * 28,
                  f"{'':12s}{'params':>12s}{'MACs':>14s}{'FLOPs':>14s}",
                  (f"{'training':12s}{compression.train_params:>12d}"
                   f"{compression.macs_train:>14d}{compression.flops_train:>14d}"),
                  (f"{'inference':12s}{compression.infer_params:>12d}"
                   f"{compression.macs_infer:>14d}{compression.flops_infer:>14d}"),
                  f"parameter compression: {_pct(compression.compression_ratio).strip()}%"]
        payload["compression"] = compression.to_dict()
    if ablations:
        lines += ["", "Ablations (mean accuracy over folds)", "-" * 36]
        for name in sorted(ablations):
            lines.append(f"{name:24s}{_pct(ablations[name])}")
        payload["ablations"] = dict(ablations)
    return "\n".join(lines) + "\n", payload


def render_sweep_report(sweep: dict) -> tuple[str, dict]:
    """Accuracy vs cohort size with the no-distillation baseline as the
    reference line (matches the usual peer-count figure layout)."""
    lines = ["Accuracy vs peer count", "=" * 22, ""]
    lines.append(f"{'peers':>6s}{'mean acc (%)':>14s}")
    for m in sweep["peer_counts"]:
        lines.append(f"{m:>6d}{_pct(sweep['accuracy_by_count'][m]):>14s}")
    lines.append("")
    lines.append(f"baseline (independent peers, M={sweep['baseline_peer_count']}): "
                 f"{_pct(sweep['baseline_accuracy']).strip()}%  "
                 "-- dashed reference line")
    payload = {"peer_counts": list(sweep["peer_counts"]),
               "accuracy_by_count": {str(m): sweep["accuracy_by_count"][m]
                                     for m in sweep["peer_counts"]},
               "baseline_accuracy": sweep["baseline_accuracy"],
               "baseline_peer_count": sweep["baseline_peer_count"]}
    return "\n".join(lines) + "\n", payload


def report_roundtrip_ok(payload: dict) -> bool:
    """The structured variant must survive JSON with numbers intact."""
    return json.loads(json.dumps(payload)) == payload
