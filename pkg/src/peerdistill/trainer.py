"""Joint training of the peer cohort and the subject-held-out protocol.

One optimization step = one forward per peer, one combined loss, one
backward, then one optimizer step per peer in a fixed logged order. The
learning rate follows a per-step cosine decay from base_lr to zero over
the whole run. Batch composition is a pure function of (seed, epoch), so
a rerun with the same config is bit-identical in deterministic mode and a
resumed run continues exactly where the checkpoint stopped.

PEERDISTILL_MODE=deterministic (default) pins torch to one thread;
PEERDISTILL_MODE=fast lets torch use whatever threads it likes and gives
up bitwise reproducibility, nothing else.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import FnirsDataset, SplitPlan, plan_balanced_batches
from .errors import ConfigError, FormatError, IntegrityError, NumericError
from .losses import LossBreakdown, LossWeights, combine_losses
from .models import (PeerConfig, PeerEnsemble, build_ensemble, save_peer,
                     select_best_peer)

MODE_ENV = "PEERDISTILL_MODE"
MODES = ("deterministic", "fast")

ABLATION_FLAGS = ("no-kl", "no-region-contrast", "no-channel-contrast")
BASELINE = tuple(ABLATION_FLAGS)  # all extras off: independently trained peers

CHECKPOINT_MAGIC = b"PDCKPT01"

_ADAM_EPS = 1e-8


def resolve_mode() -> str:
    mode = os.environ.get(MODE_ENV, "deterministic")
    if mode not in MODES:
        raise ConfigError(f"{MODE_ENV} must be one of {MODES}, got {mode!r}")
    return mode


def _apply_mode(mode: str) -> None:
    if mode == "deterministic":
        torch.set_num_threads(1)


def derived_seed(*parts: int) -> int:
    """Stable child seed for (seed, domain, index...) tuples."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Per-step cosine decay from base_lr at step 0 toward zero."""
    if total_steps < 1:
        raise ConfigError("total_steps must be >= 1")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def normalize_ablations(flags) -> tuple[str, ...]:
    out: list[str] = []
    for flag in flags:
        if flag == "baseline":
            out.extend(ABLATION_FLAGS)
        elif flag in ABLATION_FLAGS:
            out.append(flag)
        else:
            raise ConfigError(
                f"unknown ablation {flag!r}; valid: {ABLATION_FLAGS + ('baseline',)}")
    return tuple(dict.fromkeys(out))


@dataclass
class TrainConfig:
    """Optimization knobs. epochs, base_lr and weight_decay default by
    cohort size / extractor kind when left as None."""

    peer_count: int = 3
    epochs: int | None = None
    base_lr: float | None = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float | None = None
    per_class: int = 16
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    ablate: tuple[str, ...] = ()

    def resolved(self, kind: str) -> "TrainConfig":
        if self.peer_count < 2:
            raise ConfigError("peer_count must be >= 2")
        epochs = self.epochs if self.epochs is not None else (
            60 if self.peer_count == 2 else 90)
        wd = self.weight_decay if self.weight_decay is not None else (
            2.0 if self.peer_count == 2 else 3.0)
        lr = self.base_lr if self.base_lr is not None else (
            5e-5 if kind == "cnn_lstm" else 2e-4)
        if epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if lr <= 0:
            raise ConfigError("base_lr must be > 0")
        self.weights.check()
        return dataclasses.replace(
            self, epochs=epochs, base_lr=lr, weight_decay=wd,
            ablate=normalize_ablations(self.ablate))

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["ablate"] = list(self.ablate)
        return doc


@dataclass
class EpochLog:
    """One record per epoch in the run log."""

    epoch: int
    learning_rate: float
    loss: LossBreakdown
    per_peer_accuracy: list[float]
    wall_time_s: float

    def to_dict(self) -> dict:
        return {"record": "epoch", "epoch": self.epoch,
                "learning_rate": self.learning_rate,
                "loss": self.loss.to_dict(),
                "per_peer_accuracy": list(self.per_peer_accuracy),
                "wall_time_s": self.wall_time_s}


@dataclass
class TrainResult:
    epoch_logs: list[EpochLog]
    meta: dict


@dataclass
class FoldResult:
    fold: int  # 1-based, matching report tables
    peer_accuracies: list[float]
    selected_peer: int
    selected_accuracy: float

    def to_dict(self) -> dict:
        return {"fold": self.fold,
                "peer_accuracies": list(self.peer_accuracies),
                "selected_peer": self.selected_peer,
                "selected_accuracy": self.selected_accuracy}

    @classmethod
    def from_dict(cls, doc: dict) -> "FoldResult":
        return cls(int(doc["fold"]), [float(v) for v in doc["peer_accuracies"]],
                   int(doc["selected_peer"]), float(doc["selected_accuracy"]))


def config_hash(peer_config: PeerConfig, train_config: TrainConfig) -> str:
    """Identity of a training run for checkpoint compatibility checks.
    Peer init_seed is excluded; per-peer seeds derive from the train seed."""
    peer_doc = peer_config.to_dict()
    peer_doc.pop("init_seed", None)
    doc = {"peer": peer_doc, "train": train_config.to_dict()}
    return hashlib.sha256(
        json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _make_optimizers(ensemble: PeerEnsemble, config: TrainConfig):
    return [torch.optim.AdamW(p.parameters(), lr=config.base_lr,
                              betas=(config.adam_beta1, config.adam_beta2),
                              eps=_ADAM_EPS, weight_decay=config.weight_decay)
            for p in ensemble]


def _set_lr(optimizers, lr: float) -> None:
    for opt in optimizers:
        for group in opt.param_groups:
            group["lr"] = lr


def train(ensemble: PeerEnsemble, signals: np.ndarray, labels: np.ndarray,
          config: TrainConfig, *, run_log_path=None, checkpoint_path=None,
          resume_from=None, stop_after_epoch: int | None = None) -> TrainResult:
    """Run the joint loop over a training subset.

    signals [R,2,n,T] float32, labels [R]. Writes one JSONL record per epoch
    to run_log_path (meta record first), a resumable checkpoint after every
    epoch to checkpoint_path, and stops early after `stop_after_epoch`
    completed epochs when asked (checkpoint/interruption tests).
    """
    mode = resolve_mode()
    _apply_mode(mode)
    config = config.resolved(ensemble.config.kind)
    if len(ensemble) != config.peer_count:
        raise ConfigError(
            f"ensemble has {len(ensemble)} peers, config says {config.peer_count}")
    labels = np.asarray(labels, dtype=np.int64)
    chash = config_hash(ensemble.config, config)

    optimizers = _make_optimizers(ensemble, config)
    start_epoch, global_step = 0, 0
    if resume_from is not None:
        start_epoch, global_step = checkpoint_resume(
            resume_from, ensemble, optimizers, chash)

    # batch plans have identical size every epoch (same label multiset)
    first_plan = plan_balanced_batches(
        labels, config.per_class, derived_seed(config.seed, 7, start_epoch))
    n_batches = len(first_plan.batches)
    total_steps = config.epochs * n_batches

    include_kl = "no-kl" not in config.ablate
    include_rg = "no-region-contrast" not in config.ablate
    include_ch = "no-channel-contrast" not in config.ablate
    update_order = list(range(len(ensemble)))
    meta = {"record": "meta", "mode": mode, "config_hash": chash,
            "peer_update_order": update_order, "n_batches": n_batches,
            "total_steps": total_steps, "resumed_at_epoch": start_epoch,
            "train_config": config.to_dict()}

    sink = None
    if run_log_path is not None:
        sink = open(run_log_path, "a" if start_epoch else "w")
        sink.write(json.dumps(meta, sort_keys=True) + "\n")

    ensemble.train(True)
    logs: list[EpochLog] = []
    try:
        for epoch in range(start_epoch, config.epochs):
            t0 = time.perf_counter()
            plan = first_plan if epoch == start_epoch else plan_balanced_batches(
                labels, config.per_class, derived_seed(config.seed, 7, epoch))
            epoch_lr = cosine_lr(global_step, total_steps, config.base_lr)
            sums = np.zeros(5)  # ce, kl, rg, ch, total
            per_peer_ce = np.zeros(len(ensemble))
            per_peer_kl = np.zeros(len(ensemble))
            hits = np.zeros(len(ensemble), dtype=np.int64)
            seen = 0
            for b, batch_idx in enumerate(plan.batches):
                _set_lr(optimizers, cosine_lr(global_step, total_steps,
                                              config.base_lr))
                idx = np.asarray(batch_idx)
                y = labels[idx]
                try:
                    prepared = ensemble.peers[0].prepare_batch(signals[idx])
                    outs = [peer.forward_full(prepared) for peer in ensemble]
                    total, breakdown = combine_losses(
                        [o.z for o in outs], y,
                        [o.v_region for o in outs], [o.v_channel for o in outs],
                        config.weights, include_kl=include_kl,
                        include_region=include_rg, include_channel=include_ch)
                except NumericError as exc:
                    raise NumericError(
                        f"{exc} (epoch {epoch} batch {b})") from None
                if not math.isfinite(breakdown.total):
                    raise NumericError(
                        f"non-finite total loss at epoch {epoch} batch {b}")
                for opt in optimizers:
                    opt.zero_grad(set_to_none=True)
                total.backward()
                for m in update_order:
                    optimizers[m].step()
                global_step += 1

                sums += [breakdown.ce, breakdown.kl, breakdown.region_contrast,
                         breakdown.channel_contrast, breakdown.total]
                per_peer_ce += breakdown.ce_per_peer
                per_peer_kl += breakdown.kl_per_peer if breakdown.kl_per_peer \
                    else np.zeros(len(ensemble))
                with torch.no_grad():
                    for m, o in enumerate(outs):
                        hits[m] += int((o.z.argmax(dim=1).numpy() == y).sum())
                seen += idx.size

            k = float(len(plan.batches))
            mean_loss = LossBreakdown(
                ce=sums[0] / k, kl=sums[1] / k, region_contrast=sums[2] / k,
                channel_contrast=sums[3] / k, total=sums[4] / k,
                ce_per_peer=(per_peer_ce / k).tolist(),
                kl_per_peer=(per_peer_kl / k).tolist())
            log = EpochLog(epoch, epoch_lr, mean_loss,
                           (hits / seen).tolist(), time.perf_counter() - t0)
            logs.append(log)
            if sink is not None:
                sink.write(json.dumps(log.to_dict(), sort_keys=True) + "\n")
                sink.flush()
            if checkpoint_path is not None:
                checkpoint_save(checkpoint_path, ensemble, optimizers,
                                epoch + 1, global_step, chash)
            if stop_after_epoch is not None and epoch + 1 >= stop_after_epoch:
                break
    finally:
        if sink is not None:
            sink.close()
    ensemble.eval()
    return TrainResult(logs, meta)


def evaluate(peers, signals: np.ndarray, labels: np.ndarray,
             batch_size: int = 256) -> np.ndarray:
    """Per-peer accuracy over an evaluation subset. Accepts a single peer
    (returns shape [1]) or an ensemble."""
    group = list(peers) if isinstance(peers, PeerEnsemble) else [peers]
    labels = np.asarray(labels, dtype=np.int64)
    if signals.shape[0] != labels.shape[0] or labels.size == 0:
        raise ConfigError("evaluation subset empty or misaligned")
    hits = np.zeros(len(group), dtype=np.int64)
    for peer in group:
        peer.eval()
    with torch.no_grad():
        for lo in range(0, labels.size, batch_size):
            hi = min(lo + batch_size, labels.size)
            prepared = group[0].prepare_batch(signals[lo:hi])
            for m, peer in enumerate(group):
                z = peer.forward_inference(prepared)
                hits[m] += int((z.argmax(dim=1).numpy() == labels[lo:hi]).sum())
    return hits / labels.size


def per_class_accuracy(peer, signals: np.ndarray, labels: np.ndarray,
                       class_count: int, batch_size: int = 256) -> dict:
    """Confusion-diagonal view: overall accuracy plus one rate per class."""
    labels = np.asarray(labels, dtype=np.int64)
    peer.eval()
    correct = np.zeros(class_count, dtype=np.int64)
    totals = np.bincount(labels, minlength=class_count)
    with torch.no_grad():
        for lo in range(0, labels.size, batch_size):
            hi = min(lo + batch_size, labels.size)
            z = peer.forward_inference(signals[lo:hi])
            pred = z.argmax(dim=1).numpy()
            y = labels[lo:hi]
            for c in range(class_count):
                correct[c] += int(((pred == y) & (y == c)).sum())
    per_class = [float(correct[c] / totals[c]) if totals[c] else float("nan")
                 for c in range(class_count)]
    return {"overall": float(correct.sum() / labels.size),
            "per_class": per_class}


# ---- subject-held-out protocol -------------------------------------------- #

@dataclass
class ProtocolResult:
    folds: list[FoldResult]
    mean_accuracy: float

    def to_dict(self) -> dict:
        return {"folds": [f.to_dict() for f in self.folds],
                "mean_accuracy": self.mean_accuracy}


def run_protocol(dataset: FnirsDataset, plan: SplitPlan,
                 peer_config: PeerConfig, train_config: TrainConfig,
                 run_dir=None) -> ProtocolResult:
    """Train/evaluate once per fold; deploy the best peer of each fold.

    Leakage is checked before any training: a fold whose test subjects
    reach the training side aborts the whole run. Peer selection uses the
    held-out subjects themselves (the reference protocol; optimistic).
    """
    plan.check_against(dataset)
    root = Path(run_dir) if run_dir is not None else None
    subjects = np.asarray(dataset.subjects)
    results: list[FoldResult] = []
    for f, fold in enumerate(plan.folds):
        train_mask = np.isin(subjects, fold.train_subjects)
        test_mask = np.isin(subjects, fold.test_subjects)
        if not train_mask.any() or not test_mask.any():
            raise ConfigError(f"fold {f + 1} selects no records on one side")
        if (train_mask & test_mask).any():
            raise ConfigError(f"fold {f + 1} leaks records across sides")
        cfg = train_config.resolved(peer_config.kind)
        ensemble = build_ensemble(peer_config, cfg.peer_count,
                                  seed=derived_seed(cfg.seed, 11, f))
        fold_dir = None
        if root is not None:
            fold_dir = root / "folds" / f"fold{f + 1}"
            fold_dir.mkdir(parents=True, exist_ok=True)
        train(ensemble, dataset.signals[train_mask], dataset.labels[train_mask],
              cfg,
              run_log_path=None if fold_dir is None else fold_dir / "epochs.jsonl",
              checkpoint_path=None if fold_dir is None else fold_dir / "checkpoint.bin")
        accs = evaluate(ensemble, dataset.signals[test_mask],
                        dataset.labels[test_mask])
        best = select_best_peer(accs)
        result = FoldResult(f + 1, [float(a) for a in accs], best,
                            float(accs[best]))
        results.append(result)
        if fold_dir is not None:
            save_peer(ensemble.peers[best], fold_dir / "best_peer.model")
            (fold_dir / "result.json").write_text(
                json.dumps(result.to_dict(), sort_keys=True, indent=2) + "\n")
    mean = float(np.mean([r.selected_accuracy for r in results]))
    return ProtocolResult(results, mean)


def sweep_peer_counts(dataset: FnirsDataset, plan: SplitPlan,
                      peer_config: PeerConfig, train_config: TrainConfig,
                      peer_counts=(2, 3, 4)) -> dict:
    """Accuracy as a function of cohort size, plus one all-ablations-on
    baseline (at the smallest swept size, for cost) as the dashed line."""
    counts = sorted(set(int(m) for m in peer_counts))
    if any(m < 2 for m in counts):
        raise ConfigError("peer counts must be >= 2")
    by_m = {}
    for m in counts:
        cfg = dataclasses.replace(train_config, peer_count=m)
        by_m[m] = run_protocol(dataset, plan, peer_config, cfg)
    base_cfg = dataclasses.replace(train_config, peer_count=counts[0],
                                   ablate=("baseline",))
    baseline = run_protocol(dataset, plan, peer_config, base_cfg)
    return {"peer_counts": counts,
            "accuracy_by_count": {m: by_m[m].mean_accuracy for m in counts},
            "folds_by_count": {m: by_m[m].to_dict() for m in counts},
            "baseline_accuracy": baseline.mean_accuracy,
            "baseline_peer_count": counts[0]}


# ---- checkpoints ----------------------------------------------------------- #

_SLOTS = ("param", "m1", "m2")  # value, first moment, second moment


def checkpoint_save(path, ensemble: PeerEnsemble, optimizers, epoch_done: int,
                    global_step: int, chash: str) -> None:
    """Binary checkpoint: params plus AdamW moments and per-parameter step
    counts, enough to continue bit-exactly in deterministic mode."""
    entries = []
    chunks = []
    steps: list[list[float]] = []
    offset = 0
    for m, (peer, opt) in enumerate(zip(ensemble, optimizers)):
        peer_steps = []
        for name, p in peer.named_parameters():
            state = opt.state.get(p, {})
            exp_avg = state.get("exp_avg")
            exp_avg_sq = state.get("exp_avg_sq")
            step = state.get("step")
            peer_steps.append(float(step) if step is not None else 0.0)
            for slot, tensor in (("param", p),
                                 ("m1", exp_avg if exp_avg is not None
                                  else torch.zeros_like(p)),
                                 ("m2", exp_avg_sq if exp_avg_sq is not None
                                  else torch.zeros_like(p))):
                arr = tensor.detach().cpu().numpy().astype("<f4")
                entries.append({"peer": m, "slot": slot, "name": name,
                                "shape": list(arr.shape), "offset": offset})
                chunks.append(arr.tobytes())
                offset += arr.size
        steps.append(peer_steps)
    payload = b"".join(chunks)
    manifest = {"format_version": 1, "config_hash": chash,
                "epoch_done": epoch_done, "global_step": global_step,
                "peer_count": len(ensemble),
                "peer_config": ensemble.config.to_dict(),
                "steps": steps, "entries": entries,
                "payload_floats": offset, "payload_crc32": zlib.crc32(payload)}
    head = json.dumps(manifest, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(head).to_bytes(4, "little"))
        fh.write(head)
        fh.write(payload)
    tmp.replace(path)


def checkpoint_resume(path, ensemble: PeerEnsemble, optimizers,
                      expected_hash: str) -> tuple[int, int]:
    """Restore params and optimizer moments in place. Refuses checkpoints
    written under a different config (hash mismatch)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    cursor = len(CHECKPOINT_MAGIC)
    head_len = int.from_bytes(blob[cursor: cursor + 4], "little")
    cursor += 4
    try:
        manifest = json.loads(blob[cursor: cursor + head_len])
    except json.JSONDecodeError as exc:
        raise FormatError(f"checkpoint manifest unreadable: {exc}") from None
    cursor += head_len
    payload = blob[cursor:]
    if manifest.get("format_version") != 1:
        raise FormatError("unsupported checkpoint format version")
    if len(payload) != manifest["payload_floats"] * 4:
        raise IntegrityError("checkpoint payload truncated")
    if zlib.crc32(payload) != manifest["payload_crc32"]:
        raise IntegrityError("checkpoint payload fails crc32 check")
    if manifest["config_hash"] != expected_hash:
        raise ConfigError(
            "checkpoint was written under a different configuration "
            f"({manifest['config_hash'][:12]} != {expected_hash[:12]})")
    if manifest["peer_count"] != len(ensemble):
        raise ConfigError("checkpoint peer count mismatch")

    flat = np.frombuffer(payload, dtype="<f4")
    per_peer: list[dict[str, dict[str, np.ndarray]]] = [
        {} for _ in range(len(ensemble))]
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        arr = flat[entry["offset"]: entry["offset"] + size].reshape(shape)
        per_peer[entry["peer"]].setdefault(entry["name"], {})[entry["slot"]] = arr

    for m, (peer, opt) in enumerate(zip(ensemble, optimizers)):
        fresh = opt.state_dict()
        state = {}
        for i, (name, p) in enumerate(peer.named_parameters()):
            slots = per_peer[m].get(name)
            if slots is None or set(slots) != set(_SLOTS):
                raise FormatError(
                    f"checkpoint missing slots for peer {m} parameter {name!r}")
            if tuple(slots["param"].shape) != tuple(p.shape):
                raise ConfigError(
                    f"checkpoint shape mismatch on peer {m} parameter {name!r}")
            with torch.no_grad():
                p.copy_(torch.from_numpy(slots["param"].copy()))
            state[i] = {
                "step": torch.tensor(float(manifest["steps"][m][i])),
                "exp_avg": torch.from_numpy(slots["m1"].copy()),
                "exp_avg_sq": torch.from_numpy(slots["m2"].copy()),
            }
        opt.load_state_dict({"state": state,
                             "param_groups": fresh["param_groups"]})
    return int(manifest["epoch_done"]), int(manifest["global_step"])
