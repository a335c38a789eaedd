"""Command-line front end.

Subcommands mirror the pipeline stages: synth, split, train, eval, export,
embed, report. Exit codes: 0 success, 1 usage or configuration error,
2 runtime/numeric failure. Every run directory receives a canonical echo
of the fully merged configuration, so results remain reproducible from
artifacts alone. One command per process; parallelism means running
several processes on disjoint run directories.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import metrics, trainer
from .config import RunConfig
from .data import (SplitPlan, dataset_fingerprint, generate_synthetic,
                   load_dataset, make_subject_folds, save_dataset)
from .errors import (ConfigError, FormatError, IntegrityError, NumericError,
                     PeerDistillError, ValidationError)
from .models import PeerConfig, build_ensemble, build_peer, load_peer, save_peer


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors by default; the contract says 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _overrides(args) -> dict:
    pairs = {
        "train.peer_count": getattr(args, "peers", None),
        "train.epochs": getattr(args, "epochs", None),
        "train.seed": getattr(args, "seed", None),
        "train.per_class": getattr(args, "per_class", None),
        "train.base_lr": getattr(args, "lr", None),
        "train.weight_decay": getattr(args, "weight_decay", None),
        "train.ablate": getattr(args, "ablate", None),
        "peer.kind": getattr(args, "kind", None),
        "paths.dataset": getattr(args, "data", None),
        "paths.split": getattr(args, "split", None),
        "paths.run_dir": getattr(args, "run_dir", None),
        "synth.seed": getattr(args, "synth_seed", None),
        "split.n_folds": getattr(args, "folds", None),
        "split.train_fraction": getattr(args, "train_fraction", None),
        "split.seed": getattr(args, "split_seed", None),
    }
    return {k: v for k, v in pairs.items() if v is not None}


def _load_config(args) -> RunConfig:
    return RunConfig.load(getattr(args, "config", None), _overrides(args))


# ---- subcommands ----------------------------------------------------------- #

def cmd_synth(args) -> int:
    cfg = _load_config(args)
    dataset = generate_synthetic(cfg.synth_config())
    save_dataset(dataset, args.out)
    print(f"wrote {args.out}: {len(dataset)} records, "
          f"{len(dataset.subject_ids)} subjects, task {dataset.task}, "
          f"fingerprint {dataset_fingerprint(dataset)}")
    return 0


def cmd_split(args) -> int:
    cfg = _load_config(args)
    dataset = load_dataset(args.data)
    plan = make_subject_folds(dataset,
                              n_folds=int(cfg.sections["split"]["n_folds"]),
                              train_fraction=float(
                                  cfg.sections["split"]["train_fraction"]),
                              seed=int(cfg.sections["split"]["seed"]))
    Path(args.out).write_text(plan.to_json())
    sizes = [f"{len(f.train_subjects)}/{len(f.test_subjects)}" for f in plan.folds]
    print(f"wrote {args.out}: {len(plan.folds)} folds "
          f"(train/test subjects per fold: {', '.join(sizes)})")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    data_path = cfg.path("dataset")
    run_dir = cfg.path("run_dir")
    if data_path is None or run_dir is None:
        raise ConfigError("train needs paths.dataset and paths.run_dir "
                          "(--data / --run-dir or the config file)")
    dataset = load_dataset(data_path)
    peer_config = cfg.peer_config()
    if (peer_config.n_channels != dataset.n_channels
            or peer_config.n_samples != dataset.n_samples):
        raise ConfigError(
            f"peer geometry ({peer_config.n_channels}, {peer_config.n_samples}) "
            f"does not match dataset ({dataset.n_channels}, {dataset.n_samples}); "
            "set peer.n_channels / peer.n_samples")
    split_path = cfg.path("split")
    if split_path is not None:
        plan = SplitPlan.from_json(Path(split_path).read_text())
    else:
        plan = make_subject_folds(
            dataset, n_folds=int(cfg.sections["split"]["n_folds"]),
            train_fraction=float(cfg.sections["split"]["train_fraction"]),
            seed=int(cfg.sections["split"]["seed"]))
    plan.check_against(dataset)

    root = Path(run_dir)
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.json").write_text(cfg.echo())
    (root / "split.json").write_text(plan.to_json())

    train_config = cfg.train_config(dataset.task).resolved(peer_config.kind)
    print(f"mode={trainer.resolve_mode()} peers={train_config.peer_count} "
          f"epochs={train_config.epochs} kind={peer_config.kind} "
          f"folds={len(plan.folds)} ablate={list(train_config.ablate) or 'none'}")
    result = trainer.run_protocol(dataset, plan, peer_config, train_config,
                                  run_dir=root)
    summary = metrics.aggregate_folds(result.folds)
    ensemble = build_ensemble(peer_config, train_config.peer_count,
                              seed=trainer.derived_seed(train_config.seed, 11, 0))
    compression = metrics.compression_report(
        ensemble, ensemble.peers[result.folds[0].selected_peer])
    results_doc = {"protocol": result.to_dict(), "summary": summary,
                   "compression": compression.to_dict(),
                   "train_config": train_config.to_dict(),
                   "peer_config": peer_config.to_dict()}
    (root / "results.json").write_text(
        json.dumps(results_doc, sort_keys=True, indent=2) + "\n")
    text, payload = metrics.render_report(summary, compression)
    (root / "report.txt").write_text(text)
    (root / "report.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n")
    for fold in result.folds:
        print(f"fold {fold.fold}: peers "
              + " ".join(f"{a:.4f}" for a in fold.peer_accuracies)
              + f" -> deploy peer {fold.selected_peer} "
                f"({fold.selected_accuracy:.4f})")
    print(f"mean held-out accuracy: {result.mean_accuracy:.4f}")
    print(f"artifacts in {root}")
    return 0


def cmd_eval(args) -> int:
    peer = load_peer(args.model)
    dataset = load_dataset(args.data)
    if (peer.config.n_channels != dataset.n_channels
            or peer.config.n_samples != dataset.n_samples):
        raise ConfigError("model geometry does not match dataset")
    stats = trainer.per_class_accuracy(peer, dataset.signals, dataset.labels,
                                       len(dataset.class_names))
    if args.json:
        doc = {"overall": stats["overall"],
               "per_class": {name: stats["per_class"][i]
                             for i, name in enumerate(dataset.class_names)}}
        print(json.dumps(doc, sort_keys=True))
        return 0
    print(f"overall accuracy: {stats['overall']:.4f} over {len(dataset)} records")
    for i, name in enumerate(dataset.class_names):
        print(f"  {name:6s} {stats['per_class'][i]:.4f}")
    return 0


def cmd_export(args) -> int:
    peer = trainer_load_checkpoint_peer(args.checkpoint, args.peer)
    save_peer(peer, args.out, include_heads=args.with_heads)
    kept = "with" if args.with_heads else "without"
    print(f"wrote {args.out} ({kept} projection heads)")
    return 0


def trainer_load_checkpoint_peer(path, peer_index: int):
    """Materialize one peer from a training checkpoint."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(trainer.CHECKPOINT_MAGIC)] != trainer.CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    cursor = len(trainer.CHECKPOINT_MAGIC)
    head_len = int.from_bytes(blob[cursor: cursor + 4], "little")
    manifest = json.loads(blob[cursor + 4: cursor + 4 + head_len])
    payload = blob[cursor + 4 + head_len:]
    if peer_index < 0 or peer_index >= manifest["peer_count"]:
        raise ConfigError(
            f"peer {peer_index} out of range (checkpoint holds "
            f"{manifest['peer_count']})")
    config = PeerConfig.from_dict(manifest["peer_config"])
    peer = build_peer(config)
    flat = np.frombuffer(payload, dtype="<f4")
    named = dict(peer.named_parameters())
    with torch.no_grad():
        for entry in manifest["entries"]:
            if entry["peer"] != peer_index or entry["slot"] != "param":
                continue
            shape = tuple(entry["shape"])
            size = int(np.prod(shape)) if shape else 1
            arr = flat[entry["offset"]: entry["offset"] + size].reshape(shape)
            named[entry["name"]].copy_(torch.from_numpy(arr.copy()))
    peer.eval()
    return peer


def cmd_embed(args) -> int:
    peer = load_peer(args.model)
    dataset = load_dataset(args.data)
    indices = None
    if args.subjects:
        wanted = set(args.subjects.split(","))
        missing = wanted - set(dataset.subjects)
        if missing:
            raise ConfigError(f"subjects not in dataset: {sorted(missing)}")
        indices = [i for i, s in enumerate(dataset.subjects) if s in wanted]
    rows = metrics.export_embeddings(peer, dataset, args.out,
                                     fold_id=args.fold, peer_index=args.peer,
                                     indices=indices)
    print(f"wrote {args.out}: {rows} embedding rows "
          f"({peer.config.embed_region_dim}+{peer.config.embed_channel_dim} dims)")
    return 0


def cmd_report(args) -> int:
    root = Path(args.run_dir)
    results_path = root / "results.json"
    if not results_path.exists():
        raise ConfigError(f"no results.json under {root}; run train first")
    doc = json.loads(results_path.read_text())
    compression = metrics.CompressionReport(**doc["compression"])
    ablations = doc.get("ablations")
    text, payload = metrics.render_report(doc["summary"], compression, ablations)
    (root / "report.txt").write_text(text)
    (root / "report.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n")
    print(text, end="")
    return 0


# ---- wiring ---------------------------------------------------------------- #

def build_parser() -> _Parser:
    parser = _Parser(prog="peerdistill",
                     description="Cross-subject fNIRS emotion decoding via "
                                 "jointly trained peer networks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="generate a synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--synth-seed", dest="synth_seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="draw subject-held-out folds")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int)
    p.add_argument("--train-fraction", dest="train_fraction", type=float)
    p.add_argument("--split-seed", dest="split_seed", type=int)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="run the full fold protocol")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--split")
    p.add_argument("--run-dir", dest="run_dir")
    p.add_argument("--peers", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--per-class", dest="per_class", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--kind", choices=("cnn_lstm", "transformer"))
    p.add_argument("--ablate", action="append",
                   help="no-kl | no-region-contrast | no-channel-contrast | "
                        "baseline (repeatable)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-class accuracy of a model file")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="extract one peer from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--peer", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--with-heads", dest="with_heads", action="store_true")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("embed", help="dump pre-projection embeddings")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--peer", type=int, default=0)
    p.add_argument("--subjects", help="comma-separated subject filter")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("report", help="re-render reports from stored results")
    p.add_argument("--run-dir", dest="run_dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, FormatError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericError, IntegrityError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    except (OSError, PeerDistillError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
