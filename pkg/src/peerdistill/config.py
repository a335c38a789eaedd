"""Run configuration: one JSON document that mirrors every knob of the
pipeline, validated strictly (unknown keys are refused with their path)
and echoed back into the run directory so a run is reproducible from its
artifacts alone.

CLI flags override file fields; anything still unset falls back to the
reference defaults (cohort-size-dependent epochs/decay, extractor-kind
learning rate, task-dependent distillation temperature).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any

from .data import SynthConfig
from .errors import ConfigError, FormatError
from .losses import LossWeights
from .models import PeerConfig
from .trainer import TrainConfig, normalize_ablations

_SCHEMA: dict[str, dict[str, Any]] = {
    "synth": {
        "n_subjects": 10, "trials_per_class_per_subject": 20, "n": 24,
        "t": 600, "class_separation": 1.0, "subject_shift": 0.1,
        "noise_std": 0.1, "seed": 0,
    },
    "split": {"n_folds": 5, "train_fraction": 0.8, "seed": 0},
    "peer": {
        "kind": "cnn_lstm", "n_channels": 24, "n_samples": 600,
        "class_count": 4, "embed_region_dim": 64, "embed_channel_dim": 64,
        "contrastive_dim": 64, "conv_channels": [32, 16],
        "conv_kernels": [50, 10], "conv_strides": [10, 2],
        "d_model": 32, "n_heads": 4, "n_layers": 1, "ffn_mult": 4,
    },
    "train": {
        "peer_count": 3, "epochs": None, "base_lr": None,
        "adam_beta1": 0.9, "adam_beta2": 0.999, "weight_decay": None,
        "per_class": 16, "seed": 0, "ablate": [],
    },
    "loss": {
        "distill_temperature": None, "contrastive_temperature": 0.1,
        "region_weight": 0.2, "channel_weight": 0.2, "label_smoothing": 0.1,
    },
    "paths": {"dataset": None, "split": None, "run_dir": None},
}

TASK_TEMPERATURE = {"Empe": 2.0, "Afim": 5.0}


def _merge_section(name: str, defaults: dict, given: dict) -> dict:
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(
            f"unknown config key(s) {sorted(name + '.' + k for k in unknown)}")
    out = dict(defaults)
    out.update(given)
    return out


@dataclass
class RunConfig:
    """Fully merged configuration; sections stay plain dicts until the
    typed objects are needed."""

    sections: dict[str, dict]

    @classmethod
    def load(cls, path=None, overrides: dict[str, Any] | None = None) -> "RunConfig":
        """Merge defaults <- file <- dotted overrides ("train.epochs": 20)."""
        doc: dict[str, Any] = {}
        if path is not None:
            try:
                doc = json.loads(open(path).read())
            except OSError as exc:
                raise ConfigError(f"cannot read config file: {exc}") from None
            except json.JSONDecodeError as exc:
                raise FormatError(f"config file is not valid JSON: {exc}") from None
            if not isinstance(doc, dict):
                raise FormatError("config file must hold a JSON object")
        unknown = set(doc) - set(_SCHEMA)
        if unknown:
            raise ConfigError(f"unknown config section(s) {sorted(unknown)}")
        sections = {}
        for name, defaults in _SCHEMA.items():
            given = doc.get(name, {})
            if not isinstance(given, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            sections[name] = _merge_section(name, defaults, given)
        cfg = cls(sections)
        for dotted, value in (overrides or {}).items():
            if value is None:
                continue
            cfg._set(dotted, value)
        cfg.validate()
        return cfg

    def _set(self, dotted: str, value: Any) -> None:
        section, _, key = dotted.partition(".")
        if section not in self.sections or key not in self.sections[section]:
            raise ConfigError(f"unknown config key {dotted!r}")
        self.sections[section][key] = value

    def validate(self) -> None:
        self.synth_config().check()
        self.peer_config().check()
        normalize_ablations(self.sections["train"]["ablate"])
        split = self.sections["split"]
        if not 0.0 < float(split["train_fraction"]) < 1.0:
            raise ConfigError("split.train_fraction must be in (0, 1)")
        if int(split["n_folds"]) < 1:
            raise ConfigError("split.n_folds must be >= 1")
        t = self.sections["loss"]["distill_temperature"]
        if t is not None and float(t) <= 0:
            raise ConfigError("loss.distill_temperature must be > 0")

    # -- typed views ------------------------------------------------------ #

    def synth_config(self) -> SynthConfig:
        return SynthConfig(**self.sections["synth"])

    def peer_config(self) -> PeerConfig:
        doc = dict(self.sections["peer"])
        for key in ("conv_channels", "conv_kernels", "conv_strides"):
            doc[key] = tuple(doc[key])
        return PeerConfig(**doc)

    def loss_weights(self, task: str | None = None) -> LossWeights:
        doc = dict(self.sections["loss"])
        if doc["distill_temperature"] is None:
            if task is None:
                doc["distill_temperature"] = 2.0
            elif task not in TASK_TEMPERATURE:
                raise ConfigError(f"no default temperature for task {task!r}")
            else:
                doc["distill_temperature"] = TASK_TEMPERATURE[task]
        w = LossWeights(**doc)
        w.check()
        return w

    def train_config(self, task: str | None = None) -> TrainConfig:
        doc = dict(self.sections["train"])
        doc["ablate"] = normalize_ablations(doc["ablate"])
        return TrainConfig(weights=self.loss_weights(task), **doc)

    def path(self, key: str):
        return self.sections["paths"][key]

    def echo(self) -> str:
        """Canonical JSON for the run directory; byte-stable across reruns."""
        return json.dumps(self.sections, sort_keys=True, indent=2) + "\n"


def check_no_nan_defaults() -> None:
    """Schema self-check used by tests: every default must instantiate."""
    cfg = RunConfig.load()
    cfg.train_config("Empe").resolved(cfg.peer_config().kind)
    cfg.loss_weights("Afim")
