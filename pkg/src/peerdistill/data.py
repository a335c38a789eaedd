"""Dataset plumbing: container I/O, subject-wise splits, balanced batches,
layout views and the synthetic generator.

A recording is a float32 block of shape [2][n][T]: chromophore (HbO first,
then HbR) x channel x time. Records live in a single flat binary container
with a line-oriented text header, so conversion from any acquisition format
stays a ~20 line external script.
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ValidationError

log = logging.getLogger(__name__)

CLASS_NAMES = ("HAPV", "HANV", "LAPV", "LANV")
TASKS = ("Empe", "Afim")

DATASET_MAGIC = "peerdistill-dataset"
DATASET_VERSION = 1


@dataclass
class FnirsRecord:
    """One trial: subject, task, label index and the [2][n][T] signal."""

    subject_id: str
    task: str
    label: int
    signal: np.ndarray
    sample_rate_hz: float


class FnirsDataset:
    """In-memory corpus backed by one contiguous float32 array.

    signals : float32 [R, 2, n, T]
    labels  : int64 [R], values in [0, len(class_names))
    subjects: list of R subject ids, aligned with records
    """

    def __init__(self, signals, labels, subjects, task, sample_rate_hz,
                 class_names=CLASS_NAMES):
        signals = np.ascontiguousarray(signals, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
        subjects = list(subjects)
        if signals.ndim != 4 or signals.shape[1] != 2:
            raise ValidationError(
                f"signals must be [R, 2, n, T], got shape {signals.shape}")
        if signals.shape[0] == 0:
            raise ValidationError("empty dataset: zero records")
        if not (signals.shape[0] == labels.shape[0] == len(subjects)):
            raise ValidationError(
                "records misaligned: %d signals, %d labels, %d subjects"
                % (signals.shape[0], labels.shape[0], len(subjects)))
        if task not in TASKS:
            raise ValidationError(f"unknown task {task!r}, expected one of {TASKS}")
        if not np.isfinite(signals).all():
            raise ValidationError("non-finite sample values in dataset")
        if labels.min() < 0 or labels.max() >= len(class_names):
            raise ValidationError(
                f"label out of range for {len(class_names)} classes")
        if not sample_rate_hz > 0:
            raise ValidationError("sample_rate_hz must be positive")
        self.signals = signals
        self.labels = labels
        self.subjects = subjects
        self.task = task
        self.sample_rate_hz = float(sample_rate_hz)
        self.class_names = tuple(class_names)

    # -- shape accessors ----------------------------------------------- #

    @property
    def n_channels(self) -> int:
        return self.signals.shape[2]

    @property
    def n_samples(self) -> int:
        return self.signals.shape[3]

    @property
    def subject_ids(self) -> list[str]:
        """Distinct subject ids in first-appearance order."""
        seen: dict[str, None] = {}
        for s in self.subjects:
            seen.setdefault(s)
        return list(seen)

    def __len__(self) -> int:
        return self.signals.shape[0]

    def record(self, i: int) -> FnirsRecord:
        return FnirsRecord(self.subjects[i], self.task, int(self.labels[i]),
                           self.signals[i], self.sample_rate_hz)

    def __iter__(self):
        for i in range(len(self)):
            yield self.record(i)

    def subset(self, mask_or_indices) -> "FnirsDataset":
        idx = np.asarray(mask_or_indices)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return FnirsDataset(self.signals[idx], self.labels[idx],
                            [self.subjects[i] for i in idx],
                            self.task, self.sample_rate_hz, self.class_names)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=len(self.class_names))


# ---- container I/O ------------------------------------------------------ #

_HEADER_END = b"\nend_header\n"


def save_dataset(dataset: FnirsDataset, path) -> None:
    """Write the container: text header, then raw little-endian float32
    payload, record-major, [chromophore][channel][time] within a record."""
    header = [
        DATASET_MAGIC,
        f"version: {DATASET_VERSION}",
        f"task: {dataset.task}",
        f"n: {dataset.n_channels}",
        f"t: {dataset.n_samples}",
        f"sample_rate_hz: {dataset.sample_rate_hz!r}",
        f"record_count: {len(dataset)}",
        "class_names: " + ",".join(dataset.class_names),
        "subjects: " + ",".join(dataset.subjects),
        "labels: " + ",".join(str(int(v)) for v in dataset.labels),
        "end_header",
    ]
    payload = dataset.signals.astype("<f4", copy=False).tobytes()
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode())
        fh.write(payload)


def _parse_header(text: str) -> dict:
    lines = text.split("\n")
    if not lines or lines[0] != DATASET_MAGIC:
        raise FormatError(f"bad magic line, expected {DATASET_MAGIC!r}")
    fields = {}
    for ln in lines[1:]:
        if not ln:
            continue
        if ":" not in ln:
            raise FormatError(f"malformed header line {ln!r}")
        key, _, val = ln.partition(":")
        fields[key.strip()] = val.strip()
    required = ("version", "task", "n", "t", "sample_rate_hz",
                "record_count", "class_names", "subjects", "labels")
    for key in required:
        if key not in fields:
            raise FormatError(f"header missing field {key!r}")
    return fields


def load_dataset(path) -> FnirsDataset:
    """Parse the container and validate every documented invariant."""
    with open(path, "rb") as fh:
        blob = fh.read()
    cut = blob.find(_HEADER_END)
    if cut < 0:
        raise FormatError("no end_header marker; not a dataset container")
    try:
        head = blob[:cut].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"header is not utf-8: {exc}") from None
    fields = _parse_header(head)
    try:
        version = int(fields["version"])
        n = int(fields["n"])
        t = int(fields["t"])
        sr = float(fields["sample_rate_hz"])
        count = int(fields["record_count"])
    except ValueError as exc:
        raise FormatError(f"unparseable numeric header field: {exc}") from None
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported container version {version}")
    class_names = tuple(fields["class_names"].split(","))
    subjects = fields["subjects"].split(",") if fields["subjects"] else []
    try:
        labels = [int(v) for v in fields["labels"].split(",")] if fields["labels"] else []
    except ValueError as exc:
        raise FormatError(f"unparseable label: {exc}") from None
    if count == 0:
        raise ValidationError("empty dataset: zero records")
    if len(subjects) != count or len(labels) != count:
        raise ValidationError(
            "header inconsistent: record_count=%d but %d subjects, %d labels"
            % (count, len(subjects), len(labels)))
    payload = blob[cut + len(_HEADER_END):]
    expect = count * 2 * n * t * 4
    if len(payload) != expect:
        raise ValidationError(
            "payload is %d bytes, expected %d; record shapes do not match the header"
            % (len(payload), expect))
    # copy: frombuffer views are read-only, downstream tensors need writable
    signals = np.frombuffer(payload, dtype="<f4").reshape(count, 2, n, t).copy()
    return FnirsDataset(signals, labels, subjects, fields["task"], sr, class_names)


# ---- subject-wise splits ------------------------------------------------- #

@dataclass
class Fold:
    train_subjects: tuple[str, ...]
    test_subjects: tuple[str, ...]


@dataclass
class SplitPlan:
    """A list of independently drawn train/test subject partitions."""

    folds: list[Fold]
    seed: int
    train_fraction: float = 0.8

    def to_json(self) -> str:
        doc = {
            "kind": "subject-split",
            "seed": self.seed,
            "train_fraction": self.train_fraction,
            "folds": [
                {"train_subjects": list(f.train_subjects),
                 "test_subjects": list(f.test_subjects)}
                for f in self.folds
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SplitPlan":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"split plan is not valid JSON: {exc}") from None
        if not isinstance(doc, dict) or doc.get("kind") != "subject-split":
            raise FormatError("not a subject-split document")
        try:
            folds = [Fold(tuple(f["train_subjects"]), tuple(f["test_subjects"]))
                     for f in doc["folds"]]
            plan = cls(folds, int(doc["seed"]), float(doc["train_fraction"]))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"split plan missing field: {exc}") from None
        plan.check()
        return plan

    def check(self) -> None:
        if not self.folds:
            raise ValidationError("split plan has no folds")
        for i, f in enumerate(self.folds):
            overlap = set(f.train_subjects) & set(f.test_subjects)
            if overlap:
                raise ValidationError(
                    f"fold {i + 1}: subjects {sorted(overlap)} appear on both sides")
            if not f.train_subjects or not f.test_subjects:
                raise ValidationError(f"fold {i + 1}: empty side")

    def check_against(self, dataset: FnirsDataset) -> None:
        """Leakage guard, run before any training touches the data."""
        self.check()
        known = set(dataset.subjects)
        for i, f in enumerate(self.folds):
            missing = (set(f.train_subjects) | set(f.test_subjects)) - known
            if missing:
                raise ValidationError(
                    f"fold {i + 1}: subjects {sorted(missing)} not in dataset")


def make_subject_folds(dataset: FnirsDataset, n_folds: int = 5,
                       train_fraction: float = 0.8, seed: int = 0) -> SplitPlan:
    """Draw n_folds independent subject-level train/test partitions.

    Each fold is its own seeded draw over the full subject list (folds are
    not a disjoint rotation). Test size = round((1 - fraction) * S), clamped
    so both sides stay nonempty.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValidationError("train_fraction must be in (0, 1)")
    if n_folds < 1:
        raise ValidationError("n_folds must be >= 1")
    subjects = sorted(set(dataset.subjects))
    if len(subjects) < 2:
        raise ValidationError("need at least 2 subjects to split")
    n_test = int(round((1.0 - train_fraction) * len(subjects)))
    n_test = min(max(n_test, 1), len(subjects) - 1)
    folds = []
    for k in range(n_folds):
        rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
        order = rng.permutation(len(subjects))
        test = tuple(sorted(subjects[i] for i in order[:n_test]))
        train = tuple(sorted(subjects[i] for i in order[n_test:]))
        folds.append(Fold(train, test))
    plan = SplitPlan(folds, seed, train_fraction)
    plan.check_against(dataset)
    return plan


# ---- class-balanced batch plans ------------------------------------------ #

@dataclass
class BatchPlan:
    """Fixed batch composition for one epoch: per_class records from each
    class per batch, surplus tail dropped."""

    batches: list[list[int]]
    per_class: int
    class_count: int

    @property
    def batch_size(self) -> int:
        return self.per_class * self.class_count

    def to_json(self) -> str:
        doc = {"kind": "batch-plan", "per_class": self.per_class,
               "class_count": self.class_count, "batches": self.batches}
        return json.dumps(doc, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "BatchPlan":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"batch plan is not valid JSON: {exc}") from None
        if not isinstance(doc, dict) or doc.get("kind") != "batch-plan":
            raise FormatError("not a batch-plan document")
        return cls([list(b) for b in doc["batches"]],
                   int(doc["per_class"]), int(doc["class_count"]))


def plan_balanced_batches(labels, per_class: int = 16, seed: int = 0,
                          class_count: int | None = None) -> BatchPlan:
    """Shuffle within each class, then deal per_class indices per class into
    min_k floor(count_k / per_class) batches. Every class must afford at
    least one full quota."""
    labels = np.asarray(labels, dtype=np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1 if labels.size else 0
    if per_class < 1:
        raise ValidationError("per_class must be >= 1")
    counts = np.bincount(labels, minlength=class_count)
    if (counts < per_class).any():
        short = [int(c) for c in np.flatnonzero(counts < per_class)]
        raise ValidationError(
            f"classes {short} have fewer than per_class={per_class} records "
            f"(counts {counts.tolist()})")
    n_batches = int((counts // per_class).min())
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    pools = []
    for c in range(class_count):
        idx = np.flatnonzero(labels == c)
        pools.append(idx[rng.permutation(idx.size)])
    batches = []
    for b in range(n_batches):
        rows = [pool[b * per_class:(b + 1) * per_class] for pool in pools]
        batch = np.concatenate(rows)
        batches.append([int(i) for i in batch[rng.permutation(batch.size)]])
    dropped = int(labels.size - n_batches * per_class * class_count)
    if dropped:
        log.debug("batch plan drops %d tail records", dropped)
    return BatchPlan(batches, per_class, class_count)


# ---- layout views --------------------------------------------------------- #
# All views accept arrays shaped (..., 2, n, T); leading batch dims pass
# through. Pure reshapes/transposes, bijective on the sample values.

def flatten_chromophores(signal: np.ndarray) -> np.ndarray:
    """[.., 2, n, T] -> [.., 2n, T]; HbO rows first, then HbR."""
    a = np.asarray(signal)
    if a.ndim < 3 or a.shape[-3] != 2:
        raise ValidationError(f"expected (..., 2, n, T), got {a.shape}")
    return a.reshape(a.shape[:-3] + (2 * a.shape[-2], a.shape[-1]))


def split_chromophores(stacked: np.ndarray) -> np.ndarray:
    """Inverse of flatten_chromophores: [.., 2n, T] -> [.., 2, n, T]."""
    a = np.asarray(stacked)
    if a.ndim < 2 or a.shape[-2] % 2:
        raise ValidationError(f"expected (..., 2n, T), got {a.shape}")
    return a.reshape(a.shape[:-2] + (2, a.shape[-2] // 2, a.shape[-1]))


def region_tokens(signal: np.ndarray) -> np.ndarray:
    """[.., 2, n, T] -> [.., n, 2T]: one token per channel, HbO half then
    HbR half along the feature axis."""
    a = np.asarray(signal)
    if a.ndim < 3 or a.shape[-3] != 2:
        raise ValidationError(f"expected (..., 2, n, T), got {a.shape}")
    moved = np.moveaxis(a, -3, -2)  # (..., n, 2, T)
    return moved.reshape(a.shape[:-3] + (a.shape[-2], 2 * a.shape[-1]))


def time_tokens(signal: np.ndarray) -> np.ndarray:
    """[.., 2, n, T] -> [.., T, 2n]: one token per time frame; feature order
    matches flatten_chromophores rows."""
    a = np.asarray(signal)
    if a.ndim < 3 or a.shape[-3] != 2:
        raise ValidationError(f"expected (..., 2, n, T), got {a.shape}")
    flat = flatten_chromophores(a)  # (..., 2n, T)
    return np.swapaxes(flat, -1, -2)


# ---- synthetic generator -------------------------------------------------- #

@dataclass
class SynthConfig:
    """Knobs for the synthetic corpus. Shapes default to the reference
    recording geometry; e2e fixtures shrink t for CPU wall-time budgets."""

    n_subjects: int = 10
    trials_per_class_per_subject: int = 20
    n: int = 24
    t: int = 600
    class_separation: float = 1.0
    subject_shift: float = 0.1
    noise_std: float = 0.1
    seed: int = 0

    def check(self) -> None:
        if self.n_subjects < 1 or self.trials_per_class_per_subject < 1:
            raise ValidationError("synthetic corpus must have subjects and trials")
        if self.n < 1 or self.t < 2:
            raise ValidationError("bad synthetic shape")
        for name in ("class_separation", "subject_shift", "noise_std"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")


# Synthetic containers are stamped task=Empe at 50 Hz; the generator is a
# shape/protocol stand-in, not a physiological model.
_SYNTH_TASK = "Empe"
_SYNTH_RATE_HZ = 50.0
_HBR_SCALE = -0.4  # deoxy response mirrors oxy with reduced amplitude


def _bump(t_axis: np.ndarray, peak: float, sharpness: float = 3.0) -> np.ndarray:
    """Smooth positive bump peaking at `peak` with unit amplitude."""
    x = np.clip(t_axis / peak, 1e-9, None)
    return (x ** sharpness) * np.exp(sharpness * (1.0 - x))


def generate_synthetic(config: SynthConfig) -> FnirsDataset:
    """Bit-reproducible synthetic corpus.

    Class templates share a base response and differ by a class-specific
    bump (latency and amplitude scale with the class index, spatial gain
    pattern drawn per class). Each subject applies a scalar gain and offset
    scaled by subject_shift; trials add white noise at noise_std. Labels are
    perfectly balanced per subject.
    """
    config.check()
    c_count = len(CLASS_NAMES)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed]))
    t_axis = np.arange(config.t, dtype=np.float64)

    chan_gain = rng.uniform(0.5, 1.0, size=config.n)
    base = chan_gain[:, None] * _bump(t_axis, 0.45 * config.t)[None, :]

    comps = []
    for k in range(c_count):
        spatial = rng.uniform(0.3, 1.0, size=config.n)
        wave = _bump(t_axis, (0.30 + 0.12 * k) * config.t) * (1.0 + 0.3 * k)
        comps.append(spatial[:, None] * wave[None, :])

    templates = []
    for k in range(c_count):
        hbo = base + config.class_separation * comps[k]
        tpl = np.stack([hbo, _HBR_SCALE * hbo])  # [2, n, T]
        templates.append(tpl)

    n_rec = config.n_subjects * c_count * config.trials_per_class_per_subject
    signals = np.empty((n_rec, 2, config.n, config.t), dtype=np.float32)
    labels = np.empty(n_rec, dtype=np.int64)
    subjects = []
    width = max(2, len(str(config.n_subjects - 1)))
    row = 0
    for s in range(config.n_subjects):
        sid = f"s{s:0{width}d}"
        gain = 1.0 + config.subject_shift * rng.standard_normal()
        gain = max(gain, 0.1)
        offset = config.subject_shift * rng.standard_normal()
        for k in range(c_count):
            for _ in range(config.trials_per_class_per_subject):
                noise = config.noise_std * rng.standard_normal(
                    (2, config.n, config.t))
                signals[row] = gain * templates[k] + offset + noise
                labels[row] = k
                subjects.append(sid)
                row += 1
    return FnirsDataset(signals, labels, subjects, _SYNTH_TASK, _SYNTH_RATE_HZ)


def dataset_fingerprint(dataset: FnirsDataset) -> str:
    """crc32 over payload and labels; cheap identity check in tests/logs."""
    crc = zlib.crc32(dataset.signals.tobytes())
    crc = zlib.crc32(dataset.labels.tobytes(), crc)
    crc = zlib.crc32(",".join(dataset.subjects).encode(), crc)
    return f"{crc:08x}"
