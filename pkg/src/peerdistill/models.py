"""Peer networks: two extractor families behind one interface.

Every peer produces a region embedding (spatial branch) and a channel
embedding (temporal branch), classifies their concatenation with a single
affine layer, and exposes two linear+l2-normalize projection heads used
only while training. Heads are excluded from inference parameter counts
and can be stripped at export.

cnn_lstm    region: two strided 1-d convolutions over the stacked
            chromophore rows, flattened into an affine map.
            channel: 2-layer LSTM over time frames, last hidden state.
transformer region: channels as tokens (one [2T] row each).
            channel: time frames as tokens (one [2n] row each).
            Each branch: affine token projection, sinusoidal positions,
            post-norm encoder blocks, mean pool, affine to embed width.
"""

from __future__ import annotations

import dataclasses
import json
import math
import zlib
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .data import flatten_chromophores, region_tokens, time_tokens
from .errors import ConfigError, FormatError, IntegrityError, NumericError

VALID_KINDS = ("cnn_lstm", "transformer")

MODEL_MAGIC = b"PDMODEL1"


def conv_out_len(length: int, kernel: int, stride: int) -> int:
    if kernel > length:
        raise ConfigError(
            f"conv kernel {kernel} exceeds input length {length}")
    if stride < 1:
        raise ConfigError("conv stride must be >= 1")
    return (length - kernel) // stride + 1


@dataclass
class PeerConfig:
    """Geometry of one peer. Defaults reproduce the reference setup
    (24 channels, 600 samples, 64-d embeddings)."""

    kind: str = "cnn_lstm"
    n_channels: int = 24
    n_samples: int = 600
    class_count: int = 4
    embed_region_dim: int = 64
    embed_channel_dim: int = 64
    contrastive_dim: int = 64
    # conv stage geometry (region branch of cnn_lstm)
    conv_channels: tuple[int, int] = (32, 16)
    conv_kernels: tuple[int, int] = (50, 10)
    conv_strides: tuple[int, int] = (10, 2)
    # transformer knobs
    d_model: int = 32
    n_heads: int = 4
    n_layers: int = 1
    ffn_mult: int = 4
    init_seed: int = 0

    def check(self) -> None:
        if self.kind not in VALID_KINDS:
            raise ConfigError(f"kind must be one of {VALID_KINDS}, got {self.kind!r}")
        for name in ("n_channels", "n_samples", "class_count", "embed_region_dim",
                     "embed_channel_dim", "contrastive_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.kind == "cnn_lstm":
            self.conv_lengths()  # raises on impossible geometry
        else:
            if self.d_model % self.n_heads:
                raise ConfigError(
                    f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
            if self.n_layers < 1 or self.ffn_mult < 1:
                raise ConfigError("n_layers and ffn_mult must be >= 1")

    def conv_lengths(self) -> tuple[int, int]:
        l1 = conv_out_len(self.n_samples, self.conv_kernels[0], self.conv_strides[0])
        l2 = conv_out_len(l1, self.conv_kernels[1], self.conv_strides[1])
        return l1, l2

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        for key in ("conv_channels", "conv_kernels", "conv_strides"):
            doc[key] = list(doc[key])
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "PeerConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown peer config keys: {sorted(unknown)}")
        kwargs = dict(doc)
        for key in ("conv_channels", "conv_kernels", "conv_strides"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        cfg = cls(**kwargs)
        cfg.check()
        return cfg


class PeerForward(NamedTuple):
    z: torch.Tensor
    e_region: torch.Tensor
    e_channel: torch.Tensor
    v_region: torch.Tensor
    v_channel: torch.Tensor


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Classic fixed position table [length][dim]."""
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    idx = torch.arange(0, dim, 2, dtype=torch.float64)[None, :]
    angle = pos / torch.pow(10000.0, idx / dim)
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle[:, : table[:, 1::2].shape[1]])
    return table.to(dtype)


class EncoderBlock(nn.Module):
    """Post-norm block: self-attention + position-wise feed-forward."""

    def __init__(self, d_model: int, n_heads: int, ffn_mult: int):
        super().__init__()
        self.attn = nn.MultiheadAttention(d_model, n_heads, batch_first=True)
        self.norm1 = nn.LayerNorm(d_model)
        self.ff1 = nn.Linear(d_model, ffn_mult * d_model)
        self.ff2 = nn.Linear(ffn_mult * d_model, d_model)
        self.norm2 = nn.LayerNorm(d_model)

    def forward(self, x):
        # need_weights keeps torch on the plain math path in eval mode too,
        # so train/eval forwards agree bit for bit (there is no dropout)
        a, _ = self.attn(x, x, x, need_weights=True, average_attn_weights=False)
        x = self.norm1(x + a)
        h = self.ff2(F.relu(self.ff1(x)))
        return self.norm2(x + h)


class _TokenBranch(nn.Module):
    """Token projection -> positions -> encoder stack -> mean pool -> affine."""

    def __init__(self, token_width: int, n_tokens: int, out_dim: int,
                 d_model: int, n_heads: int, n_layers: int, ffn_mult: int):
        super().__init__()
        self.proj = nn.Linear(token_width, d_model)
        self.blocks = nn.ModuleList(
            EncoderBlock(d_model, n_heads, ffn_mult) for _ in range(n_layers))
        self.out = nn.Linear(d_model, out_dim)
        self.register_buffer("positions", sinusoidal_positions(n_tokens, d_model),
                             persistent=False)

    def forward(self, tokens):
        x = self.proj(tokens) + self.positions.to(tokens.dtype)
        for blk in self.blocks:
            x = blk(x)
        return self.out(x.mean(dim=1))


class PeerNet(nn.Module):
    """One peer: extractor + classifier + (training-only) projection heads."""

    HEAD_PREFIXES = ("proj_region", "proj_channel")

    def __init__(self, config: PeerConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        config.check()
        self.config = config
        self.heads_loaded = True
        with torch.random.fork_rng():
            torch.manual_seed(config.init_seed)
            self._build(config)
        if dtype != torch.float32:
            self.to(dtype)

    def _build(self, cfg: PeerConfig) -> None:
        width = 2 * cfg.n_channels
        if cfg.kind == "cnn_lstm":
            c1, c2 = cfg.conv_channels
            k1, k2 = cfg.conv_kernels
            s1, s2 = cfg.conv_strides
            _, l2 = cfg.conv_lengths()
            self.conv1 = nn.Conv1d(width, c1, k1, stride=s1)
            self.conv2 = nn.Conv1d(c1, c2, k2, stride=s2)
            self.region_out = nn.Linear(c2 * l2, cfg.embed_region_dim)
            self.lstm = nn.LSTM(width, cfg.embed_channel_dim, num_layers=2,
                                batch_first=True)
        else:
            self.region_branch = _TokenBranch(
                2 * cfg.n_samples, cfg.n_channels, cfg.embed_region_dim,
                cfg.d_model, cfg.n_heads, cfg.n_layers, cfg.ffn_mult)
            self.channel_branch = _TokenBranch(
                width, cfg.n_samples, cfg.embed_channel_dim,
                cfg.d_model, cfg.n_heads, cfg.n_layers, cfg.ffn_mult)
        self.classifier = nn.Linear(cfg.embed_region_dim + cfg.embed_channel_dim,
                                    cfg.class_count)
        self.proj_region = nn.Linear(cfg.embed_region_dim, cfg.contrastive_dim)
        self.proj_channel = nn.Linear(cfg.embed_channel_dim, cfg.contrastive_dim)

    # -- input plumbing -------------------------------------------------- #

    def _dtype(self) -> torch.dtype:
        return self.classifier.weight.dtype

    def prepare_batch(self, signals) -> torch.Tensor | tuple:
        """numpy/torch [B,2,n,T] -> extractor-specific input tensors."""
        a = np.asarray(signals.detach().cpu() if torch.is_tensor(signals) else signals)
        if a.ndim != 4 or a.shape[1] != 2:
            raise NumericError(f"expected input [B,2,n,T], got {a.shape}")
        if not np.isfinite(a).all():
            raise NumericError("non-finite values in input batch")
        cfg = self.config
        if a.shape[2] != cfg.n_channels or a.shape[3] != cfg.n_samples:
            raise NumericError(
                f"input shaped {a.shape[2:]} but peer built for "
                f"({cfg.n_channels}, {cfg.n_samples})")
        dt = self._dtype()
        if cfg.kind == "cnn_lstm":
            return torch.as_tensor(flatten_chromophores(a)).to(dt)
        return (torch.as_tensor(region_tokens(a)).to(dt),
                torch.as_tensor(time_tokens(a)).to(dt))

    # -- forward paths ----------------------------------------------------- #

    def _embed(self, prepared) -> tuple[torch.Tensor, torch.Tensor]:
        if self.config.kind == "cnn_lstm":
            x = prepared  # [B, 2n, T]
            h = F.relu(self.conv1(x))
            h = F.relu(self.conv2(h))
            e_rg = self.region_out(h.flatten(1))
            _, (h_n, _) = self.lstm(x.transpose(1, 2))
            e_ch = h_n[-1]
        else:
            x_rg, x_ch = prepared
            e_rg = self.region_branch(x_rg)
            e_ch = self.channel_branch(x_ch)
        self._finite(e_rg, "region embedding")
        self._finite(e_ch, "channel embedding")
        return e_rg, e_ch

    @staticmethod
    def _finite(t: torch.Tensor, stage: str) -> None:
        if not torch.isfinite(t).all():
            raise NumericError(f"non-finite values at stage: {stage}")

    @staticmethod
    def _unit_rows(v: torch.Tensor, stage: str) -> None:
        # normalize() maps an all-zero row to zeros, not a unit vector; a
        # zero projection row means the embedding numerically collapsed
        with torch.no_grad():
            worst = float((v.norm(dim=1) - 1.0).abs().max())
        if worst > 1e-4:
            raise NumericError(
                f"degenerate row norms at stage: {stage} "
                f"(worst deviation {worst:.2e})")

    def forward_full(self, signals) -> PeerForward:
        """Training path: logits plus both embedding levels and their
        normalized projections."""
        prepared = signals if self._is_prepared(signals) else self.prepare_batch(signals)
        e_rg, e_ch = self._embed(prepared)
        z = self.classifier(torch.cat([e_rg, e_ch], dim=1))
        self._finite(z, "classifier logits")
        v_rg = F.normalize(self.proj_region(e_rg), dim=1, eps=1e-12)
        v_ch = F.normalize(self.proj_channel(e_ch), dim=1, eps=1e-12)
        self._finite(v_rg, "region projection")
        self._finite(v_ch, "channel projection")
        self._unit_rows(v_rg, "region projection")
        self._unit_rows(v_ch, "channel projection")
        return PeerForward(z, e_rg, e_ch, v_rg, v_ch)

    def forward_inference(self, signals) -> torch.Tensor:
        """Deployment path: logits only, projection heads never touched."""
        prepared = signals if self._is_prepared(signals) else self.prepare_batch(signals)
        e_rg, e_ch = self._embed(prepared)
        z = self.classifier(torch.cat([e_rg, e_ch], dim=1))
        self._finite(z, "classifier logits")
        return z

    forward = forward_inference

    def _is_prepared(self, obj) -> bool:
        if self.config.kind == "cnn_lstm":
            return torch.is_tensor(obj) and obj.ndim == 3
        return isinstance(obj, tuple)

    # -- parameter bookkeeping ------------------------------------------- #

    def head_param_names(self) -> set[str]:
        return {name for name, _ in self.named_parameters()
                if name.startswith(self.HEAD_PREFIXES)}

    def param_fingerprint(self) -> str:
        crc = 0
        for _, p in sorted(self.named_parameters()):
            crc = zlib.crc32(p.detach().cpu().numpy().tobytes(), crc)
        return f"{crc:08x}"


def build_peer(config: PeerConfig, dtype: torch.dtype = torch.float32) -> PeerNet:
    return PeerNet(config, dtype=dtype)


def count_params(peer: PeerNet, phase: str = "inference") -> int:
    """Trainable scalar count; 'inference' excludes the projection heads."""
    if phase not in ("inference", "training"):
        raise ConfigError(f"phase must be inference or training, got {phase!r}")
    heads = peer.head_param_names()
    total = 0
    for name, p in peer.named_parameters():
        if phase == "inference" and name in heads:
            continue
        total += p.numel()
    return total


class PeerEnsemble:
    """M peers trained jointly; only one survives to deployment."""

    def __init__(self, peers: list[PeerNet]):
        if len(peers) < 2:
            raise ConfigError("an ensemble needs at least 2 peers for training")
        prints = [p.param_fingerprint() for p in peers]
        if len(set(prints)) != len(prints):
            raise ConfigError("peers must start from pairwise distinct parameters")
        self.peers = peers

    @property
    def config(self) -> PeerConfig:
        return self.peers[0].config

    def __len__(self) -> int:
        return len(self.peers)

    def __iter__(self):
        return iter(self.peers)

    def train(self, mode: bool = True) -> None:
        for p in self.peers:
            p.train(mode)

    def eval(self) -> None:
        self.train(False)

    def count_params(self, phase: str = "training") -> int:
        return sum(count_params(p, phase) for p in self.peers)


def build_ensemble(config: PeerConfig, peer_count: int, seed: int = 0,
                   dtype: torch.dtype = torch.float32) -> PeerEnsemble:
    """Same geometry, per-peer init seeds derived from `seed`."""
    if peer_count < 2:
        raise ConfigError("peer_count must be >= 2")
    peers = []
    for m in range(peer_count):
        child = int(np.random.SeedSequence([seed, m]).generate_state(1)[0])
        peers.append(build_peer(dataclasses.replace(config, init_seed=child), dtype))
    return PeerEnsemble(peers)


def select_best_peer(accuracies) -> int:
    """Index of the highest held-out accuracy; first winner on ties."""
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.size == 0:
        raise ConfigError("no accuracies to select from")
    if not np.isfinite(acc).all():
        raise NumericError("non-finite accuracy in selection")
    return int(acc.argmax())


# ---- model files ---------------------------------------------------------- #

def save_peer(peer: PeerNet, path, include_heads: bool = False) -> None:
    """Versioned binary: magic, JSON manifest, little-endian float32 payload
    guarded by crc32. Heads are dropped unless include_heads."""
    heads = peer.head_param_names()
    entries = []
    chunks = []
    offset = 0
    for name, p in peer.named_parameters():
        if not include_heads and name in heads:
            continue
        arr = p.detach().cpu().numpy().astype("<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    payload = b"".join(chunks)
    manifest = {
        "format_version": 1,
        "config": peer.config.to_dict(),
        "include_heads": bool(include_heads),
        "entries": entries,
        "payload_floats": offset,
        "payload_crc32": zlib.crc32(payload),
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(len(head).to_bytes(4, "little"))
        fh.write(head)
        fh.write(payload)


def load_peer(path) -> PeerNet:
    """Rebuild a peer from a model file; inference parameters restored
    exactly, heads restored only if the file includes them."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise FormatError("not a peer model file (bad magic)")
    cursor = len(MODEL_MAGIC)
    head_len = int.from_bytes(blob[cursor: cursor + 4], "little")
    cursor += 4
    try:
        manifest = json.loads(blob[cursor: cursor + head_len])
    except json.JSONDecodeError as exc:
        raise FormatError(f"model manifest is not valid JSON: {exc}") from None
    cursor += head_len
    payload = blob[cursor:]
    if manifest.get("format_version") != 1:
        raise FormatError("unsupported model format version")
    if len(payload) != manifest["payload_floats"] * 4:
        raise IntegrityError("model payload truncated")
    if zlib.crc32(payload) != manifest["payload_crc32"]:
        raise IntegrityError("model payload fails crc32 check")
    config = PeerConfig.from_dict(manifest["config"])
    peer = build_peer(config)
    flat = np.frombuffer(payload, dtype="<f4")
    named = dict(peer.named_parameters())
    seen = set()
    with torch.no_grad():
        for entry in manifest["entries"]:
            name = entry["name"]
            if name not in named:
                raise FormatError(f"manifest names unknown parameter {name!r}")
            shape = tuple(entry["shape"])
            size = int(np.prod(shape)) if shape else 1
            arr = flat[entry["offset"]: entry["offset"] + size].reshape(shape)
            named[name].copy_(torch.from_numpy(arr.copy()))
            seen.add(name)
    required = set(named) - peer.head_param_names()
    missing = required - seen
    if missing:
        raise FormatError(f"model file missing parameters: {sorted(missing)}")
    peer.heads_loaded = bool(manifest["include_heads"])
    peer.eval()
    return peer
