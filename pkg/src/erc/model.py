"""Transformer encoder with a linear classifier on the ``<s>`` position.

Checkpoint layout (``*.ckpt``)::

    bytes 0-7    magic  b"ERCCKPT1"
    bytes 8-15   header length H, unsigned little-endian
    bytes 16..   UTF-8 JSON header of length H:
                 {"config": ModelConfig, "meta": {...},
                  "tensors": {name: {"dtype", "shape", "offset", "nbytes"}}}
    remainder    raw little-endian tensor data; offsets are relative to
                 the end of the header
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from erc.errors import ConfigError, DataError, NumericError

MAGIC = b"ERCCKPT1"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_classes: int
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 4
    d_ff: int = 512
    max_positions: int = 512
    dropout: float = 0.1
    pad_id: int = 1

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if min(self.vocab_size, self.n_classes, self.d_model, self.n_layers, self.d_ff, self.max_positions) < 1:
            raise ConfigError("model sizes must be positive")
        if self.n_classes < 2:
            raise ConfigError("a classifier needs at least two classes")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"model config: {exc}") from None


class SelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.head_dim
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model)
        self.out = nn.Linear(cfg.d_model, cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, n, d = x.shape
        q, k, v = self.qkv(x).view(b, n, 3, self.n_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        # masked_fill rather than an additive -inf keeps fully padded rows finite (uniform).
        scores = scores.masked_fill(~key_mask[:, None, None, :], torch.finfo(scores.dtype).min)
        attn = scores.softmax(dim=-1)
        ctx = (self.drop(attn) @ v).transpose(1, 2).reshape(b, n, d)
        return self.out(ctx), attn


class EncoderLayer(nn.Module):
    """Pre-norm block: x + attn(ln(x)), then x + ffn(ln(x))."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = SelfAttention(cfg)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ff = nn.Sequential(nn.Linear(cfg.d_model, cfg.d_ff), nn.GELU(), nn.Linear(cfg.d_ff, cfg.d_model))
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, key_mask):
        h, attn = self.attn(self.ln1(x), key_mask)
        x = x + self.drop(h)
        x = x + self.drop(self.ff(self.ln2(x)))
        return x, attn


class EncoderClassifier(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.tok = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos = nn.Embedding(cfg.max_positions, cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_layers))
        self.ln = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.n_classes)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor | None = None, collect_attention: bool = False):
        """Return logits ``[B, C]`` and, if asked, attention ``[B, layers, heads, L, L]``."""
        if ids.shape[1] > self.config.max_positions:
            raise DataError(f"sequence of {ids.shape[1]} tokens exceeds max_positions {self.config.max_positions}")
        if mask is None:
            mask = torch.ones_like(ids, dtype=torch.bool)
        positions = torch.arange(ids.shape[1], device=ids.device)
        x = self.drop(self.tok(ids) + self.pos(positions)[None])
        maps = []
        for layer in self.layers:
            x, attn = layer(x, mask)
            if collect_attention:
                maps.append(attn)
        logits = self.head(self.ln(x[:, 0]))
        if collect_attention:
            return logits, torch.stack(maps, dim=1)
        return logits

    def decay_parameters(self) -> list[tuple[str, nn.Parameter]]:
        """Parameters under L2: every weight matrix and embedding; no biases or norm gains."""
        return [(n, p) for n, p in self.named_parameters() if p.ndim >= 2]

    def no_decay_parameters(self) -> list[tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if p.ndim < 2]


def init_model(cfg: ModelConfig, seed: int) -> EncoderClassifier:
    """Truncated-normal (std 0.02, cut at 2 std) weights, zero biases, unit norm gains."""
    gen = torch.Generator().manual_seed(seed)
    model = EncoderClassifier(cfg)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.ndim >= 2:
                nn.init.trunc_normal_(p, std=0.02, a=-0.04, b=0.04, generator=gen)
            elif name.endswith("weight"):
                p.fill_(1.0)
            else:
                p.zero_()
    return model


def l2_norm_sq(model: EncoderClassifier) -> torch.Tensor:
    return sum((p * p).sum() for _, p in model.decay_parameters())


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int) -> tuple[torch.Tensor, torch.Tensor]:
    n = max((len(s) for s in seqs), default=0)
    ids = torch.full((len(seqs), max(n, 1)), pad_id, dtype=torch.long)
    mask = torch.zeros(ids.shape, dtype=torch.bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
        mask[i, : len(s)] = True
    return ids, mask


def _check_ids(model: EncoderClassifier, ids: torch.Tensor) -> None:
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= model.config.vocab_size):
        raise DataError(f"token ids must lie in [0, {model.config.vocab_size})")


@torch.no_grad()
def forward(model: EncoderClassifier, ids: Sequence[int], collect_attention: bool = False):
    """Class probabilities for one sequence and optionally its attention ``[layers, heads, L, L]``."""
    t = torch.as_tensor([list(ids)], dtype=torch.long)
    _check_ids(model, t)
    was = model.training
    model.eval()
    try:
        out = model(t, collect_attention=collect_attention)
    finally:
        model.train(was)
    if collect_attention:
        logits, attn = out
        return logits.softmax(-1)[0].double().numpy(), attn[0].double().numpy()
    return out.softmax(-1)[0].double().numpy(), None


@torch.no_grad()
def forward_batch(model: EncoderClassifier, ids: torch.Tensor, mask: torch.Tensor) -> np.ndarray:
    """Probabilities ``[B, C]`` for a padded batch. Rows with an all-false mask get a defined, unused output."""
    if ids.shape != mask.shape:
        raise DataError(f"ids shape {tuple(ids.shape)} does not match mask shape {tuple(mask.shape)}")
    _check_ids(model, ids)
    was = model.training
    model.eval()
    try:
        logits = model(ids, mask.bool())
    finally:
        model.train(was)
    return logits.softmax(-1).double().numpy()


def predict(model: EncoderClassifier, seqs: Sequence[Sequence[int]], batch_size: int = 32) -> np.ndarray:
    """Probabilities for many sequences, batched by length to limit padding."""
    order = sorted(range(len(seqs)), key=lambda i: len(seqs[i]))
    probs = np.zeros((len(seqs), model.config.n_classes))
    for start in range(0, len(order), batch_size):
        chunk = order[start : start + batch_size]
        ids, mask = pad_batch([seqs[i] for i in chunk], model.config.pad_id)
        probs[chunk] = forward_batch(model, ids, mask)
    return probs


def loss_and_grad(
    model: EncoderClassifier,
    ids: torch.Tensor,
    mask: torch.Tensor,
    labels: torch.Tensor,
    l2_rate: float = 0.0,
    l2_in_loss: bool = True,
) -> tuple[float, dict[str, torch.Tensor]]:
    """Mean cross entropy, plus ``l2_rate / 2 * ||w||^2`` when ``l2_in_loss``, and its gradient.

    Gradients are also left in ``p.grad`` for the optimizer.
    """
    model.zero_grad(set_to_none=True)
    loss = compute_loss(model, ids, mask, labels, l2_rate if l2_in_loss else 0.0)
    loss.backward()
    grads = {n: (p.grad if p.grad is not None else torch.zeros_like(p)) for n, p in model.named_parameters()}
    return float(loss.detach()), grads


def compute_loss(model, ids, mask, labels, l2_rate: float = 0.0) -> torch.Tensor:
    logits = model(ids, mask)
    loss = F.cross_entropy(logits, labels)
    if l2_rate:
        loss = loss + 0.5 * l2_rate * l2_norm_sq(model)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {loss.item()} (max |logit| {logits.detach().abs().max().item():.3g})")
    return loss


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(model: EncoderClassifier, path: str | Path, meta: dict | None = None) -> None:
    tensors = {}
    blobs = []
    offset = 0
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().contiguous().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        tensors[name] = {"dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"config": model.config.to_dict(), "meta": meta or {}, "tensors": tensors}).encode()
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def read_checkpoint(path: str | Path) -> tuple[EncoderClassifier, dict]:
    """Load a checkpoint; returns the model and its ``meta`` dict."""
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"{path}: checkpoint not found") from None
    if data[:8] != MAGIC:
        raise DataError(f"{path}: not an erc checkpoint")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + n])
    body = memoryview(data)[16 + n :]
    model = EncoderClassifier(ModelConfig.from_dict(header["config"]))
    state = {}
    for name, info in header["tensors"].items():
        raw = body[info["offset"] : info["offset"] + info["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(info["dtype"])).reshape(info["shape"])
        state[name] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    return model, header["meta"]
