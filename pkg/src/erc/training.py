"""Fine-tuning protocol: AdamW with linear warmup/decay, per-epoch validation and best-f1 selection."""

from __future__ import annotations

import copy
import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from erc.errors import ConfigError, DataError, NumericError
from erc.metrics import weighted_f1
from erc.model import EncoderClassifier, ModelConfig, init_model, loss_and_grad, pad_batch, predict, save_checkpoint
from erc.seqbuilder import PackedSequence

logger = logging.getLogger(__name__)

L2_MODES = ("decoupled", "in_loss")


@dataclass
class TrainConfig:
    epochs: int = 5
    peak_lr: float = 1e-4
    batch_size: int = 8
    l2_rate: float = 0.01
    l2_mode: str = "decoupled"
    warmup_fraction: float = 0.2
    seed: int = 0
    clip_norm: float | None = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    eval_batch_size: int = 64

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.l2_mode not in L2_MODES:
            raise ConfigError(f"l2_mode must be one of {L2_MODES}, got {self.l2_mode!r}")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must lie strictly between 0 and 1")
        if self.epochs < 0 or self.batch_size < 1 or self.peak_lr < 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and peak_lr >= 0 are required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"train config: {exc}") from None


@dataclass
class RunResult:
    seed: int
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_f1: list[float] = field(default_factory=list)
    initial_val_f1: float = 0.0
    selected_epoch: int = 0
    best_val_f1: float = 0.0
    test_f1: float | None = None
    steps: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


# -- schedule and optimizer ---------------------------------------------------


def lr_at(step: int, total_steps: int, peak_lr: float, warmup_fraction: float = 0.2) -> float:
    """Linear ramp 0 -> peak over the first ceil(warmup_fraction * total) steps, then linear decay to 0."""
    if total_steps <= 0:
        raise ConfigError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    warmup = math.ceil(warmup_fraction * total_steps)
    if step >= total_steps:
        return 0.0
    if step <= warmup:
        return peak_lr * step / warmup
    return peak_lr * (total_steps - step) / (total_steps - warmup)


class AdamW(torch.optim.Optimizer):
    """Adam with decoupled weight decay; ``weight_decay=0`` gives plain Adam."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        super().__init__(params, dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay))

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            lr, (beta1, beta2), eps, wd = group["lr"], group["betas"], group["eps"], group["weight_decay"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["m"] = torch.zeros_like(p)
                    state["v"] = torch.zeros_like(p)
                state["step"] += 1
                t = state["step"]
                m, v = state["m"], state["v"]
                if wd:
                    p.mul_(1 - lr * wd)
                m.mul_(beta1).add_(p.grad, alpha=1 - beta1)
                v.mul_(beta2).addcmul_(p.grad, p.grad, value=1 - beta2)
                denom = (v.sqrt() / math.sqrt(1 - beta2**t)).add_(eps)
                p.addcdiv_(m, denom, value=-lr / (1 - beta1**t))
        return loss


def make_optimizer(model: EncoderClassifier, cfg: TrainConfig) -> AdamW:
    wd = cfg.l2_rate if cfg.l2_mode == "decoupled" else 0.0
    groups = [
        {"params": [p for _, p in model.decay_parameters()], "weight_decay": wd},
        {"params": [p for _, p in model.no_decay_parameters()], "weight_decay": 0.0},
    ]
    return AdamW(groups, lr=0.0, betas=cfg.betas, eps=cfg.eps)


# -- batching and evaluation ---------------------------------------------------


def make_batches(lengths: Sequence[int], batch_size: int, rng: random.Random) -> list[list[int]]:
    """Length-bucketed batches: shuffle, stable-sort by length, chunk, shuffle chunk order."""
    order = list(range(len(lengths)))
    rng.shuffle(order)
    order.sort(key=lambda i: lengths[i])
    batches = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    rng.shuffle(batches)
    return batches


def _tensors(seqs: Sequence[PackedSequence], idx: Sequence[int], pad_id: int):
    ids, mask = pad_batch([seqs[i].ids for i in idx], pad_id)
    labels = torch.tensor([seqs[i].label.class_index for i in idx], dtype=torch.long)
    return ids, mask, labels


def score(model: EncoderClassifier, seqs: Sequence[PackedSequence], batch_size: int = 64) -> tuple[float, float]:
    """(weighted f1, mean cross entropy) of ``model`` on ``seqs``."""
    probs = predict(model, [s.ids for s in seqs], batch_size)
    gold = np.array([s.label.class_index for s in seqs])
    ce = float(-np.log(np.clip(probs[np.arange(len(gold)), gold], 1e-300, None)).mean())
    return weighted_f1(probs.argmax(1), gold, model.config.n_classes), ce


# -- training ------------------------------------------------------------------


def _set_lr(opt: AdamW, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


def train(
    model_config: ModelConfig,
    train_seqs: Sequence[PackedSequence],
    val_seqs: Sequence[PackedSequence],
    cfg: TrainConfig,
    test_seqs: Sequence[PackedSequence] | None = None,
    out_dir: str | Path | None = None,
) -> tuple[RunResult, EncoderClassifier]:
    """Train for ``cfg.epochs`` epochs and return the result with the best-validation-f1 model.

    With ``out_dir`` the run writes ``config.json``, ``metrics.jsonl``,
    ``result.json`` and ``best.ckpt`` (``last_finite.ckpt`` on divergence).
    """
    if not train_seqs or not val_seqs:
        raise DataError("training needs nonempty train and validation splits")
    labels = [s.label.class_index for s in (*train_seqs, *val_seqs)]
    if max(labels) >= model_config.n_classes:
        raise DataError(f"label {max(labels)} outside the model's {model_config.n_classes} classes")

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        snapshot = {"model": model_config.to_dict(), "train": cfg.to_dict()}
        (out / "config.json").write_text(json.dumps(snapshot, indent=2), encoding="utf-8")
        metrics_fh = (out / "metrics.jsonl").open("w", encoding="utf-8")
    else:
        metrics_fh = None

    torch.manual_seed(cfg.seed)
    rng = random.Random(cfg.seed)
    model = init_model(model_config, cfg.seed)
    opt = make_optimizer(model, cfg)
    pad = model_config.pad_id
    lengths = [len(s) for s in train_seqs]
    steps_per_epoch = math.ceil(len(train_seqs) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    in_loss = cfg.l2_mode == "in_loss"

    result = RunResult(seed=cfg.seed)
    result.initial_val_f1, _ = score(model, val_seqs, cfg.eval_batch_size)
    result.best_val_f1 = result.initial_val_f1
    best_state = copy.deepcopy(model.state_dict())
    step = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            losses = []
            for idx in make_batches(lengths, cfg.batch_size, rng):
                _set_lr(opt, lr_at(step, total, cfg.peak_lr, cfg.warmup_fraction))
                ids, mask, y = _tensors(train_seqs, idx, pad)
                try:
                    loss, _ = loss_and_grad(model, ids, mask, y, cfg.l2_rate, l2_in_loss=in_loss)
                    params = [p for p in model.parameters() if p.grad is not None]
                    norm = torch.nn.utils.clip_grad_norm_(params, cfg.clip_norm or float("inf"))
                    if not torch.isfinite(norm):
                        raise NumericError(f"non-finite gradient norm at step {step}")
                except NumericError:
                    if out is not None:
                        save_checkpoint(model, out / "last_finite.ckpt", {"step": step, "epoch": epoch})
                    raise
                opt.step()
                losses.append(loss)
                step += 1
            val_f1, val_loss = score(model, val_seqs, cfg.eval_batch_size)
            result.train_loss.append(float(np.mean(losses)))
            result.val_f1.append(val_f1)
            result.val_loss.append(val_loss)
            logger.info("epoch %d: train loss %.4f, val loss %.4f, val weighted f1 %.4f",
                        epoch, result.train_loss[-1], val_loss, val_f1)  # fmt: skip
            if metrics_fh is not None:
                rec = {"epoch": epoch, "train_loss": result.train_loss[-1], "val_loss": val_loss, "val_f1": val_f1}
                metrics_fh.write(json.dumps(rec) + "\n")
            if epoch == 1 or val_f1 > result.best_val_f1:
                result.best_val_f1 = val_f1
                result.selected_epoch = epoch
                best_state = copy.deepcopy(model.state_dict())
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    result.steps = step
    model.load_state_dict(best_state)
    model.eval()
    if test_seqs:
        result.test_f1, _ = score(model, test_seqs, cfg.eval_batch_size)
    if out is not None:
        meta = {"selected_epoch": result.selected_epoch, "val_f1": result.best_val_f1, "seed": cfg.seed}
        save_checkpoint(model, out / "best.ckpt", meta)
        (out / "result.json").write_text(json.dumps(result.to_dict(), indent=2), encoding="utf-8")
    return result, model


# -- learning-rate search and seeds ----------------------------------------------


@dataclass
class LrSearchResult:
    best_lr: float
    trials: list[tuple[float, float]]

    def to_dict(self) -> dict:
        return {"best_lr": self.best_lr, "trials": [{"lr": lr, "val_loss": loss} for lr, loss in self.trials]}


def search_peak_lr(
    model_config: ModelConfig,
    train_seqs: Sequence[PackedSequence],
    val_seqs: Sequence[PackedSequence],
    cfg: TrainConfig,
    trials: int = 5,
    low: float = 1e-6,
    high: float = 1e-4,
    fraction: float = 0.1,
    objective: Callable[[float], float] | None = None,
) -> LrSearchResult:
    """Sample ``trials`` log-uniform rates in [low, high] and keep the one with the lowest validation loss.

    The default objective trains on ``fraction`` of the training split and
    scores cross entropy on an equally sized validation subset.
    """
    if trials < 1:
        raise ConfigError("trials must be at least 1")
    if not 0 < low <= high:
        raise ConfigError("learning-rate range must satisfy 0 < low <= high")
    rng = random.Random(cfg.seed)
    if objective is None:
        k = max(1, round(fraction * len(train_seqs)))
        sub_train = rng.sample(list(train_seqs), k)
        sub_val = rng.sample(list(val_seqs), min(k, len(val_seqs)))

        def objective(lr: float) -> float:
            trial_cfg = TrainConfig.from_dict({**cfg.to_dict(), "peak_lr": lr})
            res, _ = train(model_config, sub_train, sub_val, trial_cfg)
            return res.val_loss[-1] if res.val_loss else math.inf

    results = []
    for _ in range(trials):
        lr = math.exp(rng.uniform(math.log(low), math.log(high)))
        try:
            loss = float(objective(lr))
        except NumericError as exc:
            logger.warning("trial lr=%.3g diverged: %s", lr, exc)
            loss = math.inf
        results.append((lr, loss if math.isfinite(loss) else math.inf))
    finite = [r for r in results if math.isfinite(r[1])]
    if not finite:
        raise NumericError("every learning-rate trial diverged")
    return LrSearchResult(min(finite, key=lambda r: r[1])[0], results)


@dataclass
class SeedSummary:
    runs: list[RunResult]

    @property
    def test_f1(self) -> list[float]:
        return [r.test_f1 for r in self.runs]

    @property
    def mean_test_f1(self) -> float:
        return float(np.mean(self.test_f1))

    def to_dict(self) -> dict:
        return {"mean_test_f1": self.mean_test_f1, "runs": [r.to_dict() for r in self.runs]}


def run_seeds(
    model_config: ModelConfig,
    splits: dict[str, Sequence[PackedSequence]],
    cfg: TrainConfig,
    seeds: Sequence[int] | int = 5,
    out_dir: str | Path | None = None,
) -> SeedSummary:
    """Train once per seed and average test weighted f1."""
    if isinstance(seeds, int):
        seeds = list(range(seeds))
    if not seeds:
        raise ConfigError("at least one seed is required")
    if not splits.get("test"):
        raise DataError("seed averaging reports test f1 and needs a nonempty test split")
    runs = []
    for seed in seeds:
        seed_cfg = TrainConfig.from_dict({**cfg.to_dict(), "seed": seed})
        run_dir = Path(out_dir) / f"seed{seed}" if out_dir is not None else None
        res, _ = train(model_config, splits["train"], splits["val"], seed_cfg, splits["test"], run_dir)
        runs.append(res)
    return SeedSummary(runs)
