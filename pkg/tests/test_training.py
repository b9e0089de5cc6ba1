import json
import math
import random

import numpy as np
import pytest
import torch

import erc.model
from erc.errors import ConfigError, DataError, NumericError
from erc.model import read_checkpoint
from erc.training import (
    AdamW,
    TrainConfig,
    lr_at,
    make_batches,
    make_optimizer,
    run_seeds,
    score,
    search_peak_lr,
    train,
)


def test_lr_at_examples():
    assert [lr_at(s, 10, 1.0) for s in (0, 1, 2, 6, 10)] == [0.0, 0.5, 1.0, 0.5, 0.0]
    assert lr_at(3, 7, 2.0) == pytest.approx(1.6)  # ceil(1.4) = 2 warmup steps, then 2 * 4 / 5
    assert lr_at(2, 7, 2.0) == 2.0


@pytest.mark.parametrize("total", [1, 2, 5, 37, 1000])
def test_lr_at_is_piecewise_linear(total):
    w = math.ceil(0.2 * total)
    for s in range(total + 1):
        expected = np.interp(s, [0, w, total], [0.0, 3e-4, 0.0])
        assert lr_at(s, total, 3e-4) == pytest.approx(expected, abs=1e-18)


def test_lr_at_errors():
    with pytest.raises(ConfigError):
        lr_at(0, 0, 1.0)
    with pytest.raises(ConfigError):
        lr_at(11, 10, 1.0)


@pytest.mark.parametrize("wd", [0.0, 0.01, 0.3])
def test_adamw_matches_torch(wd):
    g = torch.Generator().manual_seed(0)
    target = torch.randn(5, 3, generator=g, dtype=torch.float64)
    a = torch.nn.Parameter(torch.randn(5, 3, generator=g, dtype=torch.float64))
    b = torch.nn.Parameter(a.detach().clone())
    ours = AdamW([a], lr=0.05, weight_decay=wd)
    ref = torch.optim.AdamW([b], lr=0.05, weight_decay=wd, betas=(0.9, 0.999), eps=1e-8)
    for k in range(30):
        for p, opt in ((a, ours), (b, ref)):
            for group in opt.param_groups:
                group["lr"] = 0.05 * (k + 1) / 30
            opt.zero_grad()
            ((p - target) ** 4).sum().backward()
            opt.step()
        assert torch.allclose(a, b, rtol=1e-10, atol=1e-12)


def test_make_optimizer_decays_matrices_only(tiny_model_config):
    m = erc.model.init_model(tiny_model_config, 0)
    opt = make_optimizer(m, TrainConfig(l2_rate=0.05))
    decay, no_decay = opt.param_groups
    assert decay["weight_decay"] == 0.05 and no_decay["weight_decay"] == 0.0
    assert all(p.ndim >= 2 for p in decay["params"]) and all(p.ndim < 2 for p in no_decay["params"])
    assert make_optimizer(m, TrainConfig(l2_mode="in_loss")).param_groups[0]["weight_decay"] == 0.0


def test_make_batches_is_a_seeded_partition():
    lengths = [random.Random(0).randint(1, 50) for _ in range(23)]
    batches = make_batches(lengths, 4, random.Random(1))
    assert sorted(i for b in batches for i in b) == list(range(23))
    assert all(len(b) <= 4 for b in batches)
    assert batches == make_batches(lengths, 4, random.Random(1))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(l2_mode="both")
    with pytest.raises(ConfigError):
        TrainConfig(warmup_fraction=0.0)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"nope": 1})
    assert TrainConfig.from_dict(TrainConfig(seed=4).to_dict()) == TrainConfig(seed=4)


FAST = dict(epochs=3, peak_lr=3e-3, batch_size=16)


def test_train_writes_outputs_and_selects_best(tmp_path, tiny_model_config, small_packed):
    cfg = TrainConfig(**FAST)
    res, model = train(tiny_model_config, small_packed["train"], small_packed["val"], cfg, small_packed["test"], tmp_path)
    assert len(res.train_loss) == len(res.val_f1) == 3
    assert res.steps == 3 * math.ceil(len(small_packed["train"]) / 16)
    assert res.best_val_f1 == max(res.val_f1)
    assert res.selected_epoch == res.val_f1.index(max(res.val_f1)) + 1
    for name in ("config.json", "metrics.jsonl", "result.json", "best.ckpt"):
        assert (tmp_path / name).exists()
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(x)["epoch"] for x in lines] == [1, 2, 3]
    ckpt, meta = read_checkpoint(tmp_path / "best.ckpt")
    assert meta["selected_epoch"] == res.selected_epoch
    assert score(ckpt, small_packed["val"])[0] == res.best_val_f1
    assert score(model, small_packed["test"])[0] == res.test_f1


def test_train_deterministic(tiny_model_config, small_packed):
    cfg = TrainConfig(**{**FAST, "epochs": 2})
    a, _ = train(tiny_model_config, small_packed["train"], small_packed["val"], cfg)
    b, _ = train(tiny_model_config, small_packed["train"], small_packed["val"], cfg)
    assert a == b


def test_in_loss_mode_trains(tiny_model_config, small_packed):
    cfg = TrainConfig(**{**FAST, "epochs": 2, "l2_mode": "in_loss"})
    res, _ = train(tiny_model_config, small_packed["train"], small_packed["val"], cfg)
    assert all(np.isfinite(res.train_loss))


def test_zero_epochs_returns_initial_model(tiny_model_config, small_packed):
    res, model = train(tiny_model_config, small_packed["train"], small_packed["val"], TrainConfig(epochs=0))
    assert res.steps == 0 and res.selected_epoch == 0 and res.val_f1 == []
    init = erc.model.init_model(tiny_model_config, 0)
    assert all(torch.equal(a, b) for a, b in zip(model.state_dict().values(), init.state_dict().values()))


def test_divergence_saves_last_finite(tmp_path, monkeypatch, tiny_model_config, small_packed):
    real = erc.model.compute_loss
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 3:
            raise NumericError("boom")
        return real(*args, **kwargs)

    monkeypatch.setattr(erc.model, "compute_loss", flaky)
    with pytest.raises(NumericError):
        train(tiny_model_config, small_packed["train"], small_packed["val"], TrainConfig(**FAST), out_dir=tmp_path)
    assert (tmp_path / "last_finite.ckpt").exists()


def test_train_rejects_bad_data(tiny_model_config, small_packed):
    with pytest.raises(DataError):
        train(tiny_model_config, [], small_packed["val"], TrainConfig())
    two = erc.model.ModelConfig(**{**tiny_model_config.to_dict(), "n_classes": 2})
    with pytest.raises(DataError):
        train(two, small_packed["train"], small_packed["val"], TrainConfig())


def test_search_with_stub_objective(tiny_model_config, small_packed):
    seen = []

    def loss(lr):
        return (math.log(lr) - math.log(1e-5)) ** 2

    def objective(lr):
        seen.append(lr)
        return loss(lr)

    res = search_peak_lr(tiny_model_config, small_packed["train"], small_packed["val"], TrainConfig(), trials=8, objective=objective)
    assert len(res.trials) == 8 and all(1e-6 <= lr <= 1e-4 for lr in seen)
    assert res.best_lr == min(seen, key=loss)
    again = search_peak_lr(tiny_model_config, small_packed["train"], small_packed["val"], TrainConfig(), trials=8, objective=objective)
    assert again.best_lr == res.best_lr


def test_search_handles_divergence(tiny_model_config, small_packed):
    def objective(lr):
        if lr > 1e-5:
            raise NumericError("diverged")
        return lr

    res = search_peak_lr(tiny_model_config, small_packed["train"], small_packed["val"], TrainConfig(), trials=10, objective=objective)
    assert any(loss == math.inf for _, loss in res.trials)
    assert res.best_lr <= 1e-5

    def always(lr):
        raise NumericError("diverged")

    with pytest.raises(NumericError):
        search_peak_lr(tiny_model_config, small_packed["train"], small_packed["val"], TrainConfig(), trials=3, objective=always)


def test_search_default_objective(tiny_model_config, small_packed):
    cfg = TrainConfig(epochs=1, batch_size=8)
    res = search_peak_lr(tiny_model_config, small_packed["train"], small_packed["val"], cfg, trials=2, low=1e-4, high=1e-2)
    assert res.best_lr in [lr for lr, _ in res.trials]


def test_run_seeds(tmp_path, tiny_model_config, small_packed):
    summary = run_seeds(tiny_model_config, small_packed, TrainConfig(**{**FAST, "epochs": 1}), [3, 4], tmp_path)
    assert [r.seed for r in summary.runs] == [3, 4]
    assert summary.mean_test_f1 == pytest.approx(np.mean(summary.test_f1))
    assert (tmp_path / "seed3" / "best.ckpt").exists() and (tmp_path / "seed4" / "result.json").exists()
    with pytest.raises(DataError):
        run_seeds(tiny_model_config, {**small_packed, "test": []}, TrainConfig(), 1)
