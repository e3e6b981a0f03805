import json

import numpy as np
import pytest

from litm.data import SynthConfig, generate
from litm.errors import ConfigError, NonFiniteError
from litm.model import ModelConfig, load_checkpoint
from litm.trainer import (OptimizerState, TrainConfig, adam_step, batches_per_epoch, lr_at,
                          parse_config, train)

from oracles import adam_scalar


def test_lr_schedule_values():
    cfg = TrainConfig()
    assert lr_at(1, cfg) == 2e-4
    assert lr_at(150, cfg) == 2e-4
    assert lr_at(300, cfg) == pytest.approx(2e-7, rel=1e-12)
    assert lr_at(225, cfg) == pytest.approx(2e-4 * 10 ** -1.5, rel=1e-12)
    assert lr_at(225, cfg) == pytest.approx(6.325e-6, rel=1e-3)


def test_lr_schedule_is_continuous_and_non_increasing():
    cfg = TrainConfig()
    lrs = [lr_at(t, cfg) for t in range(1, 301)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    # the first decayed step is a small one
    assert lr_at(151, cfg) / lr_at(150, cfg) == pytest.approx(10 ** (-3 / 150), rel=1e-12)


def test_lr_outside_range():
    with pytest.raises(ValueError):
        lr_at(0, TrainConfig())
    with pytest.raises(ValueError):
        lr_at(301, TrainConfig())


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    new, state = adam_step(p, {"w": np.zeros(2)}, OptimizerState.zeros(p), 1e-2, TrainConfig())
    assert np.array_equal(new["w"], p["w"]) and state.t == 1


def test_adam_matches_scalar_reference():
    cfg = TrainConfig()
    grad = lambda x: 2.0 * (x - 3.0)
    ref = adam_scalar(0.5, grad, 100, 0.05, cfg.beta1, cfg.beta2, cfg.eps)
    p = {"x": np.array([0.5])}
    state = OptimizerState.zeros(p)
    for r in ref:
        p, state = adam_step(p, {"x": grad(p["x"])}, state, 0.05, cfg)
        assert abs(p["x"][0] - r) <= 1e-12


def test_adam_first_step_moves_by_about_lr():
    cfg = TrainConfig(eps=1e-12)
    p = {"x": np.array([0.0, 0.0])}
    new, _ = adam_step(p, {"x": np.array([5.0, -0.1])}, OptimizerState.zeros(p), 0.1, cfg)
    np.testing.assert_allclose(new["x"], [-0.1, 0.1], rtol=1e-9)


def test_adam_rejects_non_finite_gradients():
    p = {"a": np.zeros(2), "b": np.zeros(1)}
    with pytest.raises(NonFiniteError, match="b"):
        adam_step(p, {"a": np.zeros(2), "b": np.array([np.nan])}, OptimizerState.zeros(p), 1e-3, TrainConfig())


@pytest.mark.parametrize("kwargs", [
    dict(epochs=0), dict(base_lr=0), dict(lr_breakpoint=400), dict(beta1=1.0),
    dict(P=1), dict(q=6), dict(lambdas=(1, 1)),
])
def test_train_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


def test_train_config_round_trip_and_unknown_keys():
    cfg = TrainConfig(epochs=10, lr_breakpoint=5, seed=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochs": 10, "momentum": 0.9})


def test_parse_config_sections():
    synth, model, tcfg = parse_config({"synth": {"n_ids": 8}, "model": {"M": 1}, "train": {"epochs": 4, "lr_breakpoint": 2}})
    assert synth == {"n_ids": 8} and model == {"M": 1} and tcfg.epochs == 4
    with pytest.raises(ConfigError):
        parse_config({"optimizer": {}})
    with pytest.raises(ConfigError):
        parse_config({"model": {"width": 3}})


def test_batches_per_epoch_default():
    assert batches_per_epoch(400, TrainConfig()) == 5
    assert batches_per_epoch(81, TrainConfig()) == 2
    assert batches_per_epoch(81, TrainConfig(batches_per_epoch=7)) == 7


@pytest.fixture(scope="module")
def tiny_setup():
    ds = generate(SynthConfig(n_ids=16, samples_per_id=4, d_in=6, R=2, seed=1))
    mcfg = ModelConfig(d_in=6, hidden_dims=(12, 12, 12), d_emb=6, M=2)
    tcfg = TrainConfig(epochs=12, lr_breakpoint=6, base_lr=3e-3, P=8, K=4, g=3, q=1,
                       batches_per_epoch=3, seed=0)
    return ds, mcfg, tcfg


def test_training_reduces_the_loss(tiny_setup, tmp_path):
    ds, mcfg, tcfg = tiny_setup
    result = train(ds, mcfg, tcfg, checkpoint_path=tmp_path / "m.ckpt", metrics_path=tmp_path / "m.jsonl")
    totals = [r["total"] for r in result.metrics]
    assert len(totals) == tcfg.epochs * 3
    assert np.mean(totals[-6:]) < np.mean(totals[:6])
    rows = [json.loads(l) for l in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert rows == result.metrics
    assert [r["sampler"] for r in rows[::3]][:6] == ["RANDOM", "RANDOM", "GHIS"] * 2
    params, cfg = load_checkpoint(tmp_path / "m.ckpt")
    assert cfg == mcfg
    assert all(np.array_equal(params[k], result.params[k]) for k in params)


def test_dry_run_writes_initial_checkpoint_only(tiny_setup, tmp_path):
    ds, mcfg, tcfg = tiny_setup
    result = train(ds, mcfg, tcfg, checkpoint_path=tmp_path / "init.ckpt", dry_run=True)
    assert result.metrics == []
    params, _ = load_checkpoint(tmp_path / "init.ckpt")
    assert all(np.array_equal(params[k], result.initial_params[k]) for k in params)


def test_train_rejects_mismatched_configs(tiny_setup):
    ds, mcfg, tcfg = tiny_setup
    with pytest.raises(ConfigError):
        train(ds, ModelConfig(d_in=6, hidden_dims=(4, 4, 4), d_emb=3, M=1), tcfg)
    with pytest.raises(ConfigError):
        train(ds, ModelConfig(d_in=5, hidden_dims=(4, 4, 4), d_emb=3, M=2), tcfg)
    with pytest.raises(ConfigError):
        train(ds, mcfg, TrainConfig(P=20, K=4))


def test_brief_training_separates_identities_without_twins():
    from litm.data import split_queries
    from litm.evaluation import evaluate_model
    from litm.numeric import RandomSource

    ds = generate(SynthConfig(n_ids=20, samples_per_id=6, d_in=8, R=2, hard_pair_fraction=0.0, seed=2))
    mcfg = ModelConfig(d_in=8, hidden_dims=(16, 16, 16), d_emb=8, M=2)
    tcfg = TrainConfig(epochs=40, lr_breakpoint=40, base_lr=1e-3, P=8, K=4, g=3, q=1, seed=2)
    params = train(ds, mcfg, tcfg).params
    q, g = split_queries(ds, 0.25, RandomSource(0))
    report, = evaluate_model(params, mcfg, ds, q, g, stages=[2])
    assert report.rank(1) >= 0.95
