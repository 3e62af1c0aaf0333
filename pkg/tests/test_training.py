import re
from dataclasses import replace

import numpy as np
import pytest

from denkf import nn
from denkf.datasets import TrajectoryDataset
from denkf.errors import ConfigError, InvalidArgumentError, TrainingError
from denkf.filter import FilterConfig
from denkf.simulator import CANONICAL_PLACEMENTS, SyntheticArmConfig, generate_trajectory
from denkf.training import (
    CrossValidationReport,
    EvalReport,
    TrainConfig,
    _gather,
    _prepare,
    block_evaluate,
    crossvalidate,
    evaluate,
    fold_indices,
    init_models,
    load_training_checkpoint,
    loss_and_grads,
    save_training_checkpoint,
    summarize,
    train,
)
from oracles import LinearGaussianModels, check_param_grads

FAST = dict(lr=1e-3, ensemble_size=8, batch_size=32, init_std=1.0)


@pytest.fixture(scope="module")
def tiny():
    return generate_trajectory(SyntheticArmConfig(), CANONICAL_PLACEMENTS["D1"], 50, 4.0, seed=5, name="tiny")


def params_equal(a, b):
    na, nb = a.networks(), b.networks()
    return all(
        np.array_equal(x, y)
        for k in na
        for x, y in zip(na[k].weights + na[k].biases, nb[k].weights + nb[k].biases)
    )


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.lr, cfg.ensemble_size, cfg.bptt_window) == (50, 64, 1e-5, 32, 1)
    assert cfg.lambda_e2e == cfg.lambda_f == cfg.lambda_s == 1.0
    assert cfg.grad_through_gain


def test_config_validation():
    for bad in (dict(epochs=0), dict(batch_size=-1), dict(lr=-1e-3), dict(ensemble_size=1), dict(dropout_rate=1.0)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)
    with pytest.raises(ConfigError, match="unknown"):
        TrainConfig.from_dict({"epoch": 3})
    with pytest.raises(ConfigError, match="epochs"):
        TrainConfig.from_dict({"epochs": 2.5})
    with pytest.raises(ConfigError, match="grad_through_gain"):
        TrainConfig.from_dict({"grad_through_gain": 1})
    cfg = TrainConfig.from_dict({"lr": 1, "epochs": 3})
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_lr_zero_leaves_parameters(tiny):
    m = init_models("fix", [tiny], seed=1)
    state = train(m, [tiny], TrainConfig(epochs=2, **{**FAST, "lr": 0.0}))
    assert params_equal(state.models, m)
    assert len(state.history) == 2


def test_same_seed_same_curve(tiny):
    m = init_models("pe+te", [tiny], seed=1)
    cfg = TrainConfig(epochs=2, **FAST)
    a = train(m, [tiny], cfg)
    b = train(m, [tiny], cfg)
    assert a.history == b.history
    assert params_equal(a.models, b.models)
    c = train(m, [tiny], replace(cfg, seed=1))
    assert c.history != a.history


def batch_for(models, ds, cfg, rows):
    prep = _prepare(models, [ds], cfg.bptt_window)
    return _gather(prep, prep.index[rows], cfg.bptt_window)


@pytest.mark.parametrize("variant,window", [("fix", 1), ("pe+te", 1), ("pe+te", 3)])
def test_end_to_end_gradients(tiny, variant, window):
    """Total loss vs central differences over 20 parameters spread across all four sub-modules."""
    m = init_models(variant, [tiny], seed=3)
    cfg = TrainConfig(ensemble_size=6, bptt_window=window, init_std=0.5)
    batch = batch_for(m, tiny, cfg, np.arange(0, 40, 8))
    _, grads, aux = loss_and_grads(m, batch, cfg, np.random.default_rng(0))
    names = sorted(m.networks())
    rng = np.random.default_rng(1)
    errs = []
    for name in names:
        net = m.networks()[name]
        params = list(net.weights) + list(net.biases)
        g = list(grads[name].weights) + list(grads[name].biases)
        nw = len(net.weights)

        def loss_of(ps, name=name, net=net, nw=nw):
            trial = m.with_networks({**m.networks(), name: net.with_params(ps[:nw], ps[nw:])})
            return loss_and_grads(trial, batch, cfg, None, aux["masks"], aux["init_noise"])[0]

        errs += check_param_grads(loss_of, params, g, 4, rng, eps=1e-6)
    assert len(errs) >= 20
    assert max(errs) < 1e-3, errs


def test_stopped_gain_changes_gradient(tiny):
    m = init_models("fix", [tiny], seed=3)
    cfg = TrainConfig(ensemble_size=6)
    batch = batch_for(m, tiny, cfg, np.arange(8))
    full = loss_and_grads(m, batch, cfg, np.random.default_rng(0))
    stopped = loss_and_grads(m, batch, replace(cfg, grad_through_gain=False), np.random.default_rng(0))
    assert full[0] == stopped[0]
    assert not np.allclose(full[1]["noise"].weights[0], stopped[1]["noise"].weights[0])
    assert not np.any(stopped[1]["noise"].weights[0])


def test_loss_parts_weighting(tiny):
    m = init_models("fix", [tiny], seed=3)
    cfg = TrainConfig(ensemble_size=6, lambda_e2e=2.0, lambda_f=0.5, lambda_s=0.0)
    batch = batch_for(m, tiny, cfg, np.arange(8))
    total, _, aux = loss_and_grads(m, batch, cfg, np.random.default_rng(0))
    assert total == pytest.approx(2.0 * aux["parts"][0] + 0.5 * aux["parts"][1], rel=1e-12)


def test_intermediate_losses_off_still_trains(tiny):
    m = init_models("fix", [tiny], seed=2)
    state = train(m, [tiny], TrainConfig(epochs=4, lambda_f=0.0, lambda_s=0.0, **FAST))
    losses = [h["loss"] for h in state.history]
    assert losses[-1] < losses[0]


@pytest.mark.filterwarnings("ignore:invalid value")
def test_non_finite_loss_keeps_last_good(tiny):
    m = init_models("fix", [tiny], seed=2)
    net = m.networks()["noise"]
    broken = m.with_networks({**m.networks(), "noise": net.with_params(
        [np.full_like(w, np.nan) for w in net.weights], list(net.biases))})
    with pytest.raises(TrainingError) as info:
        train(broken, [tiny], TrainConfig(epochs=1, **FAST))
    assert info.value.last_good.epoch == 0


def test_resume_matches_uninterrupted(tmp_path, tiny):
    m = init_models("fix", [tiny], seed=2)
    cfg = TrainConfig(epochs=3, **FAST)
    full = train(m, [tiny], cfg)
    path = tmp_path / "ck.npz"
    part = train(m, [tiny], replace(cfg, epochs=2), on_epoch=lambda s: save_training_checkpoint(path, s, cfg))
    state, meta = load_training_checkpoint(path)
    assert meta["epoch"] == 2 and state.epoch == 2 and state.history == part.history
    resumed = train(state.models, [tiny], cfg, state=state)
    assert resumed.history == full.history
    assert params_equal(resumed.models, full.models)


def test_prepare_needs_long_enough_data(tiny):
    m = init_models("fix", [tiny])
    with pytest.raises(InvalidArgumentError):
        _prepare(m, [tiny.slice(0, 2)], 3)


# -- evaluation -----------------------------------------------------------------


def test_oracle_models_have_near_zero_error():
    """Exact linear models with near-zero noise reproduce the ground truth."""
    rng = np.random.default_rng(0)
    n, F = 120, 0.9 * np.eye(7)
    truth = np.zeros((n, 7))
    truth[0] = rng.normal(size=7)
    actions = rng.uniform(size=(n, 40))
    for k in range(1, n):
        truth[k] = F @ truth[k - 1] + actions[k, :7]
    raw = np.zeros((n, 30))
    raw[:, :7] = truth
    ds = TrajectoryDataset(np.arange(n) / 50, actions, raw, truth, CANONICAL_PLACEMENTS["D1"], 50)
    tiny_var = 1e-14 * np.eye(7)
    models = LinearGaussianModels(F, np.eye(7), tiny_var, np.eye(7), tiny_var)
    report = evaluate(models, ds, FilterConfig(ensemble_size=16))
    assert report.mae_position < 1e-6 and report.mae_quaternion < 1e-6
    assert report.n_steps == n - 1


def test_eval_report_fields(tiny):
    m = init_models("pe", [tiny], seed=1)
    other = replace(tiny, placement=CANONICAL_PLACEMENTS["D2"], metadata={"name": "d2"})
    r = evaluate(m, [tiny, other], FilterConfig(ensemble_size=8))
    assert isinstance(r, EvalReport)
    assert r.n_steps == 2 * (len(tiny) - 1)
    assert set(r.per_condition) == {"[1,4,9,14,18]@50Hz", "[1,5,9,15,19]@50Hz"}
    assert min(r.mae_position, r.rmse_position, r.mae_quaternion, r.wall_clock_per_step) >= 0
    assert r.rmse_position >= r.mae_position / np.sqrt(3) - 1e-9
    assert set(r.as_row()) >= {"mae_position_mm", "wall_clock_per_step_s"}


def test_fold_partition():
    folds = fold_indices(10, 10)
    assert sorted(np.concatenate(folds).tolist()) == list(range(10))
    assert all(len(f) == 1 for f in folds)
    blocks = fold_indices(23, 4)
    assert all(np.all(np.diff(b) == 1) for b in blocks)
    with pytest.raises(InvalidArgumentError):
        fold_indices(3, 4)
    with pytest.raises(InvalidArgumentError):
        fold_indices(5, 1)


def test_crossvalidate_holds_each_segment_out_once(tiny):
    segments = tiny.split(10)
    m = init_models("fix", [tiny], seed=1)
    seen = []

    def factory(train_segs):
        seen.append({s.name for s in train_segs})
        return m

    report = crossvalidate(factory, segments, 10, FilterConfig(ensemble_size=8))
    names = {s.name for s in segments}
    held = [next(iter(names - s)) for s in seen]
    assert sorted(held) == sorted(names) and all(len(s) == 9 for s in seen)
    assert len(report.folds) == 10


def test_identical_folds_zero_stderr(tiny):
    seg = tiny.slice(0, 40)
    m = init_models("fix", [tiny], seed=1)
    report = crossvalidate(lambda _: m, [seg] * 5, 5, FilterConfig(ensemble_size=8))
    assert report.stderr["mae_position"] == 0.0 and report.stderr["mae_quaternion"] == 0.0


def test_summary_and_table_format():
    reports = [EvalReport(v, 2 * v, v / 100, 0.001, 10) for v in (10.0, 12.0, 14.0)]
    mean, stderr = summarize(reports)
    assert mean["mae_position"] == 12.0
    assert stderr["mae_position"] == pytest.approx(2.0 / np.sqrt(3))
    row = CrossValidationReport(reports, mean, stderr).format_row("DEnKF-Fix")
    assert row == "DEnKF-Fix | 12.0000±1.155 | 0.1200±0.012 | 24.0000±2.309"
    assert re.fullmatch(r"[\w-]+( \| \d+\.\d{4}±\d+\.\d{3}){3}", row)


def test_block_evaluate(tiny):
    m = init_models("fix", [tiny], seed=1)
    r = block_evaluate(m, tiny, 4, FilterConfig(ensemble_size=8))
    assert len(r.folds) == 4 and r.stderr["mae_position"] >= 0


@pytest.mark.slow
def test_training_loss_drops(trained_fix):
    losses = [h["loss"] for h in trained_fix.history]
    assert len(losses) == 50
    assert losses[-1] < 0.2 * losses[0]


@pytest.mark.slow
def test_untrained_is_worse(trained_fix):
    cfg = FilterConfig(ensemble_size=32, seed=0)
    assert evaluate(trained_fix.untrained, trained_fix.heldout, cfg).mae_position > \
        evaluate(trained_fix.models, trained_fix.heldout, cfg).mae_position


def test_optimizer_state_round_trip(tmp_path, tiny):
    m = init_models("fix", [tiny], seed=2)
    state = train(m, [tiny], TrainConfig(epochs=1, **FAST))
    path = tmp_path / "ck.npz"
    save_training_checkpoint(path, state, TrainConfig(epochs=1, **FAST))
    loaded, _ = load_training_checkpoint(path)
    for name, st in state.adam.items():
        other = loaded.adam[name]
        assert isinstance(other, nn.AdamState) and other.step == st.step
        assert all(np.array_equal(a, b) for a, b in zip(st.m, other.m))
