"""Acceptance criteria, one test per criterion; outcomes print in the terminal summary."""

import json
import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import record
from denkf import cli
from denkf.downstream import MissingMask, calibrate_forces, detect_forces, trace_deltas
from denkf.filter import FilterConfig, kalman_update, run_sequence
from denkf.models import build_models
from denkf.simulator import SyntheticArmConfig, canonical_datasets
from denkf.training import TrainConfig, _gather, _prepare, evaluate, init_models, loss_and_grads, run_filter, train
from denkf.types import Ensemble
from oracles import (
    LinearGaussianModels,
    check_param_grads,
    frames_from,
    kalman_filter,
    linear_gaussian_problem,
    submodule_gradient_errors,
)

EVAL = FilterConfig(ensemble_size=32, seed=0)


def test_criterion_01_oracle_equivalence():
    t0 = time.perf_counter()
    p = linear_gaussian_problem(0, 200)
    models = LinearGaussianModels(p["F"], p["B"], p["Q"], p["H"], p["R"])
    P0 = np.eye(7)
    kf = kalman_filter(p["x0"], P0, p["F"], p["B"], p["Q"], p["H"], p["R"], p["actions"][:, :7], p["obs"])
    E = 1000
    init = Ensemble(p["x0"] + np.random.default_rng(1).standard_normal((E, 7)))
    traj = run_sequence(init, frames_from(p["actions"], p["obs"]), models, FilterConfig(ensemble_size=E, seed=2))
    rel = np.sqrt(np.mean((traj.updated_means - kf) ** 2)) / np.sqrt(np.mean(kf**2))
    secs = time.perf_counter() - t0
    ok = rel < 0.02 and secs < 60
    record(1, ok, f"relative RMSE {rel:.4%} (< 2%), {secs:.1f} s (< 60 s)")
    assert ok


def test_criterion_02_gradient_fidelity():
    t0 = time.perf_counter()
    module_errs = {}
    for variant in ("fix", "pe+te"):
        for name, err in submodule_gradient_errors(build_models(variant, seed=8), np.random.default_rng(8)).items():
            module_errs[f"{variant}/{name}"] = err
    ds = canonical_datasets(SyntheticArmConfig(), 4.0, 0, names=["D2"])[0]
    e2e = []
    for variant in ("fix", "pe+te"):
        m = init_models(variant, [ds], seed=3)
        cfg = TrainConfig(ensemble_size=6, init_std=0.5)
        prep = _prepare(m, [ds], 1)
        batch = _gather(prep, prep.index[np.arange(0, 40, 8)], 1)
        _, grads, aux = loss_and_grads(m, batch, cfg, np.random.default_rng(0))
        rng = np.random.default_rng(1)
        for name, net in sorted(m.networks().items()):
            nw = len(net.weights)

            def loss_of(ps, name=name, net=net, nw=nw):
                trial = m.with_networks({**m.networks(), name: net.with_params(ps[:nw], ps[nw:])})
                return loss_and_grads(trial, batch, cfg, None, aux["masks"], aux["init_noise"])[0]

            g = list(grads[name].weights) + list(grads[name].biases)
            e2e += check_param_grads(loss_of, list(net.weights) + list(net.biases), g, 4, rng, eps=1e-6)
    secs = time.perf_counter() - t0
    worst_module = max(module_errs.values())
    ok = worst_module < 1e-4 and max(e2e) < 1e-3 and secs < 300
    record(2, ok, f"modules max rel err {worst_module:.2e} (< 1e-4), end-to-end {max(e2e):.2e} over "
                  f"{len(e2e)} params (< 1e-3), {secs:.1f} s")
    assert ok


def test_criterion_03_filter_algebra_invariants():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = dict(sym=0.0, zero_sum=0.0, min_eig=np.inf, noop=0.0)
    for _ in range(1000):
        E = int(rng.integers(2, 64))
        X = rng.normal(size=(E, 7)) * rng.uniform(0.01, 100)
        HX = np.tanh(X @ rng.normal(size=(7, 7))) * rng.uniform(0.01, 10)
        Y = HX + rng.normal(size=(E, 7))
        r = rng.uniform(0, 1, 7) * rng.choice([0.0, 1e-9, 1.0])
        _, c = kalman_update(X, HX, Y, r, 1e-6)
        worst["sym"] = max(worst["sym"], np.abs(c.S - c.S.T).max())
        worst["zero_sum"] = max(worst["zero_sum"], np.abs(c.A.sum(0)).max(), np.abs(c.HA.sum(0)).max())
        worst["min_eig"] = min(worst["min_eig"], np.linalg.eigvalsh(c.S).min())
        same, _ = kalman_update(X, HX, HX.copy(), r, 1e-6)
        worst["noop"] = max(worst["noop"], np.abs(same - X).max())
    secs = time.perf_counter() - t0
    ok = worst["sym"] < 1e-9 and worst["zero_sum"] < 1e-10 and worst["min_eig"] > 0 and worst["noop"] == 0 and secs < 60
    record(3, ok, f"symmetry {worst['sym']:.1e}, anomaly sums {worst['zero_sum']:.1e}, min eig "
                  f"{worst['min_eig']:.1e}, no-op {worst['noop']:.0e}, {secs:.1f} s")
    assert ok


def test_criterion_04_hand_computed_update():
    out, _ = kalman_update(np.array([[1.0], [3.0]]), np.array([[1.0], [3.0]]), np.array([[2.0], [2.0]]),
                           np.array([0.0]), jitter=0.0)
    ok = out.tolist() == [[2.0], [2.0]]
    record(4, ok, f"members {{1,3}}, obs 2 -> {out.ravel().tolist()}")
    assert ok


@pytest.mark.slow
def test_criterion_05_training_efficacy(trained_fix):
    before = evaluate(trained_fix.untrained, trained_fix.heldout, EVAL).mae_position
    after = evaluate(trained_fix.models, trained_fix.heldout, EVAL).mae_position
    ratio = after / before
    ok = ratio < 0.3
    record(5, ok, f"held-out MAE {after:.1f} mm vs untrained {before:.1f} mm ({ratio:.1%}, < 30%)")
    assert ok


@pytest.fixture(scope="module")
def mixed_conditions():
    """D1-D10 at all four rates; first 75% of each recording trains, last 25% is held out."""
    ds = canonical_datasets(SyntheticArmConfig(), 16.0, 100, frequencies=(5, 10, 30, 50))
    tr = [d.slice(0, int(0.75 * len(d))) for d in ds]
    te = [d.slice(int(0.75 * len(d)), len(d)) for d in ds]
    cfg = TrainConfig(epochs=10, lr=1e-3, ensemble_size=16, batch_size=64, init_std=1.0)
    reports = {}
    for variant in ("fix", "pe+te"):
        state = train(init_models(variant, tr, seed=1), tr, cfg)
        reports[variant] = evaluate(state.models, te, EVAL)
    return reports


@pytest.mark.slow
def test_criterion_06_generalization(mixed_conditions):
    fix, pete = mixed_conditions["fix"].mae_position, mixed_conditions["pe+te"].mae_position
    ok = pete < fix
    record(6, ok, f"mixed held-out MAE: PE+TE {pete:.1f} mm vs Fix {fix:.1f} mm ({1 - pete / fix:.0%} lower)")
    assert ok


@pytest.mark.slow
def test_mixed_model_close_to_single_placement(mixed_conditions, trained_fix):
    own = evaluate(trained_fix.models, trained_fix.heldout, EVAL).mae_position
    assert mixed_conditions["pe+te"].mae_position < 1.5 * own


@pytest.mark.slow
def test_criterion_07_missing_observations(trained_fix):
    ds = trained_fix.heldout
    n = len(ds) - 1
    length = int(round(0.125 * n))
    start = 250
    mask = MissingMask.window(n, start, length)
    traj = run_filter(trained_fix.models, ds, EVAL, missing=mask.flags)
    spread = traj.ensemble_stds.mean(axis=1)
    before = spread[start - length : start].mean()
    during = spread[start : start + length].mean()
    after = spread[start + length : start + length + 10]
    recovered = np.flatnonzero(after <= 1.2 * before)
    ok = during > before and recovered.size > 0
    first = int(recovered[0]) + 1 if recovered.size else None
    record(7, ok, f"{length}-step gap: mean std {during:.2f} vs {before:.2f} before; "
                  f"back within 1.2x after {first} step(s) (<= 10)")
    assert ok


@pytest.mark.slow
def test_criterion_08_force_detection(trained_fix):
    ds = trained_fix.heldout
    base = run_filter(trained_fix.models, ds, EVAL)
    cal = calibrate_forces(base, p=10, percentile=99)
    false_alarms = detect_forces(base, cal).alarm_rate
    independent = detect_forces(run_filter(trained_fix.models, ds, replace(EVAL, seed=1)), cal).alarm_rate
    peaks = []
    for magnitude in (1.0, 2.0, 4.0):
        raw = ds.raw_obs.copy()
        raw[300:350] += magnitude
        traj = run_filter(trained_fix.models, replace(ds, raw_obs=raw), EVAL)
        peaks.append(float(trace_deltas(traj)[299:349].max()))
    increasing = all(a < b for a, b in zip(peaks, peaks[1:]))
    above = all(pk > 3 * cal.median for pk in peaks)
    ok = increasing and above and false_alarms <= 0.01
    record(8, ok, f"peak delta {[round(pk, 1) for pk in peaks]} vs 3x median {3 * cal.median:.1f}; "
                  f"false alarms {false_alarms:.2%} (independent seed {independent:.2%})")
    assert ok


@pytest.mark.slow
def test_criterion_09_step_time(trained_fix):
    report = evaluate(trained_fix.models, trained_fix.heldout, EVAL)
    per_step = report.wall_clock_per_step
    ok = per_step < 0.062
    record(9, ok, f"{per_step * 1e3:.2f} ms per step at E=32 (reference 62 ms, hard limit 124 ms)")
    assert per_step < 0.124


def test_criterion_10_replay(tmp_path, capsys):
    sim_cfg = tmp_path / "sim.json"
    sim_cfg.write_text(json.dumps({"datasets": ["D1", "D3"], "duration_s": 2.0}))
    train_cfg = tmp_path / "train.json"
    train_cfg.write_text(json.dumps({"epochs": 2, "lr": 1e-3, "ensemble_size": 4, "batch_size": 32, "init_std": 1.0}))
    data, ck, ev = tmp_path / "data", tmp_path / "m.npz", tmp_path / "eval"
    steps = [
        ["simulate", "--config", str(sim_cfg), "--out", str(data), "--seed", "4"],
        ["train", "--data", str(data), "--out", str(ck), "--config", str(train_cfg)],
        ["eval", "--checkpoint", str(ck), "--data", str(data), "--out", str(ev), "--ensemble-size", "8",
         "--missing-mask", "0.125"],
    ]
    assert all(cli.main(argv) == 0 for argv in steps)
    results = []
    for i, manifest in enumerate((data / "manifest.json", tmp_path / "m.npz.manifest.json", ev / "manifest.json")):
        capsys.readouterr()
        code = cli.main(["replay", str(manifest), "--out", str(tmp_path / f"replay{i}")])
        results.append(code == 0)
    ok = all(results)
    record(10, ok, f"simulate/train/eval replays identical: {results}")
    assert ok
