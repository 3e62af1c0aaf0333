"""End-to-end training through the filter recursion, evaluation and cross-validation."""

from __future__ import annotations

import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn
from .datasets import TrajectoryDataset
from .errors import ConfigError, FilterDivergenceError, InvalidArgumentError, TrainingError
from .filter import FilterConfig, initial_ensemble, kalman_update, kalman_update_backward, run_sequence
from .models import DEnKFModels, Standardizer, build_models, load_models, save_models
from .types import STATE_DIM

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-5
    ensemble_size: int = 32
    bptt_window: int = 1
    lambda_e2e: float = 1.0
    lambda_f: float = 1.0
    lambda_s: float = 1.0
    seed: int = 0
    init_std: float = 0.1
    jitter: float = 1e-6
    dropout_rate: float = 0.1
    grad_through_gain: bool = True

    def __post_init__(self):
        positive = ("epochs", "batch_size", "ensemble_size", "bptt_window", "jitter")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name}: must be positive, got {getattr(self, name)}")
        if self.ensemble_size < 2:
            raise ConfigError("ensemble_size: must be >= 2")
        for name in ("lr", "lambda_e2e", "lambda_f", "lambda_s", "init_std"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be non-negative, got {getattr(self, name)}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError(f"dropout_rate: must be in [0, 1), got {self.dropout_rate}")
        if self.seed < 0:
            raise ConfigError("seed: must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training config field(s): {sorted(unknown)}")
        for name, value in d.items():
            kind = cls.__dataclass_fields__[name].type
            if kind == "bool":
                ok = isinstance(value, bool)
            elif kind == "int":
                ok = isinstance(value, int) and not isinstance(value, bool)
            else:
                ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            if not ok:
                raise ConfigError(f"{name}: expected {kind}, got {value!r}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def fit_normalizers(datasets: Sequence[TrajectoryDataset]):
    """State, action and raw-observation standardizers from the training split."""
    gt = np.concatenate([d.ground_truth for d in datasets])
    act = np.concatenate([d.actions for d in datasets])
    obs = np.concatenate([d.raw_obs for d in datasets])
    return Standardizer.fit(gt), Standardizer.fit(act), Standardizer.fit(obs)


def init_models(variant, datasets: Sequence[TrajectoryDataset], seed: int = 0, dropout_rate: float = 0.1):
    state_norm, action_norm, obs_norm = fit_normalizers(datasets)
    return build_models(variant, seed=seed, dropout_rate=dropout_rate, state_norm=state_norm,
                        action_norm=action_norm, obs_norm=obs_norm)


@dataclass
class _Prepared:
    """Normalized per-dataset arrays plus the flat index of training windows."""

    states: list
    actions: list
    sensor_inputs: list
    freq_emb: list
    index: np.ndarray  # rows of (dataset, start)


def _prepare(models: DEnKFModels, datasets: Sequence[TrajectoryDataset], window: int) -> _Prepared:
    states, actions, sens, te, index = [], [], [], [], []
    for i, ds in enumerate(datasets):
        if len(ds) <= window:
            continue
        states.append(models.encode_state(ds.ground_truth))
        actions.append(models.transition.action_norm.encode(ds.actions))
        sens.append(models.sensor.build_input(ds.raw_obs, ds.placement))
        te.append(models.transition.freq_embedding(ds.sampling_frequency))
        starts = np.arange(len(ds) - window)
        index.append(np.stack([np.full_like(starts, len(states) - 1), starts], axis=1))
    if not index:
        raise InvalidArgumentError(f"no dataset is longer than the bptt window ({window})")
    return _Prepared(states, actions, sens, te, np.concatenate(index))


def _gather(prep: _Prepared, rows: np.ndarray, window: int):
    x0 = np.stack([prep.states[d][t] for d, t in rows])
    acts = np.stack([prep.actions[d][t + 1 : t + 1 + window] for d, t in rows])
    sens = np.stack([prep.sensor_inputs[d][t + 1 : t + 1 + window] for d, t in rows])
    targets = np.stack([prep.states[d][t + 1 : t + 1 + window] for d, t in rows])
    te = None
    if prep.freq_emb[0] is not None:
        te = np.stack([prep.freq_emb[d] for d, _ in rows])
    return x0, acts, sens, te, targets


def _add(acc: dict, grads: dict):
    for name, g in grads.items():
        if name in acc:
            prev = acc[name]
            acc[name] = nn.Gradients(
                tuple(a + b for a, b in zip(prev.weights, g.weights)),
                tuple(a + b for a, b in zip(prev.biases, g.biases)),
                prev.input,
            )
        else:
            acc[name] = g


def _gain_only_backward(cache, grad):
    """Adjoint with the Kalman gain held constant (gradient stopped through S^-1 and C)."""
    d_innov = grad @ cache.gain
    return grad.copy(), -d_innov, d_innov, np.zeros(cache.S.shape[:-1])


def loss_and_grads(models: DEnKFModels, batch, cfg: TrainConfig, rng, masks=None, init_noise=None):
    """Total loss over one batch of unrolled windows and its gradient for every network.

    ``masks`` / ``init_noise`` replay dropout masks and initial-ensemble noise
    recorded in a previous call (returned in ``aux``), which lets finite
    differences run on an otherwise stochastic objective.
    """
    x0, acts, sens, te, targets = batch
    B, W = acts.shape[:2]
    E = cfg.ensemble_size
    if init_noise is None:
        init_noise = rng.standard_normal((B * E, STATE_DIM))
    X = np.repeat(x0, E, axis=0) + cfg.init_std * init_noise
    te_rows = None if te is None else np.repeat(te, E, axis=0)
    scale = 1.0 / (W * B * STATE_DIM)
    caches = []
    used_masks = []
    total = 0.0
    parts = np.zeros(3)
    for k in range(W):
        m_t, m_s = (None, None) if masks is None else masks[k]
        a_rows = np.repeat(acts[:, k], E, axis=0)
        Xp, tc = models.transition.forward(X, a_rows, te_rows, rng, m_t)
        HX, hc = models.observation.forward(Xp)
        Y, sc = models.sensor.forward(sens[:, k], E, rng, m_s)
        used_masks.append(((tc[0].masks, tc[1].masks), sc[1].masks))
        Xp3, HX3, Y3 = (a.reshape(B, E, STATE_DIM) for a in (Xp, HX, Y))
        ybar = Y3.mean(axis=1)
        R, nc = models.noise.forward(ybar)
        Xu3, kc = kalman_update(Xp3, HX3, Y3, R, cfg.jitter)
        xbar = Xu3.mean(axis=1)
        xpbar = Xp3.mean(axis=1)
        tgt = targets[:, k]
        terms = np.array([
            np.sum((xbar - tgt) ** 2),
            np.sum((xpbar - tgt) ** 2),
            np.sum((ybar - tgt) ** 2),
        ]) * scale
        parts += terms
        total += cfg.lambda_e2e * terms[0] + cfg.lambda_f * terms[1] + cfg.lambda_s * terms[2]
        caches.append((tc, hc, sc, nc, kc, xbar, xpbar, ybar, tgt))
        X = Xu3.reshape(B * E, STATE_DIM)
    if not np.isfinite(total):
        raise TrainingError(f"non-finite loss {total}")

    grads: dict = {}
    dXu = np.zeros((B, E, STATE_DIM))
    for k in range(W - 1, -1, -1):
        tc, hc, sc, nc, kc, xbar, xpbar, ybar, tgt = caches[k]
        dXu = dXu + (2 * scale * cfg.lambda_e2e * (xbar - tgt))[:, None, :] / E
        backward = kalman_update_backward if cfg.grad_through_gain else _gain_only_backward
        dXp, dHX, dY, dR = backward(kc, dXu)
        dXp = dXp + (2 * scale * cfg.lambda_f * (xpbar - tgt))[:, None, :] / E
        g_noise, dybar = models.noise.backward(nc, dR)
        _add(grads, g_noise)
        dybar = dybar + 2 * scale * cfg.lambda_s * (ybar - tgt)
        dY = dY + dybar[:, None, :] / E
        g_sens, _ = models.sensor.backward(sc, dY.reshape(B * E, STATE_DIM))
        _add(grads, g_sens)
        g_obs, dXp_obs = models.observation.backward(hc, dHX.reshape(B * E, STATE_DIM))
        _add(grads, g_obs)
        g_tr, dX = models.transition.backward(tc, dXp.reshape(B * E, STATE_DIM) + dXp_obs)
        _add(grads, g_tr)
        dXu = dX.reshape(B, E, STATE_DIM)
    aux = {"masks": used_masks, "init_noise": init_noise, "parts": parts}
    return total, grads, aux


@dataclass
class TrainState:
    models: DEnKFModels
    adam: dict = field(default_factory=dict)
    epoch: int = 0
    history: list = field(default_factory=list)  # one dict per epoch


def train(
    models: DEnKFModels,
    datasets: Sequence[TrajectoryDataset],
    cfg: TrainConfig,
    state: TrainState | None = None,
    on_epoch: Callable[[TrainState], None] | None = None,
) -> TrainState:
    """Mini-batch Adam on the combined filter loss.

    ``state`` resumes an earlier run; ``on_epoch`` is called with the state
    after each completed epoch (used for checkpointing). On a non-finite loss
    a :class:`TrainingError` is raised whose ``last_good`` attribute holds the
    state at the end of the previous epoch.
    """
    state = state or TrainState(models)
    prep = _prepare(state.models, datasets, cfg.bptt_window)
    n = prep.index.shape[0]
    for epoch in range(state.epoch, cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch, 0x5F]).permutation(n)
        losses, parts = [], []
        current = state.models
        adam = dict(state.adam)
        t0 = time.perf_counter()
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            rows = prep.index[order[start : start + cfg.batch_size]]
            batch = _gather(prep, rows, cfg.bptt_window)
            rng = np.random.default_rng([cfg.seed, epoch, b])
            try:
                loss, grads, aux = loss_and_grads(current, batch, cfg, rng)
                nets = current.networks()
                new_nets = {}
                for name, net in nets.items():
                    new_nets[name], adam[name] = nn.optimizer_step(net, grads[name], cfg.lr, adam.get(name))
            except TrainingError as exc:
                exc.last_good = state
                raise
            except FilterDivergenceError as exc:
                err = TrainingError(f"epoch {epoch + 1}, batch {b}: {exc}")
                err.last_good = state
                raise err from exc
            current = current.with_networks(new_nets)
            losses.append(loss)
            parts.append(aux["parts"])
        p = np.mean(parts, axis=0)
        record = {
            "epoch": epoch + 1,
            "loss": float(np.mean(losses)),
            "loss_e2e": float(p[0]),
            "loss_transition": float(p[1]),
            "loss_sensor": float(p[2]),
        }
        log.info("epoch %d loss %.6f (%.1fs)", record["epoch"], record["loss"], time.perf_counter() - t0)
        state = TrainState(current, adam, epoch + 1, state.history + [record])
        if on_epoch is not None:
            on_epoch(state)
    return state


def save_training_checkpoint(path, state: TrainState, cfg: TrainConfig) -> None:
    """Models plus optimizer moments, epoch counter and loss history, for ``--resume``."""
    arrays = {}
    steps = {}
    for name, st in state.adam.items():
        steps[name] = st.step
        for i, (m, v) in enumerate(zip(st.m, st.v)):
            arrays[f"adam/{name}/m{i}"] = m
            arrays[f"adam/{name}/v{i}"] = v
    extra = {"train_config": cfg.to_dict(), "epoch": state.epoch, "history": state.history, "adam_steps": steps}
    tmp = Path(str(path) + ".tmp.npz")
    save_models(tmp, state.models, extra_meta=extra, extra_arrays=arrays)
    os.replace(tmp, path)


def load_training_checkpoint(path) -> tuple[TrainState, dict]:
    models, meta, arrays = load_models(path, with_arrays=True)
    adam = {}
    for name, step in meta.get("adam_steps", {}).items():
        n = sum(1 for k in arrays if k.startswith(f"adam/{name}/m"))
        adam[name] = nn.AdamState(
            int(step),
            [arrays[f"adam/{name}/m{i}"] for i in range(n)],
            [arrays[f"adam/{name}/v{i}"] for i in range(n)],
        )
    state = TrainState(models, adam, int(meta.get("epoch", 0)), list(meta.get("history", [])))
    return state, meta


# -- evaluation ---------------------------------------------------------------


@dataclass
class EvalReport:
    mae_position: float
    rmse_position: float
    mae_quaternion: float
    wall_clock_per_step: float
    n_steps: int
    per_condition: dict = field(default_factory=dict)

    def as_row(self) -> dict:
        return {
            "mae_position_mm": self.mae_position,
            "rmse_position_mm": self.rmse_position,
            "mae_quaternion": self.mae_quaternion,
            "wall_clock_per_step_s": self.wall_clock_per_step,
            "n_steps": self.n_steps,
        }


def _errors(estimates: np.ndarray, truth: np.ndarray):
    err = estimates - truth
    pos = err[:, :3]
    return np.abs(pos).mean(), np.sqrt((pos**2).mean()), np.abs(err[:, 3:]).mean()


def run_filter(models, ds: TrajectoryDataset, cfg: FilterConfig, init_spread: float = 0.1, missing=None):
    """Filter ``ds`` from an ensemble around its first ground-truth state."""
    init = initial_ensemble(models, ds.ground_truth[0], cfg, init_spread)
    frames = list(ds.frames())[1:]
    return run_sequence(init, frames, models, cfg, missing=missing)


def condition_key(ds: TrajectoryDataset) -> str:
    return f"{ds.placement}@{int(ds.sampling_frequency)}Hz"


def evaluate(models, datasets, cfg: FilterConfig, init_spread: float = 0.1) -> EvalReport:
    """Filter each dataset and score updated means against ground truth.

    Position errors are per-coordinate absolute errors in mm; the quaternion
    error averages the four components.
    """
    if isinstance(datasets, TrajectoryDataset):
        datasets = [datasets]
    all_est, all_true, per = [], [], {}
    elapsed, steps = 0.0, 0
    for ds in datasets:
        t0 = time.perf_counter()
        traj = run_filter(models, ds, cfg, init_spread)
        elapsed += time.perf_counter() - t0
        steps += len(traj)
        est, truth = traj.updated_means, ds.ground_truth[1:]
        all_est.append(est)
        all_true.append(truth)
        mae, rmse, q = _errors(est, truth)
        key = condition_key(ds)
        per.setdefault(key, []).append((mae, rmse, q, len(traj)))
    est = np.concatenate(all_est)
    truth = np.concatenate(all_true)
    mae, rmse, q = _errors(est, truth)
    per_condition = {}
    for key, items in per.items():
        w = np.array([it[3] for it in items], dtype=float)
        vals = np.array([it[:3] for it in items])
        per_condition[key] = dict(zip(("mae_position", "rmse_position", "mae_quaternion"), (vals * w[:, None]).sum(0) / w.sum()))
    return EvalReport(float(mae), float(rmse), float(q), elapsed / max(steps, 1), int(steps), per_condition)


@dataclass
class CrossValidationReport:
    folds: list
    mean: dict
    stderr: dict

    def format_row(self, label: str = "DEnKF") -> str:
        """Table-style ``mean±stderr`` cells for position MAE, quaternion MAE, position RMSE."""
        cells = [
            f"{self.mean['mae_position']:.4f}±{self.stderr['mae_position']:.3f}",
            f"{self.mean['mae_quaternion']:.4f}±{self.stderr['mae_quaternion']:.3f}",
            f"{self.mean['rmse_position']:.4f}±{self.stderr['rmse_position']:.3f}",
        ]
        return " | ".join([label] + cells)


def fold_indices(n_segments: int, folds: int) -> list[np.ndarray]:
    """Contiguous blocks of segment indices, one block per fold."""
    if folds < 2:
        raise InvalidArgumentError("need at least 2 folds")
    if n_segments < folds:
        raise InvalidArgumentError(f"{folds} folds need at least {folds} segments, got {n_segments}")
    return [b for b in np.array_split(np.arange(n_segments), folds)]


def summarize(reports: Sequence[EvalReport]) -> tuple[dict, dict]:
    keys = ("mae_position", "rmse_position", "mae_quaternion", "wall_clock_per_step")
    vals = {k: np.array([getattr(r, k) for r in reports]) for k in keys}
    n = len(reports)
    mean = {k: float(v.mean()) for k, v in vals.items()}
    stderr = {k: float(v.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0 for k, v in vals.items()}
    return mean, stderr


def crossvalidate(
    factory: Callable[[list], DEnKFModels],
    segments: Sequence[TrajectoryDataset],
    folds: int,
    cfg: FilterConfig,
) -> CrossValidationReport:
    """K-fold over contiguous blocks of segments (no shuffling across time).

    ``factory(train_segments)`` returns trained models for one fold; the
    held-out block is scored with :func:`evaluate`.
    """
    segments = list(segments)
    reports = []
    for held in fold_indices(len(segments), folds):
        held_set = set(held.tolist())
        train_segs = [s for i, s in enumerate(segments) if i not in held_set]
        models = factory(train_segs)
        reports.append(evaluate(models, [segments[i] for i in held], cfg))
    mean, stderr = summarize(reports)
    return CrossValidationReport(reports, mean, stderr)


def block_evaluate(models, ds: TrajectoryDataset, folds: int, cfg: FilterConfig) -> CrossValidationReport:
    """Score a trained model on ``folds`` contiguous time blocks of one dataset."""
    blocks = ds.split(folds)
    reports = [evaluate(models, b, cfg) for b in blocks]
    mean, stderr = summarize(reports)
    return CrossValidationReport(reports, mean, stderr)
