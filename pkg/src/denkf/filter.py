"""Differentiable ensemble Kalman filter recursion.

Ensemble members are rows. With ``X`` (E x D) the predicted ensemble, ``HX``
(E x O) its images under the observation model, ``Y`` (E x O) learned
observations sampled from the sensor model and ``r`` (O,) the noise
variances, one update is::

    A  = X  - mean(X)          HA = HX - mean(HX)
    S  = HA^T HA / (E-1) + diag(r) + jitter*I
    K  = A^T HA / (E-1) S^-1
    X' = X + (Y - HX) K^T

:func:`kalman_update` works on stacks with any leading batch shape and keeps
what :func:`kalman_update_backward` needs for the adjoint. Any model bundle
exposing ``propagate``, ``observe_ensemble``, ``sense_ensemble``,
``noise_variance``, ``decode_state`` and ``expose`` can drive the recursion.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import FilterDivergenceError, InvalidArgumentError
from .types import Ensemble, ObservationFrame

TRANSITION_STREAM = 0
SENSOR_STREAM = 1


@dataclass(frozen=True)
class FilterConfig:
    ensemble_size: int = 32
    jitter: float = 1e-6
    max_jitter: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if self.ensemble_size < 2:
            raise InvalidArgumentError("ensemble_size must be >= 2")
        if self.jitter <= 0:
            raise InvalidArgumentError("jitter must be positive")
        if self.seed < 0:
            raise InvalidArgumentError("seed must be non-negative")


@dataclass(frozen=True)
class KalmanCache:
    X: np.ndarray
    HX: np.ndarray
    Y: np.ndarray
    A: np.ndarray
    HA: np.ndarray
    C: np.ndarray  # cross covariance A^T HA / (E-1), shape (..., D, O)
    S: np.ndarray
    S_inv: np.ndarray
    innovation: np.ndarray  # per-member Y - HX
    W: np.ndarray  # innovation @ S^-1
    gain: np.ndarray  # (..., D, O)
    jitter: np.ndarray


@dataclass(frozen=True)
class UpdateDiagnostics:
    innovation_covariance: np.ndarray
    kalman_gain: np.ndarray
    predicted_obs_mean: np.ndarray
    noise_diag: np.ndarray
    jitter_used: float = 0.0


def _sym(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def _cholesky_inverse(S, jitter: float, max_jitter: float):
    """Invert SPD ``S`` via Cholesky, escalating diagonal jitter tenfold on failure."""
    eye = np.eye(S.shape[-1])
    j = jitter
    while True:
        Sj = S + j * eye if j > 0 else S
        try:
            L = np.linalg.cholesky(Sj)
        except np.linalg.LinAlgError:
            L = None
        if L is not None and np.all(np.isfinite(L)):
            L_inv = np.linalg.inv(L)
            S_inv = np.swapaxes(L_inv, -1, -2) @ L_inv
            # one refinement step recovers the last ulp lost in the two triangular inverses
            S_inv = S_inv + S_inv @ (eye - Sj @ S_inv)
            return Sj, _sym(S_inv), j
        j = max(j, 1e-9) * 10.0
        if j > max_jitter * (1 + 1e-12):
            raise FilterDivergenceError(
                f"innovation covariance not positive definite with jitter up to {max_jitter}",
                diagnostics={"innovation_covariance": S},
            )


def kalman_update(X, HX, Y, noise_var, jitter: float = 0.0, max_jitter: float = 1e-2):
    """Ensemble Kalman update; returns ``(X_updated, cache)``.

    Leading dimensions beyond the last two are batch dimensions. Jitter is
    escalated per batch item when a factorization fails.
    """
    X = np.asarray(X, dtype=np.float64)
    HX = np.asarray(HX, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    r = np.asarray(noise_var, dtype=np.float64)
    E = X.shape[-2]
    if E < 2:
        raise InvalidArgumentError("ensemble update needs at least 2 members")
    if HX.shape != Y.shape or HX.shape[:-1] != X.shape[:-1]:
        raise InvalidArgumentError(f"shape mismatch: X {X.shape}, HX {HX.shape}, Y {Y.shape}")
    A = X - X.mean(axis=-2, keepdims=True)
    HA = HX - HX.mean(axis=-2, keepdims=True)
    HAt = np.swapaxes(HA, -1, -2)
    S0 = _sym(HAt @ HA) / (E - 1)
    S0 = S0 + r[..., None, :] * np.eye(HX.shape[-1])
    batch = S0.shape[:-2]
    try:
        S, S_inv, j = _cholesky_inverse(S0, jitter, max_jitter)
        jit = np.full(batch, j)
    except FilterDivergenceError:
        if not batch:
            raise
        flat = S0.reshape(-1, *S0.shape[-2:])
        parts = [_cholesky_inverse(s, jitter, max_jitter) for s in flat]
        S = np.stack([p[0] for p in parts]).reshape(S0.shape)
        S_inv = np.stack([p[1] for p in parts]).reshape(S0.shape)
        jit = np.array([p[2] for p in parts]).reshape(batch)
    C = np.swapaxes(A, -1, -2) @ HA / (E - 1)
    gain = C @ S_inv
    innovation = Y - HX
    W = innovation @ S_inv
    X_new = X + W @ np.swapaxes(C, -1, -2)
    return X_new, KalmanCache(X, HX, Y, A, HA, C, S, S_inv, innovation, W, gain, jit)


def kalman_update_backward(cache: KalmanCache, grad):
    """Adjoint of :func:`kalman_update`: returns ``(dX, dHX, dY, dnoise_var)``.

    Uses the Cholesky-derived ``S^-1`` held in the cache, so no extra
    factorization is needed.
    """
    G = np.asarray(grad, dtype=np.float64)
    E = cache.X.shape[-2]
    T = lambda M: np.swapaxes(M, -1, -2)  # noqa: E731
    dX = G.copy()
    dW = G @ cache.C
    dC = T(G) @ cache.W
    d_innov = dW @ cache.S_inv
    dS = -T(cache.W) @ d_innov
    dS_sym = _sym(dS)
    d_noise = np.diagonal(dS, axis1=-2, axis2=-1).copy()
    dHA = 2.0 * cache.HA @ dS_sym / (E - 1)
    dHA += cache.A @ dC / (E - 1)
    dA = cache.HA @ T(dC) / (E - 1)
    dY = d_innov
    dHX = -d_innov + dHA - dHA.mean(axis=-2, keepdims=True)
    dX += dA - dA.mean(axis=-2, keepdims=True)
    return dX, dHX, dY, d_noise


def member_rngs(seed: int, step: int, stream: int, n: int) -> list[np.random.Generator]:
    """Independent generators keyed by (run seed, step, stream, member index)."""
    return [np.random.default_rng([seed, step, stream, i]) for i in range(n)]


@dataclass(frozen=True)
class FilterState:
    ensemble: Ensemble
    step_index: int
    last_innovation: np.ndarray
    predicted_mean: np.ndarray
    updated_mean: np.ndarray


def initial_state(init: Ensemble, models) -> FilterState:
    mean = models.expose(init.mean())
    return FilterState(init, 0, np.zeros(init.dim), mean, mean)


def initial_ensemble(models, x0, cfg: FilterConfig, spread: float = 0.1) -> Ensemble:
    """Members drawn around a raw-unit state ``x0``: ``encode(x0) + N(0, spread^2)`` in model coordinates."""
    rng = np.random.default_rng([cfg.seed, 0x1A17])
    center = models.encode_state(np.asarray(x0, dtype=np.float64))
    return Ensemble(center + spread * rng.standard_normal((cfg.ensemble_size, center.shape[-1])))


def predict(fs: FilterState, action, f, models, cfg: FilterConfig) -> FilterState:
    """Propagate every member through the stochastic transition model."""
    E = fs.ensemble.ensemble_size
    rngs = member_rngs(cfg.seed, fs.step_index, TRANSITION_STREAM, E)
    X = models.propagate(fs.ensemble.members, action, f, rngs)
    if X.shape != fs.ensemble.members.shape:
        raise InvalidArgumentError(f"transition output shape {X.shape} != ensemble shape {fs.ensemble.members.shape}")
    ens = Ensemble(X)
    return replace(fs, ensemble=ens, predicted_mean=models.expose(ens.mean()))


def update(fs: FilterState, raw, z, models, cfg: FilterConfig):
    """Correct the predicted ensemble with one raw observation; advances ``step_index``."""
    X = fs.ensemble.members
    E = X.shape[0]
    HX = models.observe_ensemble(X)
    rngs = member_rngs(cfg.seed, fs.step_index, SENSOR_STREAM, E)
    Y = models.sense_ensemble(raw, z, rngs)
    if Y.shape != HX.shape:
        raise InvalidArgumentError(f"sensor output shape {Y.shape} != predicted observation shape {HX.shape}")
    ybar = Y.mean(axis=0)
    r = models.noise_variance(ybar)
    try:
        X_new, cache = kalman_update(X, HX, Y, r, cfg.jitter, cfg.max_jitter)
    except FilterDivergenceError as exc:
        exc.diagnostics = {**(exc.diagnostics or {}), "step_index": fs.step_index, "noise_diag": r}
        raise
    ens = Ensemble(X_new)
    diag = UpdateDiagnostics(cache.S, cache.gain, HX.mean(axis=0), r, float(cache.jitter))
    new = FilterState(
        ensemble=ens,
        step_index=fs.step_index + 1,
        last_innovation=ybar - HX.mean(axis=0),
        predicted_mean=fs.predicted_mean,
        updated_mean=models.expose(ens.mean()),
    )
    return new, diag


def skip_update(fs: FilterState) -> FilterState:
    """Close a step without an observation: the prediction stands as the estimate."""
    return replace(fs, step_index=fs.step_index + 1, updated_mean=fs.predicted_mean)


@dataclass(frozen=True)
class StepRecord:
    step: int
    timestamp: float
    predicted_mean: np.ndarray
    updated_mean: np.ndarray
    ensemble_std: np.ndarray
    innovation: np.ndarray  # NaN when the step had no observation
    diagnostics: UpdateDiagnostics | None
    observed: bool


@dataclass
class Trajectory:
    records: list[StepRecord] = field(default_factory=list)
    final_state: FilterState | None = None

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def _stack(self, attr: str) -> np.ndarray:
        if not self.records:
            return np.zeros((0, 0))
        return np.stack([getattr(r, attr) for r in self.records])

    @property
    def predicted_means(self) -> np.ndarray:
        return self._stack("predicted_mean")

    @property
    def updated_means(self) -> np.ndarray:
        return self._stack("updated_mean")

    @property
    def ensemble_stds(self) -> np.ndarray:
        return self._stack("ensemble_std")

    @property
    def innovations(self) -> np.ndarray:
        return self._stack("innovation")

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([r.timestamp for r in self.records])

    @property
    def observed(self) -> np.ndarray:
        return np.array([r.observed for r in self.records], dtype=bool)

    def to_csv(self, path) -> None:
        """Delimited export: step, timestamp, predicted mean, updated mean, ensemble std, innovation."""
        dim = self.records[0].predicted_mean.shape[0] if self.records else 7
        header = ["step", "timestamp"]
        for prefix in ("pred", "upd", "std", "innov"):
            header += [f"{prefix}_{i}" for i in range(dim)]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in self.records:
                row = [r.step, repr(r.timestamp)]
                for vec in (r.predicted_mean, r.updated_mean, r.ensemble_std, r.innovation):
                    row += [repr(float(v)) for v in vec]
                w.writerow(row)


def _check_order(frames: Sequence[ObservationFrame]):
    ts = [fr.timestamp for fr in frames]
    for k in range(1, len(ts)):
        if not ts[k] > ts[k - 1]:
            raise InvalidArgumentError(f"frame {k} timestamp {ts[k]} does not follow {ts[k - 1]}")


def run_sequence(init: Ensemble, frames: Sequence[ObservationFrame], models, cfg: FilterConfig,
                 missing: Sequence[bool] | None = None) -> Trajectory:
    """Alternate predict/update over ``frames``.

    A frame whose ``raw_obs`` is None, or whose entry in ``missing`` is true,
    runs the prediction step only.
    """
    frames = list(frames)
    _check_order(frames)
    if missing is not None and len(missing) != len(frames):
        raise InvalidArgumentError(f"mask length {len(missing)} != frame count {len(frames)}")
    fs = initial_state(init, models)
    traj = Trajectory()
    for k, fr in enumerate(frames):
        fs = predict(fs, fr.action, fr.frequency, models, cfg)
        skip = fr.raw_obs is None or (missing is not None and bool(missing[k]))
        if skip:
            fs = skip_update(fs)
            diag = None
            innov = np.full(fs.ensemble.dim, np.nan)
        else:
            fs, diag = update(fs, fr.raw_obs, fr.placement, models, cfg)
            innov = fs.last_innovation
        std = models.decode_state(fs.ensemble.members).std(axis=0, ddof=1)
        traj.records.append(
            StepRecord(fs.step_index - 1, fr.timestamp, fs.predicted_mean, fs.updated_mean, std, innov, diag, not skip)
        )
    traj.final_state = fs
    return traj
