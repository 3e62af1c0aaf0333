"""Forward-only estimation under missing observations and virtual-force detection."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, InvalidArgumentError
from .filter import FilterConfig, Trajectory, run_sequence
from .types import STATE_DIM, Ensemble, ObservationFrame

DEFAULT_WINDOW_FRACTIONS = (0.125, 0.0625)
DEFAULT_P = 10.0
DEFAULT_PERCENTILE = 99.0


@dataclass(frozen=True)
class MissingMask:
    """Per-frame flags; True means the observation is unavailable."""

    flags: np.ndarray

    def __post_init__(self):
        flags = np.asarray(self.flags, dtype=bool)
        if flags.ndim != 1:
            raise InvalidArgumentError("missing mask must be 1-D")
        flags.setflags(write=False)
        object.__setattr__(self, "flags", flags)

    def __len__(self):
        return self.flags.shape[0]

    def __getitem__(self, k):
        return self.flags[k]

    @property
    def fraction(self) -> float:
        return float(self.flags.mean()) if len(self) else 0.0

    def windows(self) -> list[tuple[int, int]]:
        return _intervals(self.flags)

    @classmethod
    def none(cls, n: int) -> MissingMask:
        return cls(np.zeros(n, dtype=bool))

    @classmethod
    def window(cls, n: int, start: int, length: int) -> MissingMask:
        if length < 0 or start < 0 or start + length > n:
            raise InvalidArgumentError(f"window [{start}, {start + length}) does not fit {n} frames")
        flags = np.zeros(n, dtype=bool)
        flags[start : start + length] = True
        return cls(flags)

    @classmethod
    def random_window(cls, n: int, fraction: float, rng: np.random.Generator, margin: int = 0) -> MissingMask:
        """One contiguous masked window covering ``fraction`` of the frames.

        ``margin`` frames are kept observed on both sides so there is a
        baseline before the gap and a recovery period after it.
        """
        if not 0 < fraction < 1:
            raise InvalidArgumentError(f"fraction must be in (0, 1), got {fraction}")
        length = max(1, int(round(fraction * n)))
        hi = n - length - margin
        if hi < margin:
            raise InvalidArgumentError(f"{n} frames too short for a {length}-frame window with margin {margin}")
        start = int(rng.integers(margin, hi + 1))
        return cls.window(n, start, length)


def run_with_missing(init: Ensemble, frames: Sequence[ObservationFrame], mask: MissingMask, models,
                     cfg: FilterConfig) -> Trajectory:
    """Filter with the transition model alone on masked frames."""
    frames = list(frames)
    if len(mask) != len(frames):
        raise InvalidArgumentError(f"mask length {len(mask)} != frame count {len(frames)}")
    return run_sequence(init, frames, models, cfg, missing=mask.flags)


def minkowski_delta(updated, predicted, p: float = DEFAULT_P, weights=None):
    """Minkowski-``p`` distance between updated and predicted states in raw units.

    Works row-wise on stacked states. ``weights`` scales each channel of the
    difference before the norm (all ones by default).
    """
    if not p >= 1:
        raise InvalidArgumentError(f"p must be >= 1, got {p}")
    diff = np.asarray(updated, dtype=np.float64) - np.asarray(predicted, dtype=np.float64)
    if weights is not None:
        diff = diff * np.asarray(weights, dtype=np.float64)
    a = np.abs(diff)
    # scale by the max before powering so p = 10 on mm-sized values cannot overflow
    peak = a.max(axis=-1, keepdims=True)
    safe = np.where(peak > 0, peak, 1.0)
    out = peak[..., 0] * np.sum((a / safe) ** p, axis=-1) ** (1.0 / p)
    return float(out) if np.ndim(out) == 0 else out


def _intervals(flags: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of True as half-open ``(start, stop)`` index pairs."""
    padded = np.concatenate([[False], np.asarray(flags, dtype=bool), [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return [(int(a), int(b)) for a, b in zip(edges[::2], edges[1::2])]


@dataclass(frozen=True)
class ForceTrace:
    delta: np.ndarray
    threshold: float
    alarms: list = field(default_factory=list)  # half-open step intervals
    p: float = DEFAULT_P

    @property
    def flags(self) -> np.ndarray:
        return self.delta > self.threshold

    @property
    def alarm_rate(self) -> float:
        return float(self.flags.mean()) if self.delta.size else 0.0

    def to_csv(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "delta", "alarm"])
            for k, (d, a) in enumerate(zip(self.delta, self.flags)):
                w.writerow([k, repr(float(d)), int(a)])
        os.replace(tmp, path)


@dataclass(frozen=True)
class ForceCalibration:
    threshold: float
    median: float
    percentile: float
    p: float
    n_steps: int


def trace_deltas(traj: Trajectory, p: float = DEFAULT_P, weights=None) -> np.ndarray:
    upd, pred = traj.updated_means, traj.predicted_means
    if upd.shape[-1] != STATE_DIM or upd.shape != pred.shape:
        raise InvalidArgumentError("trajectory must hold predicted and updated means for every step")
    return np.atleast_1d(minkowski_delta(upd, pred, p, weights))


def calibrate_forces(traj: Trajectory, p: float = DEFAULT_P, percentile: float = DEFAULT_PERCENTILE,
                     weights=None) -> ForceCalibration:
    """Threshold from a force-free run: the given percentile of its deltas."""
    if not 0 < percentile <= 100:
        raise InvalidArgumentError(f"percentile must be in (0, 100], got {percentile}")
    d = trace_deltas(traj, p, weights)
    if d.size == 0:
        raise InvalidArgumentError("calibration run has no steps")
    # an order statistic rather than an interpolated value, so at most (100 - percentile)% of
    # the calibration run exceeds it
    thr = float(np.percentile(d, percentile, method="higher"))
    return ForceCalibration(thr, float(np.median(d)), percentile, p, int(d.size))


def detect_forces(traj: Trajectory, calibration: ForceCalibration | None, p: float | None = None,
                  weights=None) -> ForceTrace:
    """Per-step deltas and alarm intervals above the calibrated threshold."""
    if calibration is None:
        raise ConfigError("force detection needs a calibration run (none supplied)")
    p = calibration.p if p is None else p
    d = trace_deltas(traj, p, weights)
    return ForceTrace(d, calibration.threshold, _intervals(d > calibration.threshold), p)
