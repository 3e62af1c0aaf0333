"""Domain vocabulary: robot states, actions, observations, placements, ensembles.

All value types are frozen dataclasses over float64 arrays and expose
``__array__`` so they can be handed to numpy directly.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError

STATE_DIM = 7
ACTION_DIM = 40
NUM_IMUS = 5
IMU_CHANNELS = 6
RAW_OBS_DIM = NUM_IMUS * IMU_CHANNELS
NUM_LOCATIONS = 20
QUAT_SLICE = slice(3, 7)
IDENTITY_QUAT = np.array([0.0, 0.0, 0.0, 1.0])


def as_vector(x, length: int | None = None, name: str = "vector") -> np.ndarray:
    """Coerce ``x`` to a finite 1-D float64 array, optionally of fixed length."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidArgumentError(f"{name} must be 1-D, got shape {arr.shape}")
    if length is not None and arr.shape[0] != length:
        raise InvalidArgumentError(f"{name} must have length {length}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite entries")
    return arr


def normalize_quaternion(q: np.ndarray) -> np.ndarray:
    """Scale ``q`` (last axis of length 4) to unit norm; near-zero rows map to identity."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    safe = norm > 1e-12
    out = np.where(safe, q / np.where(safe, norm, 1.0), IDENTITY_QUAT)
    return out


def renormalize_state(x: np.ndarray) -> np.ndarray:
    """Return a copy of a 7-vector (or stack) with its quaternion part made unit-norm."""
    x = np.array(x, dtype=np.float64, copy=True)
    x[..., QUAT_SLICE] = normalize_quaternion(x[..., QUAT_SLICE])
    return x


@dataclass(frozen=True)
class RobotState:
    """End-effector pose: position in millimetres and unit quaternion (qx, qy, qz, qw)."""

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        pos = as_vector(self.position, 3, "position")
        quat = as_vector(self.orientation, 4, "orientation")
        norm = np.linalg.norm(quat)
        if norm < 1e-12:
            raise InvalidArgumentError("orientation quaternion has zero norm")
        if abs(norm - 1.0) > 1e-6:
            quat = quat / norm
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "orientation", quat)

    @classmethod
    def from_vector(cls, v) -> RobotState:
        v = as_vector(v, STATE_DIM, "state")
        return cls(v[:3], v[3:])

    @classmethod
    def rest(cls) -> RobotState:
        return cls(np.zeros(3), IDENTITY_QUAT.copy())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.orientation])

    def __array__(self, dtype=None, copy=None):
        return self.to_vector().astype(dtype or np.float64)


@dataclass(frozen=True)
class Action:
    """Normalized pressure commands for the 40 pneumatic cylinders."""

    pressures: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pressures", as_vector(self.pressures, ACTION_DIM, "action"))

    def __array__(self, dtype=None, copy=None):
        return self.pressures.astype(dtype or np.float64)


@dataclass(frozen=True)
class RawObservation:
    """Five IMUs, each contributing 3 accelerations and 3 angular velocities."""

    imu: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "imu", as_vector(self.imu, RAW_OBS_DIM, "raw observation"))

    def __array__(self, dtype=None, copy=None):
        return self.imu.astype(dtype or np.float64)


@dataclass(frozen=True)
class LearnedObservation:
    """Sensor-model output, laid out like :class:`RobotState`."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", as_vector(self.values, STATE_DIM, "learned observation"))

    def __array__(self, dtype=None, copy=None):
        return self.values.astype(dtype or np.float64)


@dataclass(frozen=True)
class PlacementSet:
    """Mounting locations of the five IMUs, stored in sorted canonical form."""

    labels: tuple[int, ...]

    def __post_init__(self):
        try:
            labels = tuple(sorted(int(v) for v in self.labels))
        except (TypeError, ValueError) as exc:
            raise InvalidArgumentError(f"placement labels must be integers: {self.labels!r}") from exc
        if len(labels) != NUM_IMUS:
            raise InvalidArgumentError(f"placement needs exactly {NUM_IMUS} labels, got {len(labels)}")
        if len(set(labels)) != NUM_IMUS:
            raise InvalidArgumentError(f"placement labels must be distinct: {labels}")
        if labels[0] < 1 or labels[-1] > NUM_LOCATIONS:
            raise InvalidArgumentError(f"placement labels must lie in [1, {NUM_LOCATIONS}]: {labels}")
        object.__setattr__(self, "labels", labels)

    def to_json(self) -> str:
        return json.dumps(list(self.labels))

    @classmethod
    def from_json(cls, text: str) -> PlacementSet:
        return cls(tuple(json.loads(text)))

    def __str__(self):
        return "[" + ",".join(str(v) for v in self.labels) + "]"


class SamplingFrequency(enum.IntEnum):
    """Supported sampling rates in Hz; ``index`` is the ordinal used for embedding."""

    HZ5 = 5
    HZ10 = 10
    HZ30 = 30
    HZ50 = 50

    @property
    def index(self) -> int:
        return _FREQ_ORDER.index(self)

    @property
    def period(self) -> float:
        return 1.0 / int(self)

    @classmethod
    def parse(cls, value) -> SamplingFrequency:
        try:
            return cls(int(value))
        except (TypeError, ValueError) as exc:
            allowed = ", ".join(str(int(f)) for f in cls)
            raise InvalidArgumentError(f"sampling frequency must be one of {{{allowed}}}, got {value!r}") from exc


_FREQ_ORDER = [SamplingFrequency.HZ5, SamplingFrequency.HZ10, SamplingFrequency.HZ30, SamplingFrequency.HZ50]


@dataclass(frozen=True)
class Ensemble:
    """E state hypotheses stored row-wise as an ``E x D`` matrix."""

    members: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.members, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] == 0:
            raise InvalidArgumentError(f"ensemble members must be a non-empty E x D matrix, got shape {m.shape}")
        if m.shape[0] < 2:
            raise InvalidArgumentError("ensemble needs at least 2 members")
        if not np.all(np.isfinite(m)):
            raise InvalidArgumentError("ensemble contains non-finite members")
        m.setflags(write=False)
        object.__setattr__(self, "members", m)

    @property
    def ensemble_size(self) -> int:
        return self.members.shape[0]

    @property
    def dim(self) -> int:
        return self.members.shape[1]

    def mean(self) -> np.ndarray:
        return self.members.mean(axis=0)

    def std(self) -> np.ndarray:
        return self.members.std(axis=0, ddof=1)


def ensemble_mean(ens: Ensemble) -> RobotState:
    """Point estimate of a 7-dim ensemble, quaternion renormalized."""
    if ens.members.size == 0:
        raise InvalidArgumentError("empty ensemble")
    if ens.dim != STATE_DIM:
        raise InvalidArgumentError(f"ensemble_mean needs {STATE_DIM}-dim members, got {ens.dim}")
    return RobotState.from_vector(renormalize_state(ens.mean()))


def anomaly_matrix(ens: Ensemble) -> np.ndarray:
    """Members minus the raw (unnormalized) ensemble mean."""
    return ens.members - ens.mean()


@dataclass(frozen=True)
class ObservationFrame:
    """One time step of input data.

    ``raw_obs`` is ``None`` when the observation is unavailable; the filter then
    runs the prediction step only.
    """

    timestamp: float
    action: np.ndarray
    raw_obs: np.ndarray | None
    placement: PlacementSet
    frequency: SamplingFrequency
    ground_truth: np.ndarray | None = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "action", as_vector(self.action, ACTION_DIM, "action"))
        if self.raw_obs is not None:
            object.__setattr__(self, "raw_obs", as_vector(self.raw_obs, RAW_OBS_DIM, "raw observation"))
        if self.ground_truth is not None:
            object.__setattr__(self, "ground_truth", as_vector(self.ground_truth, STATE_DIM, "ground truth"))
        object.__setattr__(self, "frequency", SamplingFrequency.parse(self.frequency))
