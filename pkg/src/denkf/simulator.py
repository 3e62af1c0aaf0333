"""Synthetic soft-arm data generator.

Stands in for the physical five-layer tensegrity arm. A 4-dim latent
configuration (two bend angles, a bend-coupled extension fraction and a twist) follows
critically damped second-order dynamics toward a target set by a fixed
nonlinear projection of the 40 pressures. The end-effector pose comes from a
constant-curvature backbone. Each of the 20 mounting locations carries an
IMU-like sensor: specific force (gravity plus backbone acceleration, in g) and
body angular rate, rotated into the strut frame, plus a location-specific
linear mixing of latent pose/rates and Gaussian noise.

All simulation runs on a 600 Hz internal grid so the four supported sampling
rates observe the same latent trajectory for a given seed.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .datasets import TrajectoryDataset
from .errors import ConfigError, InvalidArgumentError
from .types import (
    ACTION_DIM,
    IMU_CHANNELS,
    NUM_LOCATIONS,
    PlacementSet,
    SamplingFrequency,
)

GENERATOR_VERSION = "synthetic-arm/1"
INTERNAL_RATE_HZ = 600
LATENT_DIM = 4
MM_PER_G = 9810.0

CANONICAL_PLACEMENTS = {
    "D1": PlacementSet((1, 4, 9, 14, 18)),
    "D2": PlacementSet((1, 5, 9, 15, 19)),
    "D3": PlacementSet((2, 6, 10, 15, 19)),
    "D4": PlacementSet((2, 6, 10, 16, 20)),
    "D5": PlacementSet((2, 6, 10, 13, 17)),
    "D6": PlacementSet((3, 7, 11, 14, 18)),
    "D7": PlacementSet((3, 7, 11, 16, 20)),
    "D8": PlacementSet((4, 8, 12, 16, 20)),
    "D9": PlacementSet((4, 8, 12, 14, 18)),
    "D10": PlacementSet((4, 8, 12, 15, 19)),
}
# A second set that also carries the D5 label; not generated by default.
ALTERNATE_D5_PLACEMENT = PlacementSet((3, 7, 11, 13, 17))


@dataclass(frozen=True)
class SyntheticArmConfig:
    layers: int = 5
    seed: int = 7
    layer_length_mm: float = 150.0
    bend_gain: float = 0.6
    twist_gain: float = 0.5
    extension_gain: float = 0.1
    natural_freq: float = 4.0
    hold_min_s: float = 2.0
    hold_max_s: float = 5.0
    noise_std_obs: float = 0.02
    mixing_scale: float = 0.3
    projection: np.ndarray = field(init=False, repr=False, compare=False)
    placement_response: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError("layers: must be >= 1")
        if self.layer_length_mm <= 0:
            raise ConfigError("layer_length_mm: must be positive")
        if self.natural_freq <= 0:
            raise ConfigError("natural_freq: must be positive")
        if not 0 < self.hold_min_s <= self.hold_max_s:
            raise ConfigError("hold_min_s/hold_max_s: need 0 < hold_min_s <= hold_max_s")
        if self.noise_std_obs < 0:
            raise ConfigError("noise_std_obs: must be non-negative")
        rng = np.random.default_rng([self.seed, 0xA7])
        proj = rng.normal(size=(LATENT_DIM, ACTION_DIM)) * (3.5 / np.sqrt(ACTION_DIM))
        response = rng.normal(size=(NUM_LOCATIONS, IMU_CHANNELS, 2 * LATENT_DIM))
        object.__setattr__(self, "projection", proj)
        object.__setattr__(self, "placement_response", response)

    @property
    def rest_length_mm(self) -> float:
        return self.layers * self.layer_length_mm

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("projection", None)
        d.pop("placement_response", None)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticArmConfig:
        known = {k for k in cls.__dataclass_fields__ if cls.__dataclass_fields__[k].init}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown arm config field(s): {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def _action_schedule(cfg: SyntheticArmConfig, n_steps: int, rng: np.random.Generator):
    """Piecewise-constant pressures on the internal grid and the switch times."""
    actions = np.empty((n_steps, ACTION_DIM))
    switches = []
    k = 0
    while k < n_steps:
        hold = rng.uniform(cfg.hold_min_s, cfg.hold_max_s)
        n_hold = max(1, int(round(hold * INTERNAL_RATE_HZ)))
        actions[k : k + n_hold] = rng.uniform(0.0, 1.0, size=ACTION_DIM)
        switches.append(k / INTERNAL_RATE_HZ)
        k += n_hold
    return actions, switches


def _latent_rollout(cfg: SyntheticArmConfig, actions: np.ndarray):
    drive = np.tanh((actions - 0.5) @ cfg.projection.T)
    targets = np.empty_like(drive)
    targets[:, :2] = cfg.bend_gain * drive[:, :2]
    # the backbone shortens as it bends; extension has no independent drive
    targets[:, 2] = -cfg.extension_gain * (targets[:, 0] ** 2 + targets[:, 1] ** 2)
    targets[:, 3] = cfg.twist_gain * drive[:, 3]
    dt = 1.0 / INTERNAL_RATE_HZ
    w = cfg.natural_freq
    q = np.zeros(LATENT_DIM)
    qd = np.zeros(LATENT_DIM)
    qs = np.empty_like(targets)
    qds = np.empty_like(targets)
    for k in range(targets.shape[0]):
        qdd = w * w * (targets[k] - q) - 2.0 * w * qd
        qd = qd + dt * qdd
        q = q + dt * qd
        qs[k] = q
        qds[k] = qd
    return qs, qds


def _backbone(cfg: SyntheticArmConfig, q: np.ndarray, s: float):
    """Position (mm) and orientation at arc fraction ``s`` for latent rows ``q``."""
    bend = q[:, :2]
    theta = np.linalg.norm(bend, axis=1)
    length = cfg.rest_length_mm * (1.0 + q[:, 2])
    safe = theta > 1e-9
    axis = np.zeros((q.shape[0], 3))
    axis[safe, :2] = bend[safe] / theta[safe, None]
    a = theta * s
    # small-angle limits of sin(a)/theta and (1 - cos a)/theta
    along = np.where(safe, np.sin(a) / np.where(safe, theta, 1.0), s)
    across = np.where(safe, (1.0 - np.cos(a)) / np.where(safe, theta, 1.0), 0.0)
    side = np.stack([axis[:, 1], -axis[:, 0], np.zeros(q.shape[0])], axis=1)
    pos = length[:, None] * (along[:, None] * np.array([0.0, 0.0, 1.0]) + across[:, None] * side)
    rot = Rotation.from_rotvec(axis * a[:, None]) * Rotation.from_rotvec(
        np.stack([np.zeros_like(a), np.zeros_like(a), q[:, 3] * s], axis=1)
    )
    return pos, rot


def _imu_readings(cfg: SyntheticArmConfig, q: np.ndarray, qd: np.ndarray, label: int) -> np.ndarray:
    layer = (label - 1) // 4
    strut = (label - 1) % 4
    s = (layer + 0.5) / cfg.layers
    pos, rot = _backbone(cfg, q, s)
    sensor = rot * Rotation.from_rotvec([0.0, 0.0, strut * np.pi / 2.0])
    dt = 1.0 / INTERNAL_RATE_HZ
    acc = np.gradient(np.gradient(pos, dt, axis=0), dt, axis=0) / MM_PER_G
    specific_force = sensor.inv().apply(acc + np.array([0.0, 0.0, 1.0]))
    rel = sensor[:-1].inv() * sensor[1:]
    omega = np.vstack([np.zeros((1, 3)), rel.as_rotvec() / dt])
    mixing = np.concatenate([q, qd], axis=1) @ cfg.placement_response[label - 1].T
    return np.concatenate([specific_force, omega], axis=1) + cfg.mixing_scale * mixing


def generate_trajectory(
    cfg: SyntheticArmConfig,
    placement: PlacementSet,
    f: SamplingFrequency,
    duration_s: float,
    seed: int,
    name: str = "synthetic",
) -> TrajectoryDataset:
    """Simulate ``duration_s`` seconds and record frames at ``f`` Hz.

    ``seed`` drives the pressure schedule (shared across frequencies and
    placements) and the observation noise (specific to the frequency and
    placement).
    """
    if duration_s <= 0:
        raise InvalidArgumentError("duration must be positive")
    f = SamplingFrequency.parse(f)
    stride = INTERNAL_RATE_HZ // int(f)
    n_frames = int(round(duration_s * int(f)))
    n_internal = n_frames * stride
    actions, switches = _action_schedule(cfg, n_internal, np.random.default_rng([seed, 1]))
    q, qd = _latent_rollout(cfg, actions)
    pos, rot = _backbone(cfg, q, 1.0)
    quat = rot.as_quat()
    quat *= np.where(quat[:, 3:4] < 0, -1.0, 1.0)
    truth = np.concatenate([pos, quat], axis=1)
    imu = np.concatenate([_imu_readings(cfg, q, qd, lab) for lab in placement.labels], axis=1)
    idx = np.arange(n_frames) * stride
    noise_rng = np.random.default_rng([seed, 2, int(f), *placement.labels])
    raw = imu[idx] + cfg.noise_std_obs * noise_rng.standard_normal((n_frames, imu.shape[1]))
    timestamps = np.arange(n_frames) / int(f)
    return TrajectoryDataset(
        timestamps=timestamps,
        actions=actions[idx],
        raw_obs=raw,
        ground_truth=truth[idx],
        placement=placement,
        sampling_frequency=f,
        metadata={
            "name": name,
            "seed": int(seed),
            "generator_version": GENERATOR_VERSION,
            "arm_config": cfg.to_dict(),
            "segments": [round(t, 9) for t in switches if t < duration_s],
        },
    )


def canonical_datasets(
    cfg: SyntheticArmConfig,
    duration_s: float,
    seed: int,
    frequencies=(SamplingFrequency.HZ50,),
    names=None,
) -> list[TrajectoryDataset]:
    """D1-D10 analogues: one dataset per placement and frequency.

    Dataset ``Dk`` uses trajectory seed ``seed + k`` so the ten recordings see
    different pressure schedules, like separate recording sessions.
    """
    out = []
    for name, placement in CANONICAL_PLACEMENTS.items():
        if names is not None and name not in names:
            continue
        k = int(name[1:])
        for f in frequencies:
            f = SamplingFrequency.parse(f)
            out.append(generate_trajectory(cfg, placement, f, duration_s, seed + k, name=f"{name}@{int(f)}Hz"))
    return out
