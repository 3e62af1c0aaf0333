"""Trajectory datasets: container, resampling and delimited-text file format.

File layout: a UTF-8 comma-separated table with one header row and columns
``t, a_0..a_39, y_0..y_29, z_0..z_4, x, y, z, qx, qy, qz, qw``, plus a JSON
sidecar ``<file>.meta.json`` holding the sampling frequency, frame count and
free-form metadata. Floats are written with 17 significant digits so a
save/load round trip is bit-exact.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DatasetFormatError, InvalidArgumentError
from .types import (
    ACTION_DIM,
    NUM_IMUS,
    RAW_OBS_DIM,
    STATE_DIM,
    ObservationFrame,
    PlacementSet,
    SamplingFrequency,
)

FILE_FORMAT = "denkf-dataset/1"
TIME_TOL = 1e-9

COLUMNS = (
    ["t"]
    + [f"a_{i}" for i in range(ACTION_DIM)]
    + [f"y_{i}" for i in range(RAW_OBS_DIM)]
    + [f"z_{i}" for i in range(NUM_IMUS)]
    + ["x", "y", "z", "qx", "qy", "qz", "qw"]
)
_A = slice(1, 1 + ACTION_DIM)
_Y = slice(_A.stop, _A.stop + RAW_OBS_DIM)
_Z = slice(_Y.stop, _Y.stop + NUM_IMUS)
_X = slice(_Z.stop, _Z.stop + STATE_DIM)


@dataclass(frozen=True)
class TrajectoryDataset:
    """Time-ordered frames sharing one placement set and one sampling frequency."""

    timestamps: np.ndarray
    actions: np.ndarray
    raw_obs: np.ndarray
    ground_truth: np.ndarray
    placement: PlacementSet
    sampling_frequency: SamplingFrequency
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        f = SamplingFrequency.parse(self.sampling_frequency)
        object.__setattr__(self, "sampling_frequency", f)
        ts = np.asarray(self.timestamps, dtype=np.float64)
        n = ts.shape[0]
        shapes = {
            "actions": (self.actions, ACTION_DIM),
            "raw_obs": (self.raw_obs, RAW_OBS_DIM),
            "ground_truth": (self.ground_truth, STATE_DIM),
        }
        for name, (arr, width) in shapes.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != (n, width):
                raise DatasetFormatError(f"{name} must have shape ({n}, {width}), got {arr.shape}")
            bad = ~np.all(np.isfinite(arr), axis=1)
            if bad.any():
                raise DatasetFormatError(f"{name} has non-finite values at frame {int(np.argmax(bad))}")
            object.__setattr__(self, name, arr)
        if ts.ndim != 1 or not np.all(np.isfinite(ts)):
            raise DatasetFormatError("timestamps must be a finite 1-D array")
        if n > 1:
            gaps = np.diff(ts)
            bad = np.abs(gaps - f.period) > TIME_TOL
            if bad.any():
                k = int(np.argmax(bad)) + 1
                kind = "non-monotone" if gaps[k - 1] <= 0 else "irregular"
                raise DatasetFormatError(
                    f"{kind} timestamp at frame {k}: {ts[k]!r} follows {ts[k - 1]!r} (expected spacing {f.period})"
                )
        object.__setattr__(self, "timestamps", ts)

    def __len__(self) -> int:
        return self.timestamps.shape[0]

    @property
    def name(self) -> str:
        return str(self.metadata.get("name", "dataset"))

    def frames(self, with_truth: bool = True):
        """Yield :class:`ObservationFrame` objects in time order."""
        for k in range(len(self)):
            yield ObservationFrame(
                timestamp=float(self.timestamps[k]),
                action=self.actions[k],
                raw_obs=self.raw_obs[k],
                placement=self.placement,
                frequency=self.sampling_frequency,
                ground_truth=self.ground_truth[k] if with_truth else None,
            )

    def slice(self, start: int, stop: int, name: str | None = None) -> TrajectoryDataset:
        meta = dict(self.metadata)
        meta["name"] = name or f"{self.name}[{start}:{stop}]"
        return replace(
            self,
            timestamps=self.timestamps[start:stop],
            actions=self.actions[start:stop],
            raw_obs=self.raw_obs[start:stop],
            ground_truth=self.ground_truth[start:stop],
            metadata=meta,
        )

    def split(self, n_segments: int) -> list[TrajectoryDataset]:
        """Contiguous, non-overlapping blocks in time order."""
        if n_segments < 1 or n_segments > len(self):
            raise InvalidArgumentError(f"cannot split {len(self)} frames into {n_segments} segments")
        bounds = np.linspace(0, len(self), n_segments + 1).round().astype(int)
        return [self.slice(a, b, f"{self.name}#{i}") for i, (a, b) in enumerate(zip(bounds, bounds[1:]))]

    def equals(self, other: TrajectoryDataset) -> bool:
        """Bit-exact equality of all numeric content, placement and frequency."""
        return (
            self.placement == other.placement
            and self.sampling_frequency == other.sampling_frequency
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                for k in ("timestamps", "actions", "raw_obs", "ground_truth")
            )
        )


def resample(ds: TrajectoryDataset, target: SamplingFrequency) -> TrajectoryDataset:
    """Downsample by nearest-timestamp selection onto the ``target`` grid."""
    target = SamplingFrequency.parse(target)
    src = ds.sampling_frequency
    if int(target) > int(src):
        raise InvalidArgumentError(f"cannot resample {int(src)} Hz up to {int(target)} Hz")
    if int(src) % int(target):
        raise InvalidArgumentError(f"{int(src)} Hz is not an integer multiple of {int(target)} Hz")
    if target == src:
        return ds
    t0 = ds.timestamps[0]
    grid = t0 + np.arange(0.0, ds.timestamps[-1] - t0 + TIME_TOL, target.period)
    idx = np.clip(np.searchsorted(ds.timestamps, grid), 1, len(ds) - 1)
    left = ds.timestamps[idx - 1]
    right = ds.timestamps[idx]
    idx = np.where(np.abs(grid - left) <= np.abs(right - grid), idx - 1, idx)
    meta = dict(ds.metadata)
    meta["resampled_from_hz"] = int(src)
    meta["max_resample_deviation_s"] = float(np.max(np.abs(ds.timestamps[idx] - grid)))
    return TrajectoryDataset(
        timestamps=ds.timestamps[idx],
        actions=ds.actions[idx],
        raw_obs=ds.raw_obs[idx],
        ground_truth=ds.ground_truth[idx],
        placement=ds.placement,
        sampling_frequency=target,
        metadata=meta,
    )


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def _atomic_write(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def save_dataset(ds: TrajectoryDataset, path) -> None:
    path = Path(path)
    z = np.tile(np.asarray(ds.placement.labels, dtype=np.float64), (len(ds), 1))
    table = np.concatenate([ds.timestamps[:, None], ds.actions, ds.raw_obs, z, ds.ground_truth], axis=1)
    lines = [",".join(COLUMNS)]
    zcols = range(_Z.start, _Z.stop)
    for row in table:
        lines.append(",".join(str(int(v)) if j in zcols else repr(float(v)) for j, v in enumerate(row)))
    meta = {
        "format": FILE_FORMAT,
        "frame_count": len(ds),
        "sampling_frequency": int(ds.sampling_frequency),
        "placement": list(ds.placement.labels),
        "metadata": ds.metadata,
    }
    _atomic_write(path, "\n".join(lines) + "\n")
    _atomic_write(_meta_path(path), json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> TrajectoryDataset:
    """Parse and validate a dataset file; raises :class:`DatasetFormatError` on any defect."""
    path = Path(path)
    meta_path = _meta_path(path)
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DatasetFormatError(f"{meta_path}: metadata sidecar missing") from exc
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{meta_path}: invalid JSON ({exc})") from exc
    if meta.get("format") != FILE_FORMAT:
        raise DatasetFormatError(f"{meta_path}: unsupported format {meta.get('format')!r}")
    rows = []
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            text = fh.read()
    except FileNotFoundError as exc:
        raise DatasetFormatError(f"{path}: file not found") from exc
    if text and not text.endswith("\n"):
        raise DatasetFormatError(f"{path}: truncated (last line has no terminator)")
    reader = csv.reader(text.splitlines())
    header = next(reader, None)
    if header != COLUMNS:
        raise DatasetFormatError(f"{path}:1: header does not match the expected column layout")
    for lineno, fields in enumerate(reader, start=2):
        if len(fields) != len(COLUMNS):
            raise DatasetFormatError(f"{path}:{lineno}: expected {len(COLUMNS)} fields, got {len(fields)}")
        row = []
        for col, value in zip(COLUMNS, fields):
            try:
                row.append(float(value))
            except ValueError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: field {col!r}: cannot parse {value!r}") from exc
        rows.append(row)
    expected = meta.get("frame_count")
    if expected != len(rows):
        raise DatasetFormatError(f"{path}: expected {expected} frames, found {len(rows)} (truncated file?)")
    table = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(COLUMNS))
    try:
        placement = PlacementSet(tuple(meta["placement"]))
    except (KeyError, InvalidArgumentError) as exc:
        raise DatasetFormatError(f"{meta_path}: invalid placement ({exc})") from exc
    z = table[:, _Z]
    if len(rows):
        sorted_z = np.sort(z, axis=1)
        mismatch = np.any(sorted_z != np.asarray(placement.labels, dtype=np.float64), axis=1)
        if mismatch.any():
            k = int(np.argmax(mismatch))
            raise DatasetFormatError(f"{path}:{k + 2}: placement columns differ from dataset placement")
    try:
        freq = SamplingFrequency.parse(meta.get("sampling_frequency"))
    except InvalidArgumentError as exc:
        raise DatasetFormatError(f"{meta_path}: {exc}") from exc
    return TrajectoryDataset(
        timestamps=table[:, 0],
        actions=table[:, _A],
        raw_obs=table[:, _Y],
        ground_truth=table[:, _X],
        placement=placement,
        sampling_frequency=freq,
        metadata=meta.get("metadata", {}),
    )
