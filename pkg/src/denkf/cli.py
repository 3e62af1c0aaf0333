"""Command-line entry point: ``denkf simulate | train | eval | forces | replay``.

Every command writes a JSON run manifest next to its outputs holding the
resolved arguments, the full config snapshot, seeds, input/output digests and
timings. ``replay`` re-executes a manifest into a fresh location and checks
that every output is numerically identical.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .datasets import TrajectoryDataset, load_dataset, save_dataset
from .downstream import MissingMask, calibrate_forces, detect_forces
from .errors import (
    ConfigError,
    DatasetFormatError,
    FilterDivergenceError,
    IncompatibleCheckpointError,
    InvalidArgumentError,
    TrainingError,
)
from .filter import FilterConfig
from .models import VARIANTS, load_models
from .simulator import SyntheticArmConfig, CANONICAL_PLACEMENTS, canonical_datasets
from .training import (
    TrainConfig,
    TrainState,
    block_evaluate,
    evaluate,
    init_models,
    load_training_checkpoint,
    run_filter,
    save_training_checkpoint,
    train,
)
from .types import SamplingFrequency

log = logging.getLogger("denkf")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
MANIFEST_FORMAT = "denkf-manifest/1"
SEED_ENV = "DENKF_SEED"

SIMULATE_DEFAULTS = {
    "arm": SyntheticArmConfig().to_dict(),
    "duration_s": 60.0,
    "seed": 0,
    "frequencies": [50],
    "datasets": list(CANONICAL_PLACEMENTS),
}
TRAIN_DEFAULTS = {"variant": "fix", **TrainConfig().to_dict()}
EVAL_DEFAULTS = {**{k: v for k, v in FilterConfig().__dict__.items()}, "init_spread": 0.1}


class UsageError(Exception):
    pass


# -- config handling -----------------------------------------------------------


def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"{path}: config file not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def _merge(defaults: dict, given: dict, what: str) -> dict:
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown {what} config field(s): {sorted(unknown)}")
    out = copy.deepcopy(defaults)
    out.update(given)
    return out


def _env_seed(args) -> int | None:
    if getattr(args, "ignore_env", False):
        return None
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        seed = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{SEED_ENV}: expected an integer, got {raw!r}") from exc
    if seed < 0:
        raise ConfigError(f"{SEED_ENV}: must be non-negative")
    return seed


def _resolve_seed(cfg: dict, args, key: str = "seed"):
    env = _env_seed(args)
    if env is not None:
        cfg[key] = env
    if getattr(args, "seed", None) is not None:
        cfg[key] = args.seed


def simulate_config(args) -> dict:
    cfg = _merge(SIMULATE_DEFAULTS, _load_json(args.config), "simulate")
    cfg["arm"] = _merge(SIMULATE_DEFAULTS["arm"], cfg["arm"], "arm")
    if args.duration is not None:
        cfg["duration_s"] = args.duration
    if args.freq:
        cfg["frequencies"] = args.freq
    _resolve_seed(cfg, args)
    SyntheticArmConfig.from_dict(cfg["arm"])
    if not isinstance(cfg["duration_s"], (int, float)) or cfg["duration_s"] <= 0:
        raise ConfigError(f"duration_s: must be a positive number, got {cfg['duration_s']!r}")
    for f in cfg["frequencies"]:
        try:
            SamplingFrequency.parse(f)
        except InvalidArgumentError as exc:
            raise ConfigError(f"frequencies: {exc}") from exc
    bad = [n for n in cfg["datasets"] if n not in CANONICAL_PLACEMENTS]
    if bad:
        raise ConfigError(f"datasets: unknown name(s) {bad}")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError(f"seed: must be a non-negative integer, got {cfg['seed']!r}")
    return cfg


def train_config(args) -> dict:
    cfg = _merge(TRAIN_DEFAULTS, _load_json(args.config), "train")
    if args.variant is not None:
        cfg["variant"] = args.variant
    if args.epochs is not None:
        cfg["epochs"] = args.epochs
    _resolve_seed(cfg, args)
    if cfg["variant"] not in VARIANTS:
        raise ConfigError(f"variant: expected one of {list(VARIANTS)}, got {cfg['variant']!r}")
    TrainConfig.from_dict({k: v for k, v in cfg.items() if k != "variant"})
    return cfg


def eval_config(args) -> dict:
    cfg = _merge(EVAL_DEFAULTS, _load_json(args.config), "eval")
    if args.ensemble_size is not None:
        cfg["ensemble_size"] = args.ensemble_size
    _resolve_seed(cfg, args)
    _filter_config(cfg)
    return cfg


def _filter_config(cfg: dict) -> FilterConfig:
    try:
        return FilterConfig(**{k: v for k, v in cfg.items() if k != "init_spread"})
    except (TypeError, InvalidArgumentError) as exc:
        raise ConfigError(str(exc)) from exc


# -- digests and manifests -------------------------------------------------------


def digest(path: Path) -> str:
    """Content digest; ``.npz`` files hash their arrays so container timestamps do not matter."""
    h = hashlib.sha256()
    if path.suffix == ".npz":
        with np.load(path, allow_pickle=False) as data:
            for key in sorted(data.files):
                arr = np.ascontiguousarray(data[key])
                h.update(key.encode())
                h.update(str(arr.dtype).encode())
                h.update(str(arr.shape).encode())
                h.update(arr.tobytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


class Run:
    """Collects what a command read and wrote, then writes the manifest atomically."""

    def __init__(self, command: str, args, config: dict, out_root: Path):
        self.command = command
        self.args = {k: v for k, v in vars(args).items() if k not in ("func", "print_config")}
        self.config = config
        self.out_root = out_root
        self.inputs: dict = {}
        self.outputs: list[Path] = []
        self.timing: dict = {}
        self.extra: dict = {}
        self.started = datetime.now(timezone.utc).isoformat()

    def read(self, path: Path):
        self.inputs[str(Path(path).resolve())] = digest(Path(path))

    def wrote(self, path: Path):
        self.outputs.append(Path(path))

    def save(self, manifest_path: Path):
        seeds = {k: v for k, v in self.config.items() if k == "seed"}
        doc = {
            "format": MANIFEST_FORMAT,
            "command": self.command,
            "tool_version": __version__,
            "args": self.args,
            "config": self.config,
            "seeds": seeds,
            "inputs": self.inputs,
            "output_root": str(self.out_root.resolve()),
            "outputs": {str(p.resolve().relative_to(self.out_root.resolve())): digest(p) for p in self.outputs},
            "timing": self.timing,
            **self.extra,
            "started": self.started,
            "finished": datetime.now(timezone.utc).isoformat(),
        }
        tmp = manifest_path.with_name(manifest_path.name + ".tmp")
        tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, manifest_path)
        return doc


def _write_json(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _dataset_paths(data) -> list[Path]:
    p = Path(data)
    if p.is_dir():
        paths = sorted(q for q in p.glob("*.csv"))
        if not paths:
            raise UsageError(f"{p}: no dataset files found")
        return paths
    if p.is_file():
        return [p]
    raise UsageError(f"{p}: no such dataset file or directory")


def _load_datasets(data, run: Run) -> list[TrajectoryDataset]:
    out = []
    for path in _dataset_paths(data):
        out.append(load_dataset(path))
        run.read(path)
    return out


def _file_stem(ds: TrajectoryDataset) -> str:
    return ds.name.replace("@", "_").replace("/", "_")


# -- commands ------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = simulate_config(args)
    if args.print_config:
        print(json.dumps(cfg, indent=2, sort_keys=True))
        return EXIT_OK
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = Run("simulate", args, cfg, out)
    t0 = time.perf_counter()
    arm = SyntheticArmConfig.from_dict(cfg["arm"])
    datasets = canonical_datasets(arm, float(cfg["duration_s"]), cfg["seed"], cfg["frequencies"], cfg["datasets"])
    for ds in datasets:
        path = out / f"{_file_stem(ds)}.csv"
        save_dataset(ds, path)
        run.wrote(path)
        run.wrote(path.with_name(path.name + ".meta.json"))
        print(f"{path.name}: {len(ds)} frames, placement {ds.placement}")
    run.timing["seconds"] = time.perf_counter() - t0
    run.save(out / "manifest.json")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = train_config(args)
    if args.print_config:
        print(json.dumps(cfg, indent=2, sort_keys=True))
        return EXIT_OK
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    run = Run("train", args, cfg, out.parent)
    datasets = _load_datasets(args.data, run)
    tcfg = TrainConfig.from_dict({k: v for k, v in cfg.items() if k != "variant"})
    if args.resume:
        if not out.exists():
            raise UsageError(f"--resume: {out} does not exist")
        state, meta = load_training_checkpoint(out)
        if meta.get("variant") != cfg["variant"]:
            raise ConfigError(f"--resume: checkpoint variant {meta.get('variant')!r} != {cfg['variant']!r}")
        print(f"resuming from epoch {state.epoch}")
    else:
        models = init_models(cfg["variant"], datasets, seed=tcfg.seed, dropout_rate=tcfg.dropout_rate)
        state = TrainState(models)
        save_training_checkpoint(out, state, tcfg)
    loss_path = out.with_name(out.name + ".loss.csv")

    def on_epoch(st: TrainState):
        save_training_checkpoint(out, st, tcfg)
        _write_loss_curve(loss_path, st.history)
        rec = st.history[-1]
        print(f"epoch {rec['epoch']}: loss {rec['loss']:.6f}")

    t0 = time.perf_counter()
    try:
        state = train(state.models, datasets, tcfg, state=state, on_epoch=on_epoch)
    except TrainingError as exc:
        print(f"error: {exc}; last good checkpoint kept at {out}", file=sys.stderr)
        return EXIT_NUMERIC
    _write_loss_curve(loss_path, state.history)
    run.wrote(out)
    run.wrote(loss_path)
    run.timing["seconds"] = time.perf_counter() - t0
    run.save(out.with_name(out.name + ".manifest.json"))
    return EXIT_OK


def _write_loss_curve(path: Path, history: list) -> None:
    cols = ["epoch", "loss", "loss_e2e", "loss_transition", "loss_sensor"]
    lines = [",".join(cols)] + [",".join(repr(r[c]) for c in cols) for r in history]
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _load_checkpoint(path, run: Run):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{p}: checkpoint not found")
    models, _ = load_models(p)
    run.read(p)
    return models


def _missing_mask(spec: str | None, n: int, seed: int) -> MissingMask | None:
    if spec is None:
        return None
    p = Path(spec)
    if p.is_file():
        flags = [line.strip() not in ("", "0", "false", "False") for line in p.read_text().splitlines() if line.strip()]
        if len(flags) != n:
            raise InvalidArgumentError(f"{p}: mask has {len(flags)} entries, expected {n}")
        return MissingMask(np.array(flags))
    try:
        frac = float(spec)
    except ValueError as exc:
        raise UsageError(f"--missing-mask: expected a fraction or a mask file, got {spec!r}") from exc
    return MissingMask.random_window(n, frac, np.random.default_rng([seed, 0x3A55]), margin=min(10, n // 4))


def cmd_eval(args) -> int:
    cfg = eval_config(args)
    if args.print_config:
        print(json.dumps(cfg, indent=2, sort_keys=True))
        return EXIT_OK
    out = Path(args.out)
    run = Run("eval", args, cfg, out)
    models = _load_checkpoint(args.checkpoint, run)
    datasets = _load_datasets(args.data, run)
    out.mkdir(parents=True, exist_ok=True)
    fcfg = _filter_config(cfg)
    spread = cfg["init_spread"]
    calibration = None
    if args.detect_forces:
        if args.calibration is None:
            raise ConfigError("--detect-forces needs --calibration <force-free dataset>")
        cal_sets = _load_datasets(args.calibration, run)
        cal_traj = run_filter(models, cal_sets[0], fcfg, spread)
        calibration = calibrate_forces(cal_traj, p=args.p, percentile=args.percentile)
    report: dict = {"datasets": {}}
    step_seconds = []
    for ds in datasets:
        stem = _file_stem(ds)
        mask = _missing_mask(args.missing_mask, len(ds) - 1, fcfg.seed)
        t0 = time.perf_counter()
        traj = run_filter(models, ds, fcfg, spread, missing=None if mask is None else mask.flags)
        step_seconds.append((time.perf_counter() - t0) / max(len(traj), 1))
        path = out / f"trajectory_{stem}.csv"
        traj.to_csv(path)
        run.wrote(path)
        err = traj.updated_means - ds.ground_truth[1:]
        entry = {
            "frames": len(traj),
            "mae_position": float(np.abs(err[:, :3]).mean()),
            "rmse_position": float(np.sqrt((err[:, :3] ** 2).mean())),
            "mae_quaternion": float(np.abs(err[:, 3:]).mean()),
        }
        if mask is not None:
            entry["missing_windows"] = mask.windows()
        if args.folds:
            cv = block_evaluate(models, ds, args.folds, fcfg)
            entry["folds"] = {"mean": _strip_timing(cv.mean), "stderr": _strip_timing(cv.stderr)}
            print(cv.format_row(f"{ds.name} ({args.folds} folds)"))
        else:
            print(f"{ds.name}: MAE {entry['mae_position']:.4f} mm, RMSE {entry['rmse_position']:.4f} mm, "
                  f"q-MAE {entry['mae_quaternion']:.4f}")
        if calibration is not None:
            trace = detect_forces(traj, calibration)
            fpath = out / f"forces_{stem}.csv"
            trace.to_csv(fpath)
            run.wrote(fpath)
            entry["force_alarms"] = trace.alarms
        report["datasets"][ds.name] = entry
    if calibration is not None:
        report["force_threshold"] = calibration.threshold
    rpath = out / "report.json"
    _write_json(rpath, report)
    run.wrote(rpath)
    run.timing["wall_clock_per_step"] = float(np.mean(step_seconds))
    print(f"wall clock per step: {run.timing['wall_clock_per_step'] * 1e3:.2f} ms (reference 62 ms)")
    run.save(out / "manifest.json")
    return EXIT_OK


def _strip_timing(d: dict) -> dict:
    return {k: v for k, v in d.items() if k != "wall_clock_per_step"}


def cmd_forces(args) -> int:
    cfg = eval_config(args)
    if args.print_config:
        print(json.dumps(cfg, indent=2, sort_keys=True))
        return EXIT_OK
    out = Path(args.out)
    run = Run("forces", args, cfg, out)
    models = _load_checkpoint(args.checkpoint, run)
    out.mkdir(parents=True, exist_ok=True)
    fcfg = _filter_config(cfg)
    cal_sets = _load_datasets(args.calibration, run)
    calibration = calibrate_forces(run_filter(models, cal_sets[0], fcfg, cfg["init_spread"]), args.p, args.percentile)
    summary = {"threshold": calibration.threshold, "calibration_median": calibration.median, "p": args.p, "datasets": {}}
    for ds in _load_datasets(args.data, run):
        trace = detect_forces(run_filter(models, ds, fcfg, cfg["init_spread"]), calibration)
        path = out / f"forces_{_file_stem(ds)}.csv"
        trace.to_csv(path)
        run.wrote(path)
        summary["datasets"][ds.name] = {
            "peak_delta": float(trace.delta.max()),
            "alarm_rate": trace.alarm_rate,
            "alarms": trace.alarms,
        }
        print(f"{ds.name}: peak delta {trace.delta.max():.4f}, {len(trace.alarms)} alarm interval(s)")
    spath = out / "forces.json"
    _write_json(spath, summary)
    run.wrote(spath)
    run.save(out / "manifest.json")
    return EXIT_OK


def cmd_replay(args) -> int:
    """Re-run a manifest's command into a scratch location and compare every output."""
    mpath = Path(args.manifest)
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise UsageError(f"{mpath}: manifest not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{mpath}: invalid JSON ({exc})") from exc
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ConfigError(f"{mpath}: not a run manifest")
    scratch = Path(args.out) if args.out else Path(tempfile.mkdtemp(prefix="denkf-replay-"))
    scratch.mkdir(parents=True, exist_ok=True)
    snapshot = scratch / "config.snapshot.json"
    config = dict(manifest["config"])
    _write_json(snapshot, config)
    argv = dict(manifest["args"])
    argv.update(config=str(snapshot), ignore_env=True, print_config=False)
    for key in ("seed", "duration", "freq", "variant", "epochs", "ensemble_size"):
        if key in argv:
            argv[key] = None
    command = manifest["command"]
    original_root = Path(manifest["output_root"])
    if command == "train":
        argv["out"] = str(scratch / Path(argv["out"]).name)
        argv["resume"] = False
        new_root = scratch
    else:
        argv["out"] = str(scratch / "out")
        new_root = Path(argv["out"])
    ns = argparse.Namespace(**argv)
    with _quiet():
        code = COMMANDS[command](ns)
    if code != EXIT_OK:
        print(f"replay failed with exit code {code}", file=sys.stderr)
        return code
    mismatches = []
    for rel, expected in manifest["outputs"].items():
        p = new_root / rel
        if not p.exists():
            mismatches.append(f"{rel}: missing")
        elif digest(p) != expected:
            mismatches.append(f"{rel}: differs")
    for line in mismatches:
        print(line)
    print(f"replayed {command} from {mpath} into {new_root} (original outputs under {original_root}): "
          f"{len(manifest['outputs']) - len(mismatches)}/{len(manifest['outputs'])} outputs identical")
    return EXIT_OK if not mismatches else EXIT_NUMERIC


class _quiet:
    def __enter__(self):
        self._stdout = sys.stdout
        sys.stdout = io.StringIO()

    def __exit__(self, *exc):
        sys.stdout = self._stdout
        return False


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "eval": cmd_eval,
    "forces": cmd_forces,
    "replay": cmd_replay,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="denkf", description="Differentiable ensemble Kalman filter for soft-arm proprioception.")
    p.add_argument("--version", action="version", version=f"denkf {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate synthetic D1-D10 datasets")
    s.add_argument("--config", help="JSON config (see --print-config)")
    s.add_argument("--out", required=False, default="data", help="output directory")
    s.add_argument("--duration", type=float, help="seconds per dataset")
    s.add_argument("--freq", type=int, action="append", help="sampling frequency in Hz (repeatable)")
    s.add_argument("--seed", type=int)
    s.add_argument("--print-config", action="store_true")

    t = sub.add_parser("train", help="train the four sub-modules end to end")
    t.add_argument("--data", required=True, help="dataset file or directory")
    t.add_argument("--out", default="model.npz", help="checkpoint path")
    t.add_argument("--config", help="JSON training config")
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", action="store_true", help="continue from the checkpoint at --out")
    t.add_argument("--print-config", action="store_true")

    for name, helptext in (("eval", "filter datasets and report errors"), ("forces", "virtual force detection")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data", required=True, help="dataset file or directory")
        e.add_argument("--out", default=f"{name}-out", help="output directory")
        e.add_argument("--config", help="JSON filter config")
        e.add_argument("--ensemble-size", type=int)
        e.add_argument("--seed", type=int)
        e.add_argument("--p", type=float, default=10.0, help="Minkowski order for force detection")
        e.add_argument("--percentile", type=float, default=99.0, help="calibration percentile for the alarm threshold")
        e.add_argument("--print-config", action="store_true")
        if name == "eval":
            e.add_argument("--folds", type=int, help="score contiguous time blocks and report mean±stderr")
            e.add_argument("--missing-mask", help="masked-window fraction (e.g. 0.125) or a file with one 0/1 per step")
            e.add_argument("--detect-forces", action="store_true")
            e.add_argument("--calibration", help="force-free dataset used to set the alarm threshold")
        else:
            e.add_argument("--calibration", required=True, help="force-free dataset used to set the alarm threshold")

    r = sub.add_parser("replay", help="re-execute a run manifest and compare outputs")
    r.add_argument("manifest")
    r.add_argument("--out", help="scratch location (default: a new temporary directory)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, DatasetFormatError, IncompatibleCheckpointError, InvalidArgumentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, FilterDivergenceError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
