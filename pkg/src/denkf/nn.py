"""Small feed-forward network engine with dropout sampling and reverse-mode gradients.

Networks act on row-major batches: an input of shape ``(N, in_dim)`` produces
``(N, out_dim)``; 1-D inputs are treated as a single row and the output is
squeezed back. Layers compute ``act(x @ W + b)``.

A layer flagged ``stochastic`` applies inverted dropout to its *input*; dropout
stays on at inference in ``"stochastic"`` mode, which is how the stochastic
sub-modules draw samples.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import (
    IncompatibleCheckpointError,
    InvalidArgumentError,
    TapeConsumedError,
    TrainingError,
)

CHECKPOINT_FORMAT = "denkf-checkpoint/1"

ACTIVATIONS = ("relu", "none")


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"
    stochastic: bool = False

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise InvalidArgumentError(f"layer dims must be >= 1, got {self.in_dim}->{self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise InvalidArgumentError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class NetworkModel:
    layers: tuple[LayerSpec, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    dropout_rate: float = 0.0

    def __post_init__(self):
        if not self.layers:
            raise InvalidArgumentError("network needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise InvalidArgumentError(f"layer dims do not chain: {a.out_dim} != {b.in_dim}")
        for spec, w, b in zip(self.layers, self.weights, self.biases):
            if w.shape != (spec.in_dim, spec.out_dim) or b.shape != (spec.out_dim,):
                raise InvalidArgumentError(f"parameter shapes {w.shape}/{b.shape} do not match {spec}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidArgumentError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def num_parameters(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def with_params(self, weights, biases) -> NetworkModel:
        return replace(self, weights=tuple(weights), biases=tuple(biases))

    def zeroed(self) -> NetworkModel:
        return self.with_params([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases])


def build_network(
    dims: Sequence[int],
    stochastic: Sequence[bool] | bool = False,
    *,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
    final_activation: str = "none",
) -> NetworkModel:
    """Create an MLP through ``dims`` with ReLU hidden layers.

    He-uniform init for ReLU layers, Xavier-uniform for the linear output layer,
    zero biases.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    n = len(dims) - 1
    if isinstance(stochastic, bool):
        stochastic = [stochastic] * n
    if len(stochastic) != n:
        raise InvalidArgumentError("stochastic flags must match the number of layers")
    layers, weights, biases = [], [], []
    for k in range(n):
        act = "relu" if k < n - 1 else final_activation
        spec = LayerSpec(int(dims[k]), int(dims[k + 1]), act, bool(stochastic[k]))
        if act == "relu":
            limit = np.sqrt(6.0 / spec.in_dim)
        else:
            limit = np.sqrt(6.0 / (spec.in_dim + spec.out_dim))
        layers.append(spec)
        weights.append(rng.uniform(-limit, limit, size=(spec.in_dim, spec.out_dim)))
        biases.append(np.zeros(spec.out_dim))
    return NetworkModel(tuple(layers), tuple(weights), tuple(biases), float(dropout_rate))


@dataclass
class GradientTape:
    """Activations and dropout masks recorded by one forward pass."""

    model: NetworkModel
    inputs: list  # per-layer input after dropout
    preacts: list
    masks: list  # per-layer mask or None
    squeeze: bool
    consumed: bool = False


@dataclass(frozen=True)
class Gradients:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    input: np.ndarray

    def scaled(self, c: float) -> Gradients:
        return Gradients(tuple(w * c for w in self.weights), tuple(b * c for b in self.biases), self.input * c)


def sample_masks(model: NetworkModel, n_rows: int, rng) -> list:
    """Draw inverted-dropout masks for every stochastic layer.

    ``rng`` is either one Generator for all rows or a sequence with one
    Generator per row.
    """
    p = model.dropout_rate
    masks = []
    per_row = rng is not None and not isinstance(rng, np.random.Generator)
    if per_row and len(rng) != n_rows:
        raise InvalidArgumentError(f"expected {n_rows} generators, got {len(rng)}")
    keep = 1.0 - p
    for spec in model.layers:
        if not spec.stochastic or p == 0.0:
            masks.append(None)
            continue
        if rng is None:
            raise InvalidArgumentError("stochastic forward pass needs an rng")
        if per_row:
            u = np.stack([g.random(spec.in_dim) for g in rng])
        else:
            u = rng.random((n_rows, spec.in_dim))
        masks.append((u < keep) / keep)
    return masks


def forward(model: NetworkModel, x, mode: str = "deterministic", rng=None, masks=None):
    """Run the network and return ``(output, tape)``.

    In ``"stochastic"`` mode masks come from ``masks`` when given (e.g. replayed
    from an earlier tape) or are sampled from ``rng``.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.in_dim:
        raise InvalidArgumentError(f"input shape {x.shape} incompatible with in_dim {model.in_dim}")
    if mode == "deterministic":
        masks = [None] * len(model.layers)
    elif mode == "stochastic":
        if masks is None:
            masks = sample_masks(model, x.shape[0], rng)
    else:
        raise InvalidArgumentError(f"unknown mode {mode!r}")
    inputs, preacts = [], []
    h = x
    for spec, w, b, m in zip(model.layers, model.weights, model.biases, masks):
        if m is not None:
            h = h * m
        inputs.append(h)
        z = h @ w + b
        preacts.append(z)
        h = np.maximum(z, 0.0) if spec.activation == "relu" else z
    tape = GradientTape(model, inputs, preacts, list(masks), squeeze)
    return (h[0] if squeeze else h), tape


def backward(tape: GradientTape, output_grad) -> Gradients:
    """Reverse pass through a recorded forward; gradients are summed over rows."""
    model = tape.model
    if tape.consumed:
        raise TapeConsumedError("gradient tape already consumed")
    g = np.asarray(output_grad, dtype=np.float64)
    if tape.squeeze:
        g = g[None, :]
    if g.shape != tape.preacts[-1].shape:
        raise InvalidArgumentError(f"output_grad shape {g.shape} != output shape {tape.preacts[-1].shape}")
    tape.consumed = True
    n = len(model.layers)
    dW: list = [None] * n
    db: list = [None] * n
    for k in range(n - 1, -1, -1):
        spec = model.layers[k]
        if spec.activation == "relu":
            g = g * (tape.preacts[k] > 0.0)
        dW[k] = tape.inputs[k].T @ g
        db[k] = g.sum(axis=0)
        g = g @ model.weights[k].T
        if tape.masks[k] is not None:
            g = g * tape.masks[k]
    dx = g[0] if tape.squeeze else g
    return Gradients(tuple(dW), tuple(db), dx)


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


def optimizer_step(model: NetworkModel, grads: Gradients, lr: float, state: AdamState | None = None):
    """One Adam update. Returns ``(new_model, new_state)``; inputs are left untouched."""
    if lr < 0:
        raise InvalidArgumentError("learning rate must be non-negative")
    params = list(model.weights) + list(model.biases)
    gs = list(grads.weights) + list(grads.biases)
    if len(gs) != len(params) or any(p.shape != g.shape for p, g in zip(params, gs)):
        raise InvalidArgumentError("gradients are not shape-compatible with the model")
    if not all(np.all(np.isfinite(g)) for g in gs):
        raise TrainingError("non-finite gradient")
    if state is None or not state.m:
        m = [np.zeros_like(p) for p in params]
        v = [np.zeros_like(p) for p in params]
        step = 0 if state is None else state.step
    else:
        m, v, step = state.m, state.v, state.step
    step += 1
    new_m = [BETA1 * mi + (1 - BETA1) * gi for mi, gi in zip(m, gs)]
    new_v = [BETA2 * vi + (1 - BETA2) * gi * gi for vi, gi in zip(v, gs)]
    c1 = 1 - BETA1**step
    c2 = 1 - BETA2**step
    new_params = [p - lr * (mi / c1) / (np.sqrt(vi / c2) + ADAM_EPS) for p, mi, vi in zip(params, new_m, new_v)]
    if not all(np.all(np.isfinite(p)) for p in new_params):
        raise TrainingError("non-finite parameters after optimizer step")
    nw = len(model.weights)
    return model.with_params(new_params[:nw], new_params[nw:]), AdamState(step, new_m, new_v)


# -- checkpoint container ---------------------------------------------------


def network_to_dict(model: NetworkModel, prefix: str) -> tuple[dict, dict]:
    """Split a network into JSON-able metadata and a flat array dict."""
    meta = {
        "layers": [[s.in_dim, s.out_dim, s.activation, s.stochastic] for s in model.layers],
        "dropout_rate": model.dropout_rate,
    }
    arrays = {}
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        arrays[f"{prefix}/W{k}"] = w
        arrays[f"{prefix}/b{k}"] = b
    return meta, arrays


def network_from_dict(meta: dict, arrays, prefix: str) -> NetworkModel:
    layers = tuple(LayerSpec(int(i), int(o), str(a), bool(s)) for i, o, a, s in meta["layers"])
    weights = tuple(np.asarray(arrays[f"{prefix}/W{k}"], dtype=np.float64) for k in range(len(layers)))
    biases = tuple(np.asarray(arrays[f"{prefix}/b{k}"], dtype=np.float64) for k in range(len(layers)))
    return NetworkModel(layers, weights, biases, float(meta["dropout_rate"]))


def save_checkpoint(path, networks: dict[str, NetworkModel], meta: dict, extra_arrays: dict | None = None):
    """Write networks plus metadata into one ``.npz`` container with a format tag."""
    header = {"format": CHECKPOINT_FORMAT, "meta": meta, "networks": {}}
    arrays = dict(extra_arrays or {})
    for name, net in networks.items():
        nmeta, narr = network_to_dict(net, f"net/{name}")
        header["networks"][name] = nmeta
        arrays.update(narr)
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, NetworkModel], dict, dict]:
    """Inverse of :func:`save_checkpoint`: ``(networks, meta, extra_arrays)``."""
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except (OSError, ValueError) as exc:
        raise IncompatibleCheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if "__header__" not in arrays:
        raise IncompatibleCheckpointError(f"{path} has no checkpoint header")
    header = json.loads(arrays.pop("__header__").tobytes().decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise IncompatibleCheckpointError(f"unsupported checkpoint format {header.get('format')!r}")
    networks = {name: network_from_dict(m, arrays, f"net/{name}") for name, m in header["networks"].items()}
    extra = {k: v for k, v in arrays.items() if not k.startswith("net/")}
    return networks, header["meta"], extra
