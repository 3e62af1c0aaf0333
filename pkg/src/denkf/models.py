"""The four learnable sub-modules and the bundle the filter runs on.

Filter algebra happens in *model coordinates*: the robot state z-scored with
training-set statistics. Observation space shares the state layout, so the
observation model and sensor model both emit model-coordinate 7-vectors.
Each sub-model carries the normalization statistics it needs so it can also be
called on raw-unit inputs through the single-sample helpers at the bottom.

Architectures:

- transition: encoder 2xSNN(64) -> latent (+ frequency embedding) -> head
  2xSNN(128), SNN(7); predicts a residual added to the input state
- observation: fc(32) x2, fc(64) x2, fc(7), deterministic
- sensor: stem fc(128) -> body 2xSNN(512), SNN(256), SNN(128), SNN(7)
- noise: fc(16) x2, fc(7) -> softplus + 1e-6
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .embeddings import DEFAULT_EMBEDDING, EmbeddingConfig, embed_frequency, embed_placement
from .errors import IncompatibleCheckpointError, InvalidArgumentError
from .types import (
    ACTION_DIM,
    IMU_CHANNELS,
    NUM_IMUS,
    RAW_OBS_DIM,
    STATE_DIM,
    PlacementSet,
    SamplingFrequency,
    as_vector,
    renormalize_state,
)

LAYOUT_VERSION = "denkf-layout/1"
NOISE_FLOOR = 1e-6
DEFAULT_DROPOUT = 0.1
VARIANTS = ("fix", "pe", "pe+te")


@dataclass(frozen=True)
class Standardizer:
    """Per-channel z-scoring; ``std`` is floored so constant channels pass through."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> Standardizer:
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def fit(cls, data: np.ndarray, floor: float = 1e-8) -> Standardizer:
        data = np.asarray(data, dtype=np.float64)
        std = data.std(axis=0)
        return cls(data.mean(axis=0), np.where(std > floor, std, 1.0))

    def encode(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def decode(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


@dataclass(frozen=True)
class Variant:
    """Embedding configuration: which of placement (PE) and frequency (TE) are injected."""

    use_pe: bool = False
    use_te: bool = False
    embedding: EmbeddingConfig = DEFAULT_EMBEDDING

    @classmethod
    def parse(cls, name: str, embedding: EmbeddingConfig = DEFAULT_EMBEDDING) -> Variant:
        name = name.lower()
        if name not in VARIANTS:
            raise InvalidArgumentError(f"variant must be one of {VARIANTS}, got {name!r}")
        return cls(use_pe="pe" in name, use_te="te" in name, embedding=embedding)

    @property
    def name(self) -> str:
        return {(False, False): "fix", (True, False): "pe", (True, True): "pe+te"}.get(
            (self.use_pe, self.use_te), f"pe={self.use_pe},te={self.use_te}"
        )


def softplus(z):
    return np.logaddexp(0.0, z)


def sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


@dataclass(frozen=True)
class TransitionModel:
    encoder: nn.NetworkModel
    head: nn.NetworkModel
    state_norm: Standardizer
    action_norm: Standardizer
    use_te: bool = False
    embedding: EmbeddingConfig = DEFAULT_EMBEDDING

    @property
    def latent_dim(self) -> int:
        return self.encoder.out_dim

    def freq_embedding(self, freqs) -> np.ndarray | None:
        """Latent offsets for each row's sampling frequency, or None without TE."""
        if not self.use_te:
            return None
        if isinstance(freqs, (int, SamplingFrequency)):
            return embed_frequency(freqs, self.embedding)
        return np.stack([embed_frequency(f, self.embedding) for f in freqs])

    def forward(self, X, A, te=None, rng=None, masks=None, mode="stochastic"):
        """Model-coordinate states ``X`` (N x 7), normalized actions ``A`` (N x 40).

        Returns ``(X_next, cache)``; ``masks`` replays a previous cache's dropout.
        """
        X = np.atleast_2d(X)
        inp = np.concatenate([X, np.broadcast_to(A, (X.shape[0], ACTION_DIM))], axis=1)
        enc_masks, head_masks = (None, None) if masks is None else masks
        lat, t_enc = nn.forward(self.encoder, inp, mode, rng, enc_masks)
        if te is not None:
            lat = lat + te
        delta, t_head = nn.forward(self.head, lat, mode, rng, head_masks)
        return X + delta, (t_enc, t_head)

    def backward(self, cache, grad):
        t_enc, t_head = cache
        g_head = nn.backward(t_head, grad)
        g_enc = nn.backward(t_enc, g_head.input)
        dX = grad + g_enc.input[:, :STATE_DIM]
        return {"transition_encoder": g_enc, "transition_head": g_head}, dX

    def networks(self) -> dict:
        return {"transition_encoder": self.encoder, "transition_head": self.head}


@dataclass(frozen=True)
class ObservationModel:
    net: nn.NetworkModel
    state_norm: Standardizer

    def forward(self, X):
        return nn.forward(self.net, np.atleast_2d(X), "deterministic")

    def backward(self, tape, grad):
        g = nn.backward(tape, grad)
        return {"observation": g}, g.input

    def networks(self) -> dict:
        return {"observation": self.net}


@dataclass(frozen=True)
class SensorModel:
    stem: nn.NetworkModel
    body: nn.NetworkModel
    obs_norm: Standardizer
    state_norm: Standardizer
    use_pe: bool = False
    embedding: EmbeddingConfig = DEFAULT_EMBEDDING

    @property
    def input_dim(self) -> int:
        return self.stem.in_dim

    def build_input(self, raw, placements) -> np.ndarray:
        """Normalize raw IMU rows and, with PE, interleave each IMU's 6 channels with its label embedding."""
        raw_n = self.obs_norm.encode(np.atleast_2d(raw))
        if not self.use_pe:
            return raw_n
        n = raw_n.shape[0]
        if isinstance(placements, PlacementSet):
            pe = np.broadcast_to(embed_placement(placements, self.embedding), (n, NUM_IMUS, self.embedding.d_model))
        else:
            pe = np.stack([embed_placement(z, self.embedding) for z in placements])
        per_imu = np.concatenate([raw_n.reshape(n, NUM_IMUS, IMU_CHANNELS), pe], axis=2)
        return per_imu.reshape(n, -1)

    def forward(self, inp, n_samples: int, rng=None, masks=None, mode="stochastic"):
        """``inp`` (B x in) from :meth:`build_input`; returns ``(B*n_samples) x 7`` samples.

        Rows are grouped per input: samples ``b*n_samples .. (b+1)*n_samples-1`` belong to row ``b``.
        """
        h, t_stem = self.stem_forward(inp)
        h = np.repeat(h, n_samples, axis=0)
        y, t_body = nn.forward(self.body, h, mode, rng, masks)
        return y, (t_stem, t_body, n_samples)

    def stem_forward(self, inp):
        return nn.forward(self.stem, np.atleast_2d(inp), "deterministic")

    def backward(self, cache, grad):
        t_stem, t_body, n_samples = cache
        g_body = nn.backward(t_body, grad)
        g_h = g_body.input.reshape(-1, n_samples, g_body.input.shape[1]).sum(axis=1)
        g_stem = nn.backward(t_stem, g_h)
        return {"sensor_stem": g_stem, "sensor_body": g_body}, g_stem.input

    def networks(self) -> dict:
        return {"sensor_stem": self.stem, "sensor_body": self.body}


@dataclass(frozen=True)
class NoiseModel:
    net: nn.NetworkModel
    state_norm: Standardizer

    def forward(self, Y):
        z, tape = nn.forward(self.net, np.atleast_2d(Y), "deterministic")
        return softplus(z) + NOISE_FLOOR, (tape, z)

    def backward(self, cache, grad):
        tape, z = cache
        g = nn.backward(tape, grad * sigmoid(z))
        return {"noise": g}, g.input

    def networks(self) -> dict:
        return {"noise": self.net}


@dataclass(frozen=True)
class DEnKFModels:
    """Everything the filter needs: four sub-modules sharing one state normalization."""

    transition: TransitionModel
    observation: ObservationModel
    sensor: SensorModel
    noise: NoiseModel
    variant: Variant = field(default_factory=Variant)
    layout_version: str = LAYOUT_VERSION

    state_dim = STATE_DIM

    @property
    def state_norm(self) -> Standardizer:
        return self.transition.state_norm

    def networks(self) -> dict[str, nn.NetworkModel]:
        out = {}
        for part in (self.transition, self.observation, self.sensor, self.noise):
            out.update(part.networks())
        return out

    def with_networks(self, nets: dict[str, nn.NetworkModel]) -> DEnKFModels:
        return replace(
            self,
            transition=replace(self.transition, encoder=nets["transition_encoder"], head=nets["transition_head"]),
            observation=replace(self.observation, net=nets["observation"]),
            sensor=replace(self.sensor, stem=nets["sensor_stem"], body=nets["sensor_body"]),
            noise=replace(self.noise, net=nets["noise"]),
        )

    # -- protocol used by the filter core (model coordinates) --

    def encode_state(self, x):
        return self.state_norm.encode(x)

    def decode_state(self, X):
        return self.state_norm.decode(X)

    def expose(self, mean):
        """Model-coordinate mean -> raw-unit state with unit quaternion."""
        return renormalize_state(self.decode_state(mean))

    def propagate(self, X, action, f, rngs):
        A = self.transition.action_norm.encode(as_vector(action, ACTION_DIM, "action"))
        out, _ = self.transition.forward(X, A, self.transition.freq_embedding(f), rngs)
        return out

    def observe_ensemble(self, X):
        out, _ = self.observation.forward(X)
        return out

    def sense_ensemble(self, raw, placement, rngs):
        inp = self.sensor.build_input(as_vector(raw, RAW_OBS_DIM, "raw observation"), placement)
        out, _ = self.sensor.forward(inp, len(rngs), rngs)
        return out

    def noise_variance(self, ybar):
        out, _ = self.noise.forward(ybar)
        return out[0]


def build_models(
    variant: Variant | str = "fix",
    *,
    seed: int = 0,
    dropout_rate: float = DEFAULT_DROPOUT,
    state_norm: Standardizer | None = None,
    action_norm: Standardizer | None = None,
    obs_norm: Standardizer | None = None,
) -> DEnKFModels:
    """Freshly initialized sub-modules with the fixed architectures."""
    if isinstance(variant, str):
        variant = Variant.parse(variant)
    rng = np.random.default_rng([seed, 0x5EED])
    state_norm = state_norm or Standardizer.identity(STATE_DIM)
    action_norm = action_norm or Standardizer.identity(ACTION_DIM)
    obs_norm = obs_norm or Standardizer.identity(RAW_OBS_DIM)
    d = variant.embedding.d_model
    latent = 64
    if variant.use_te and d != latent:
        raise InvalidArgumentError(f"frequency embedding width {d} must equal the transition latent width {latent}")
    transition = TransitionModel(
        encoder=nn.build_network([STATE_DIM + ACTION_DIM, 64, latent], True, dropout_rate=dropout_rate, rng=rng,
                                 final_activation="relu"),
        head=nn.build_network([latent, 128, 128, STATE_DIM], True, dropout_rate=dropout_rate, rng=rng),
        state_norm=state_norm,
        action_norm=action_norm,
        use_te=variant.use_te,
        embedding=variant.embedding,
    )
    observation = ObservationModel(nn.build_network([STATE_DIM, 32, 32, 64, 64, STATE_DIM], rng=rng), state_norm)
    sensor_in = NUM_IMUS * (IMU_CHANNELS + d) if variant.use_pe else RAW_OBS_DIM
    sensor = SensorModel(
        stem=nn.build_network([sensor_in, 128], False, rng=rng, final_activation="relu"),
        body=nn.build_network([128, 512, 512, 256, 128, STATE_DIM], True, dropout_rate=dropout_rate, rng=rng),
        obs_norm=obs_norm,
        state_norm=state_norm,
        use_pe=variant.use_pe,
        embedding=variant.embedding,
    )
    noise = NoiseModel(nn.build_network([STATE_DIM, 16, 16, STATE_DIM], rng=rng), state_norm)
    return DEnKFModels(transition, observation, sensor, noise, variant)


# -- checkpoints ------------------------------------------------------------


def save_models(path, models: DEnKFModels, extra_meta: dict | None = None, extra_arrays: dict | None = None):
    v = models.variant
    meta = {
        "role": "denkf-models",
        "layout_version": models.layout_version,
        "variant": v.name,
        "use_pe": v.use_pe,
        "use_te": v.use_te,
        "d_model": v.embedding.d_model,
        "embedding_base": v.embedding.base,
        "placement_injection": "concat-per-imu",
        "frequency_injection": "add-to-transition-latent",
        "roles": {
            "transition_encoder": "transition",
            "transition_head": "transition",
            "observation": "observation",
            "sensor_stem": "sensor",
            "sensor_body": "sensor",
            "noise": "noise",
        },
        **(extra_meta or {}),
    }
    arrays = {
        "norm/state_mean": models.state_norm.mean,
        "norm/state_std": models.state_norm.std,
        "norm/action_mean": models.transition.action_norm.mean,
        "norm/action_std": models.transition.action_norm.std,
        "norm/obs_mean": models.sensor.obs_norm.mean,
        "norm/obs_std": models.sensor.obs_norm.std,
        **(extra_arrays or {}),
    }
    nn.save_checkpoint(path, models.networks(), meta, arrays)


def load_models(path, expected_layout: str = LAYOUT_VERSION, with_arrays: bool = False):
    """Returns ``(models, meta)``, or ``(models, meta, extra_arrays)`` with ``with_arrays``."""
    nets, meta, arrays = nn.load_checkpoint(path)
    if meta.get("layout_version") != expected_layout:
        raise IncompatibleCheckpointError(
            f"checkpoint layout {meta.get('layout_version')!r} is incompatible with {expected_layout!r}"
        )
    emb = EmbeddingConfig(int(meta["d_model"]), float(meta["embedding_base"]))
    variant = Variant(bool(meta["use_pe"]), bool(meta["use_te"]), emb)
    state_norm = Standardizer(arrays["norm/state_mean"], arrays["norm/state_std"])
    action_norm = Standardizer(arrays["norm/action_mean"], arrays["norm/action_std"])
    obs_norm = Standardizer(arrays["norm/obs_mean"], arrays["norm/obs_std"])
    models = DEnKFModels(
        TransitionModel(nets["transition_encoder"], nets["transition_head"], state_norm, action_norm,
                        variant.use_te, emb),
        ObservationModel(nets["observation"], state_norm),
        SensorModel(nets["sensor_stem"], nets["sensor_body"], obs_norm, state_norm, variant.use_pe, emb),
        NoiseModel(nets["noise"], state_norm),
        variant,
        meta["layout_version"],
    )
    return (models, meta, arrays) if with_arrays else (models, meta)


# -- single-sample operations in raw units ------------------------------------


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def transition_sample(m: TransitionModel, state, action, f: SamplingFrequency, seed) -> np.ndarray:
    """One stochastic step from a raw-unit state; returns the raw-unit next state."""
    x = m.state_norm.encode(as_vector(state, STATE_DIM, "state"))
    a = m.action_norm.encode(as_vector(action, ACTION_DIM, "action"))
    out, _ = m.forward(x, a, m.freq_embedding(f), _rng(seed))
    return m.state_norm.decode(out[0])


def observe(m: ObservationModel, state) -> np.ndarray:
    """Deterministic map of a raw-unit state into (raw-unit) observation space."""
    x = m.state_norm.encode(as_vector(state, STATE_DIM, "state"))
    out, _ = m.forward(x)
    return m.state_norm.decode(out[0])


def sense(m: SensorModel, raw, z: PlacementSet, seed, n_samples: int = 1) -> np.ndarray:
    """Draw learned observations (raw units) from one raw IMU reading.

    Returns a 7-vector for ``n_samples == 1``, otherwise an ``n_samples x 7`` matrix.
    """
    inp = m.build_input(as_vector(raw, RAW_OBS_DIM, "raw observation"), z)
    out, _ = m.forward(inp, n_samples, _rng(seed))
    out = m.state_norm.decode(out)
    return out[0] if n_samples == 1 else out


def noise_diag(m: NoiseModel, learned_mean) -> np.ndarray:
    """Positive measurement-noise variances in model coordinates for a raw-unit learned observation."""
    y = m.state_norm.encode(as_vector(learned_mean, STATE_DIM, "learned observation"))
    out, _ = m.forward(y)
    return out[0]
