"""Cycle-token models and baselines.

The cycle-patch model treats each cycle as a 900-wide token (3 variables x
300 points). Tokens share one embedding affine; an intra-cycle encoder of
residual feed-forward blocks refines each token; the refined embeddings are
concatenated, zero-padded to 100 cycle slots, and an inter-cycle encoder
(a residual MLP over the flattened slots, or mean pooling when disabled)
produces the vector v from which a linear projection predicts cycle life.

The flattened-MLP baseline applies the same residual-block stack to the
whole zero-padded 30,000-point input. The dummy predictor returns the mean
training label.

Regression targets are standardized with train-split statistics carried in
the checkpoint; predictions are always reported in cycle units.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import diffkernel as dk
from .errors import ConfigError, ShapeError, ValidationError
from .preprocess import CYCLE_POINTS, MAX_INPUT_CYCLES, N_VARIABLES, SampleTensor

TOKEN_WIDTH = N_VARIABLES * CYCLE_POINTS  # 900
FLAT_INPUT_WIDTH = N_VARIABLES * MAX_INPUT_CYCLES * CYCLE_POINTS  # 30000


@dataclass(frozen=True)
class MlpStackEncoder:
    """Residual-MLP inter-cycle encoder: `layers` blocks of width `hidden`."""

    layers: int
    hidden: int


@dataclass(frozen=True)
class CyclePatchConfig:
    embed_width: int = 32  # token embedding width
    intra_hidden: int = 64  # bottleneck width inside intra blocks
    intra_layers: int = 2
    inter: Optional[MlpStackEncoder] = MlpStackEncoder(layers=2, hidden=64)
    dropout: float = 0.0
    disable_intra: bool = False
    disable_inter: bool = False
    ln_affine: bool = False

    def __post_init__(self):
        if self.embed_width < 1 or self.intra_hidden < 1:
            raise ConfigError("embed_width and intra_hidden must be >= 1")
        if self.intra_layers < 0:
            raise ConfigError("intra_layers must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.inter is not None and (self.inter.layers < 0 or self.inter.hidden < 1):
            raise ConfigError("inter encoder needs layers >= 0 and hidden >= 1")

    @property
    def effective_intra_layers(self) -> int:
        return 0 if self.disable_intra else self.intra_layers

    @property
    def effective_inter(self) -> Optional[MlpStackEncoder]:
        return None if self.disable_inter else self.inter


@dataclass(frozen=True)
class MlpBaselineConfig:
    width: int = 64
    hidden: int = 128
    layers: int = 2
    dropout: float = 0.0
    ln_affine: bool = False

    def __post_init__(self):
        if self.width < 1 or self.hidden < 1 or self.layers < 0:
            raise ConfigError("width and hidden must be >= 1, layers >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass
class ModelOutput:
    prediction: np.ndarray  # (n,) cycle-life predictions, natural units
    embedding: Optional[np.ndarray] = None  # (n, width) pre-projection vectors


def segment(sample: SampleTensor) -> np.ndarray:
    """The S cycle tokens of a sample, each a 900-vector.

    Token i is the flattened (3 x 300) slice of cycle i with rows in
    (capacity, voltage, current) order. Padding slots yield no tokens.
    """
    s = sample.usable_cycles
    block = sample.data[:, :s, :]  # (3, S, 300)
    return np.ascontiguousarray(np.transpose(block, (1, 0, 2)), dtype=np.float64).reshape(s, TOKEN_WIDTH)


def _check_input_stat(value, width: int, default: float) -> np.ndarray:
    if value is None:
        return np.full(width, default)
    arr = np.asarray(value, dtype=np.float64).reshape(-1)
    if arr.shape != (width,):
        raise ShapeError(f"input statistic must have {width} entries, got {arr.shape}")
    return arr.copy()


def _standardization(total: np.ndarray, total_sq: np.ndarray, count: int) -> tuple[np.ndarray, np.ndarray]:
    center = total / count
    var = np.maximum(total_sq / count - center * center, 0.0)
    scale = np.sqrt(var)
    scale[scale <= 1e-6] = 1.0
    return center, scale


def token_statistics(samples: Sequence[SampleTensor]) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate mean and std of all cycle tokens in a sample set.

    Folded into the token embedding as a fixed affine map, this leaves the
    model family unchanged (an affine embedding absorbs any affine input
    map) but conditions the optimization enormously better than the raw
    normalized channels, whose informative variation is small against a
    large constant offset.
    """
    total = np.zeros(TOKEN_WIDTH)
    total_sq = np.zeros(TOKEN_WIDTH)
    count = 0
    for s in samples:
        tokens = segment(s)
        total += tokens.sum(axis=0)
        total_sq += (tokens * tokens).sum(axis=0)
        count += tokens.shape[0]
    if count == 0:
        raise ValidationError("token statistics need at least one sample")
    return _standardization(total, total_sq, count)


def flat_statistics(samples: Sequence[SampleTensor]) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate mean and std of flattened zero-padded inputs."""
    total = np.zeros(FLAT_INPUT_WIDTH)
    total_sq = np.zeros(FLAT_INPUT_WIDTH)
    for s in samples:
        flat = np.asarray(s.data, dtype=np.float64).reshape(-1)
        total += flat
        total_sq += flat * flat
    if not samples:
        raise ValidationError("input statistics need at least one sample")
    return _standardization(total, total_sq, len(samples))


def _batch_tokens(samples: Sequence[SampleTensor]) -> np.ndarray:
    s = samples[0].usable_cycles
    if any(x.usable_cycles != s for x in samples):
        raise ShapeError("a batch must contain samples with one usable-cycle count")
    return np.stack([segment(x) for x in samples])  # (B, S, 900)


def _group_by_usable_cycles(samples: Sequence[SampleTensor]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for pos, s in enumerate(samples):
        groups.setdefault(s.usable_cycles, []).append(pos)
    return groups


# ---------------------------------------------------------------------------
# Residual feed-forward blocks (shared by intra, inter, and the baseline MLP)
# ---------------------------------------------------------------------------

def _add_block_params(params: dk.ParameterSet, prefix: str, width: int, hidden: int, ln_affine: bool, seed: int):
    params.add(f"{prefix}.w1", dk.uniform_init((hidden, width), width, seed, f"{prefix}.w1"))
    params.add(f"{prefix}.b1", np.zeros((1, hidden)))
    params.add(f"{prefix}.w2", dk.uniform_init((width, hidden), hidden, seed, f"{prefix}.w2"))
    params.add(f"{prefix}.b2", np.zeros((1, width)))
    if ln_affine:
        params.add(f"{prefix}.ln_g", np.ones((1, width)))
        params.add(f"{prefix}.ln_b", np.zeros((1, width)))


def _block_forward(params, prefix, z, ln_affine, dropout, training, rng):
    a1 = dk.affine_forward(z, params.value(f"{prefix}.w1"), params.value(f"{prefix}.b1"))
    r = dk.relu_forward(a1)
    h, mask = dk.dropout_forward(r, dropout if training else 0.0, rng)
    a2 = dk.affine_forward(h, params.value(f"{prefix}.w2"), params.value(f"{prefix}.b2"))
    y, ln_cache = dk.layer_norm_forward(a2 + z)
    if ln_affine:
        out = y * params.value(f"{prefix}.ln_g") + params.value(f"{prefix}.ln_b")
    else:
        out = y
    return out, (z, a1, h, mask, ln_cache, y)


def _block_backward(params, prefix, d_out, cache, ln_affine):
    z, a1, h, mask, ln_cache, y = cache
    if ln_affine:
        params.accumulate(f"{prefix}.ln_g", (d_out * y).sum(axis=0, keepdims=True))
        params.accumulate(f"{prefix}.ln_b", d_out.sum(axis=0, keepdims=True))
        d_y = d_out * params.value(f"{prefix}.ln_g")
    else:
        d_y = d_out
    d_sum = dk.layer_norm_backward(d_y, ln_cache)
    d_h, d_w2, d_b2 = dk.affine_backward(d_sum, h, params.value(f"{prefix}.w2"))
    params.accumulate(f"{prefix}.w2", d_w2)
    params.accumulate(f"{prefix}.b2", d_b2)
    d_r = dk.dropout_backward(d_h, mask)
    d_a1 = dk.relu_backward(d_r, a1)
    d_z, d_w1, d_b1 = dk.affine_backward(d_a1, z, params.value(f"{prefix}.w1"))
    params.accumulate(f"{prefix}.w1", d_w1)
    params.accumulate(f"{prefix}.b1", d_b1)
    return d_z + d_sum  # residual connection


# ---------------------------------------------------------------------------
# Cycle-patch model
# ---------------------------------------------------------------------------

class CyclePatchModel:
    family = "cyclepatch"

    def __init__(
        self,
        config: CyclePatchConfig,
        seed: int = 0,
        target_mean: float = 0.0,
        target_scale: float = 1.0,
        input_center=None,
        input_scale=None,
    ):
        if target_scale <= 0:
            raise ConfigError(f"target_scale must be positive, got {target_scale!r}")
        self.config = config
        self.target_mean = float(target_mean)
        self.target_scale = float(target_scale)
        self.input_center = _check_input_stat(input_center, TOKEN_WIDTH, 0.0)
        self.input_scale = _check_input_stat(input_scale, TOKEN_WIDTH, 1.0)
        self.params = dk.ParameterSet()
        d1 = config.embed_width
        self.params.add("embed.w", dk.uniform_init((d1, TOKEN_WIDTH), TOKEN_WIDTH, seed, "embed.w"))
        self.params.add("embed.b", np.zeros((1, d1)))
        for l in range(config.effective_intra_layers):
            _add_block_params(self.params, f"intra.{l}", d1, config.intra_hidden, config.ln_affine, seed)
        inter = config.effective_inter
        if inter is not None:
            flat = MAX_INPUT_CYCLES * d1
            self.params.add("inter.embed.w", dk.uniform_init((inter.hidden, flat), flat, seed, "inter.embed.w"))
            self.params.add("inter.embed.b", np.zeros((1, inter.hidden)))
            for l in range(inter.layers):
                _add_block_params(self.params, f"inter.{l}", inter.hidden, inter.hidden, config.ln_affine, seed)
            proj_in = inter.hidden
        else:
            proj_in = d1
        self.params.add("proj.w", dk.uniform_init((1, proj_in), proj_in, seed, "proj.w"))
        self.params.add("proj.b", np.zeros((1, 1)))

    @property
    def embedding_width(self) -> int:
        inter = self.config.effective_inter
        return inter.hidden if inter is not None else self.config.embed_width

    def to_natural(self, raw: np.ndarray) -> np.ndarray:
        return self.target_mean + self.target_scale * raw

    def forward_tokens(self, tokens: np.ndarray, training: bool = False, rng=None):
        """Raw (standardized) predictions, embeddings v, and the backward cache.

        tokens has shape (batch, S, 900) with one S for the whole batch.
        """
        cfg = self.config
        b, s, width = tokens.shape
        if width != TOKEN_WIDTH:
            raise ShapeError(f"tokens must be {TOKEN_WIDTH} wide, got {width}")
        d1 = cfg.embed_width
        flat_tokens = (tokens.reshape(b * s, width) - self.input_center) / self.input_scale
        z = dk.affine_forward(flat_tokens, self.params.value("embed.w"), self.params.value("embed.b"))
        intra_caches = []
        for l in range(cfg.effective_intra_layers):
            z, cache = _block_forward(self.params, f"intra.{l}", z, cfg.ln_affine, cfg.dropout, training, rng)
            intra_caches.append(cache)

        inter = cfg.effective_inter
        inter_caches = []
        if inter is not None:
            padded = np.zeros((b, MAX_INPUT_CYCLES * d1))
            padded[:, : s * d1] = z.reshape(b, s * d1)
            v = dk.affine_forward(padded, self.params.value("inter.embed.w"), self.params.value("inter.embed.b"))
            for l in range(inter.layers):
                v, cache = _block_forward(self.params, f"inter.{l}", v, cfg.ln_affine, cfg.dropout, training, rng)
                inter_caches.append(cache)
            pool_cache = padded
        else:
            v = z.reshape(b, s, d1).mean(axis=1)
            pool_cache = None
        raw = dk.affine_forward(v, self.params.value("proj.w"), self.params.value("proj.b"))[:, 0]
        cache = (tokens, flat_tokens, z, intra_caches, v, inter_caches, pool_cache, b, s)
        return raw, v, cache

    def backward(self, cache, d_raw: np.ndarray, d_v: Optional[np.ndarray] = None) -> None:
        """Accumulate parameter gradients for upstream d(raw) and optional d(v)."""
        cfg = self.config
        tokens, flat_tokens, z, intra_caches, v, inter_caches, pool_cache, b, s = cache
        d1 = cfg.embed_width
        d_vtotal, d_pw, d_pb = dk.affine_backward(
            d_raw.reshape(-1, 1), v, self.params.value("proj.w")
        )
        self.params.accumulate("proj.w", d_pw)
        self.params.accumulate("proj.b", d_pb)
        if d_v is not None:
            d_vtotal = d_vtotal + d_v

        inter = cfg.effective_inter
        if inter is not None:
            for l in reversed(range(inter.layers)):
                d_vtotal = _block_backward(self.params, f"inter.{l}", d_vtotal, inter_caches[l], cfg.ln_affine)
            d_padded, d_iw, d_ib = dk.affine_backward(
                d_vtotal, pool_cache, self.params.value("inter.embed.w")
            )
            self.params.accumulate("inter.embed.w", d_iw)
            self.params.accumulate("inter.embed.b", d_ib)
            d_z = d_padded[:, : s * d1].reshape(b * s, d1)
        else:
            d_z = np.repeat(d_vtotal / s, s, axis=0)

        for l in reversed(range(cfg.effective_intra_layers)):
            d_z = _block_backward(self.params, f"intra.{l}", d_z, intra_caches[l], cfg.ln_affine)
        _, d_ew, d_eb = dk.affine_backward(d_z, flat_tokens, self.params.value("embed.w"))
        self.params.accumulate("embed.w", d_ew)
        self.params.accumulate("embed.b", d_eb)

    def forward_batch(self, samples: Sequence[SampleTensor], training: bool = False, rng=None):
        return self.forward_tokens(_batch_tokens(samples), training=training, rng=rng)

    def predict(self, samples: Sequence[SampleTensor]) -> ModelOutput:
        """Natural-scale predictions for samples of any mixed usable-cycle counts."""
        pred = np.empty(len(samples))
        emb = np.empty((len(samples), self.embedding_width))
        for _, positions in sorted(_group_by_usable_cycles(samples).items()):
            raw, v, _ = self.forward_batch([samples[k] for k in positions])
            pred[positions] = self.to_natural(raw)
            emb[positions] = v
        return ModelOutput(prediction=pred, embedding=emb)

    def cycle_embeddings(self, sample: SampleTensor) -> np.ndarray:
        """The S x embed_width matrix of refined token embeddings (pre-padding)."""
        tokens = segment(sample)[None, :, :]
        _, _, cache = self.forward_tokens(tokens)
        z = cache[2]
        return z.reshape(sample.usable_cycles, self.config.embed_width)


def cyclepatch_parameter_count(config: CyclePatchConfig) -> int:
    """Closed-form parameter count for a cycle-patch configuration."""
    d1 = config.embed_width
    d2 = config.intra_hidden
    block = lambda width, hidden: hidden * width + hidden + width * hidden + width + (2 * width if config.ln_affine else 0)
    total = d1 * TOKEN_WIDTH + d1
    total += config.effective_intra_layers * block(d1, d2)
    inter = config.effective_inter
    if inter is not None:
        total += inter.hidden * (MAX_INPUT_CYCLES * d1) + inter.hidden
        total += inter.layers * block(inter.hidden, inter.hidden)
        total += inter.hidden + 1
    else:
        total += d1 + 1
    return total


# ---------------------------------------------------------------------------
# Flattened-MLP baseline
# ---------------------------------------------------------------------------

class MlpBaselineModel:
    family = "mlp"

    def __init__(
        self,
        config: MlpBaselineConfig,
        seed: int = 0,
        target_mean: float = 0.0,
        target_scale: float = 1.0,
        input_center=None,
        input_scale=None,
    ):
        if target_scale <= 0:
            raise ConfigError(f"target_scale must be positive, got {target_scale!r}")
        self.config = config
        self.target_mean = float(target_mean)
        self.target_scale = float(target_scale)
        self.input_center = _check_input_stat(input_center, FLAT_INPUT_WIDTH, 0.0)
        self.input_scale = _check_input_stat(input_scale, FLAT_INPUT_WIDTH, 1.0)
        self.params = dk.ParameterSet()
        d = config.width
        self.params.add("embed.w", dk.uniform_init((d, FLAT_INPUT_WIDTH), FLAT_INPUT_WIDTH, seed, "embed.w"))
        self.params.add("embed.b", np.zeros((1, d)))
        for l in range(config.layers):
            _add_block_params(self.params, f"stack.{l}", d, config.hidden, config.ln_affine, seed)
        self.params.add("proj.w", dk.uniform_init((1, d), d, seed, "proj.w"))
        self.params.add("proj.b", np.zeros((1, 1)))

    @property
    def embedding_width(self) -> int:
        return self.config.width

    def to_natural(self, raw: np.ndarray) -> np.ndarray:
        return self.target_mean + self.target_scale * raw

    def forward_flat(self, flat: np.ndarray, training: bool = False, rng=None):
        if flat.ndim != 2 or flat.shape[1] != FLAT_INPUT_WIDTH:
            raise ShapeError(f"baseline input must be (n, {FLAT_INPUT_WIDTH}), got {flat.shape}")
        cfg = self.config
        flat = (flat - self.input_center) / self.input_scale
        z = dk.affine_forward(flat, self.params.value("embed.w"), self.params.value("embed.b"))
        caches = []
        for l in range(cfg.layers):
            z, cache = _block_forward(self.params, f"stack.{l}", z, cfg.ln_affine, cfg.dropout, training, rng)
            caches.append(cache)
        raw = dk.affine_forward(z, self.params.value("proj.w"), self.params.value("proj.b"))[:, 0]
        return raw, z, (flat, caches, z)

    def backward(self, cache, d_raw: np.ndarray, d_v: Optional[np.ndarray] = None) -> None:
        flat, caches, z = cache
        d_z, d_pw, d_pb = dk.affine_backward(d_raw.reshape(-1, 1), z, self.params.value("proj.w"))
        self.params.accumulate("proj.w", d_pw)
        self.params.accumulate("proj.b", d_pb)
        if d_v is not None:
            d_z = d_z + d_v
        for l in reversed(range(self.config.layers)):
            d_z = _block_backward(self.params, f"stack.{l}", d_z, caches[l], self.config.ln_affine)
        _, d_ew, d_eb = dk.affine_backward(d_z, flat, self.params.value("embed.w"))
        self.params.accumulate("embed.w", d_ew)
        self.params.accumulate("embed.b", d_eb)

    def forward_batch(self, samples: Sequence[SampleTensor], training: bool = False, rng=None):
        flat = np.stack([np.asarray(s.data, dtype=np.float64).reshape(-1) for s in samples])
        return self.forward_flat(flat, training=training, rng=rng)

    def predict(self, samples: Sequence[SampleTensor]) -> ModelOutput:
        raw, v, _ = self.forward_batch(samples)
        return ModelOutput(prediction=self.to_natural(raw), embedding=v)


def mlp_parameter_count(config: MlpBaselineConfig) -> int:
    d = config.width
    block = d * config.hidden + config.hidden + config.hidden * d + d + (2 * d if config.ln_affine else 0)
    return d * FLAT_INPUT_WIDTH + d + config.layers * block + d + 1


# ---------------------------------------------------------------------------
# Dummy baseline
# ---------------------------------------------------------------------------

def dummy_fit_predict(train_labels: Sequence[float], query=None) -> float:
    """The no-information floor: the mean training label, whatever the query."""
    if len(train_labels) == 0:
        raise ValidationError("dummy predictor needs at least one training label")
    return float(np.mean(np.asarray(train_labels, dtype=float)))


class DummyModel:
    family = "dummy"

    def __init__(self, train_labels: Sequence[float]):
        self.mean_label = dummy_fit_predict(train_labels)

    def predict(self, samples: Sequence[SampleTensor]) -> ModelOutput:
        return ModelOutput(prediction=np.full(len(samples), self.mean_label), embedding=None)


# ---------------------------------------------------------------------------
# Construction and checkpoints
# ---------------------------------------------------------------------------

def _config_to_dict(config) -> dict:
    out = dataclasses.asdict(config)
    return out


def config_from_dict(family: str, obj: dict):
    if family == "cyclepatch":
        inter = obj.get("inter")
        return CyclePatchConfig(
            embed_width=obj["embed_width"],
            intra_hidden=obj["intra_hidden"],
            intra_layers=obj["intra_layers"],
            inter=None if inter is None else MlpStackEncoder(layers=inter["layers"], hidden=inter["hidden"]),
            dropout=obj.get("dropout", 0.0),
            disable_intra=obj.get("disable_intra", False),
            disable_inter=obj.get("disable_inter", False),
            ln_affine=obj.get("ln_affine", False),
        )
    if family == "mlp":
        return MlpBaselineConfig(
            width=obj["width"],
            hidden=obj["hidden"],
            layers=obj["layers"],
            dropout=obj.get("dropout", 0.0),
            ln_affine=obj.get("ln_affine", False),
        )
    raise ConfigError(f"unknown model family {family!r}")


def build_model(
    family: str,
    config,
    seed: int = 0,
    target_mean: float = 0.0,
    target_scale: float = 1.0,
    input_center=None,
    input_scale=None,
):
    kwargs = dict(
        seed=seed,
        target_mean=target_mean,
        target_scale=target_scale,
        input_center=input_center,
        input_scale=input_scale,
    )
    if family == "cyclepatch":
        return CyclePatchModel(config, **kwargs)
    if family == "mlp":
        return MlpBaselineModel(config, **kwargs)
    raise ConfigError(f"unknown model family {family!r}")


def save_model(model, path) -> None:
    if model.family == "dummy":
        dk.save_checkpoint(dk.ParameterSet(), {"family": "dummy", "config": {"mean_label": model.mean_label}}, path)
        return
    header = {
        "family": model.family,
        "config": _config_to_dict(model.config),
        "target_mean": model.target_mean,
        "target_scale": model.target_scale,
        "input_center": [float(v) for v in model.input_center],
        "input_scale": [float(v) for v in model.input_scale],
    }
    dk.save_checkpoint(model.params, header, path)


def load_model(path):
    params, header = dk.load_checkpoint(path)
    if header["family"] == "dummy":
        return DummyModel([header["config"]["mean_label"]])
    config = config_from_dict(header["family"], header["config"])
    model = build_model(
        header["family"],
        config,
        seed=0,
        target_mean=header["target_mean"],
        target_scale=header["target_scale"],
        input_center=header.get("input_center"),
        input_scale=header.get("input_scale"),
    )
    model.params.load_values(params)
    return model
