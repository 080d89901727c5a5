"""Minimal reverse-mode kernels and the Adam optimizer.

Everything the models train with lives here: dense affine maps, layer
normalization (no learned affine by default), the rectifier, mean squared
error, inverted dropout, and bias-corrected Adam. All math is float64.
Forward functions return caches where the backward pass needs them; the
backward functions implement the exact chain rule and are validated against
central finite differences by check_gradients.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import NumericalError, ParseError, ShapeError, ValidationError
from .seeding import substream

CHECKPOINT_MAGIC = b"BLPW"
CHECKPOINT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
LAYER_NORM_EPS = 1e-5


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    m: np.ndarray
    v: np.ndarray


class ParameterSet:
    """Named registry of 2-D float64 parameters with gradient and Adam slots."""

    def __init__(self):
        self._params: dict[str, Param] = {}
        self.t = 0

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self._params:
            raise ValidationError(f"parameter {name!r} already registered")
        value = np.array(value, dtype=np.float64)
        if value.ndim != 2:
            raise ShapeError(f"parameter {name!r} must be 2-D, got shape {value.shape}")
        self._params[name] = Param(
            value=value, grad=np.zeros_like(value), m=np.zeros_like(value), v=np.zeros_like(value)
        )
        return value

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return sorted(self._params)

    def value(self, name: str) -> np.ndarray:
        return self._params[name].value

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        p = self._params[name]
        if grad.shape != p.grad.shape:
            raise ShapeError(f"gradient for {name!r} has shape {grad.shape}, parameter has {p.grad.shape}")
        p.grad += grad

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad.fill(0.0)

    def n_parameters(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def copy(self) -> "ParameterSet":
        out = ParameterSet()
        for name in self._params:
            p = self._params[name]
            out._params[name] = Param(p.value.copy(), p.grad.copy(), p.m.copy(), p.v.copy())
        out.t = self.t
        return out

    def load_values(self, other: "ParameterSet") -> None:
        """Copy parameter values (not optimizer state) from another set."""
        if self.names() != other.names():
            raise ShapeError(f"parameter names differ: {self.names()} vs {other.names()}")
        for name, p in self._params.items():
            src = other._params[name].value
            if src.shape != p.value.shape:
                raise ShapeError(f"parameter {name!r}: shape {src.shape} vs {p.value.shape}")
            p.value[...] = src


def uniform_init(shape: tuple[int, int], fan_in: int, seed: int, name: str) -> np.ndarray:
    """Uniform in +-sqrt(1/fan_in), from a substream fixed by (seed, name)."""
    rng = substream(seed, "init", name)
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------

def affine_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """y = x W^T + b, rows of x are independent samples."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"affine: x {x.shape} incompatible with W {w.shape}")
    if b.reshape(-1).shape[0] != w.shape[0]:
        raise ShapeError(f"affine: bias {b.shape} incompatible with W {w.shape}")
    return x @ w.T + b.reshape(1, -1)


def affine_backward(d_y: np.ndarray, x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dL/dx, dL/dW, dL/db) for y = x W^T + b."""
    if d_y.shape != (x.shape[0], w.shape[0]):
        raise ShapeError(f"affine backward: dY {d_y.shape}, expected {(x.shape[0], w.shape[0])}")
    d_x = d_y @ w
    d_w = d_y.T @ x
    d_b = d_y.sum(axis=0, keepdims=True)
    return d_x, d_w, d_b


def layer_norm_forward(x: np.ndarray, eps: float = LAYER_NORM_EPS) -> tuple[np.ndarray, tuple]:
    """Per-row (x - mean) / sqrt(var + eps); no learned gain or bias."""
    if x.ndim != 2 or x.shape[1] < 2:
        raise NumericalError(f"layer norm needs rows of width >= 2, got shape {x.shape}")
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    y = (x - mean) * inv_std
    return y, (y, inv_std)


def layer_norm_backward(d_y: np.ndarray, cache: tuple) -> np.ndarray:
    y, inv_std = cache
    d = y.shape[1]
    row_mean_dy = d_y.mean(axis=1, keepdims=True)
    row_mean_dyy = (d_y * y).mean(axis=1, keepdims=True)
    return inv_std * (d_y - row_mean_dy - y * row_mean_dyy)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(d_y: np.ndarray, x: np.ndarray) -> np.ndarray:
    # Subgradient 0 at the kink.
    return d_y * (x > 0.0)


def dropout_forward(x: np.ndarray, rate: float, rng: np.random.Generator) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Inverted dropout; mask is None when rate is 0 (identity)."""
    if not 0.0 <= rate < 1.0:
        raise ValidationError(f"dropout rate must be in [0, 1), got {rate!r}")
    if rate == 0.0:
        return x, None
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(d_y: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    return d_y if mask is None else d_y * mask


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient 2 (pred - target) / n."""
    pred = np.asarray(pred, dtype=float).reshape(-1)
    target = np.asarray(target, dtype=float).reshape(-1)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: pred {pred.shape} vs target {target.shape}")
    if pred.size == 0:
        raise ValidationError("mse needs at least one element")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def adam_step(
    params: ParameterSet,
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> None:
    """Bias-corrected Adam update over all parameters, then zero the gradients."""
    params.t += 1
    t = params.t
    for name in params.names():
        p = params[name]
        if not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
        p.m *= beta1
        p.m += (1.0 - beta1) * p.grad
        p.v *= beta2
        p.v += (1.0 - beta2) * p.grad * p.grad
        m_hat = p.m / (1.0 - beta1**t)
        v_hat = p.v / (1.0 - beta2**t)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    params.zero_grads()


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    checked: int
    size: int


@dataclass
class GradCheckReport:
    tolerance: float
    entries: dict[str, GradCheckEntry] = field(default_factory=dict)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries.values()), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [f"gradient check: {status} (max rel err {self.max_rel_err:.3e}, tol {self.tolerance:.1e})"]
        for name in sorted(self.entries):
            e = self.entries[name]
            lines.append(f"  {name}: max rel err {e.max_rel_err:.3e} over {e.checked}/{e.size} entries")
        return "\n".join(lines)


def check_gradients(
    loss_and_grads: Callable[[], float],
    params: ParameterSet,
    tolerance: float,
    step: float = 1e-5,
    coord_budget: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Central finite differences against the analytic gradients.

    loss_and_grads must run a deterministic forward/backward pass, leave
    gradients in params, and return the loss. Parameters larger than
    coord_budget are checked on a seeded random subset of coordinates
    (reported per entry); smaller ones are checked exhaustively.
    """
    params.zero_grads()
    loss_and_grads()
    analytic = {name: params[name].grad.copy() for name in params.names()}

    report = GradCheckReport(tolerance=tolerance)
    rng = substream(seed, "gradcheck")
    for name in params.names():
        value = params[name].value
        flat = value.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        size = flat.size
        if coord_budget is not None and size > coord_budget:
            coords = np.sort(rng.choice(size, size=coord_budget, replace=False))
        else:
            coords = np.arange(size)
        # Floor the relative-error denominator at a fraction of the largest
        # gradient entry so near-zero components are compared on that scale.
        g_scale = max(float(np.max(np.abs(a_flat))), 1e-12)
        worst = 0.0
        for k in coords:
            orig = flat[k]
            flat[k] = orig + step
            loss_plus = loss_and_grads()
            flat[k] = orig - step
            loss_minus = loss_and_grads()
            flat[k] = orig
            numeric = (loss_plus - loss_minus) / (2.0 * step)
            a = a_flat[k]
            denom = max(abs(a), abs(numeric), 1e-3 * g_scale, 1e-12)
            worst = max(worst, abs(a - numeric) / denom)
        report.entries[name] = GradCheckEntry(name=name, max_rel_err=worst, checked=len(coords), size=size)
    params.zero_grads()
    loss_and_grads()
    return report


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params: ParameterSet, config: dict, path) -> None:
    """Self-describing weight file: config JSON header plus named f64 arrays."""
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(Path(path), "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        names = params.names()
        f.write(struct.pack("<I", len(names)))
        for name in names:
            encoded = name.encode("utf-8")
            rows, cols = params[name].value.shape
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<II", rows, cols))
            f.write(np.ascontiguousarray(params[name].value, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ParameterSet, dict]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    (blob_len,) = struct.unpack_from("<I", raw, 8)
    offset = 12
    config = json.loads(raw[offset : offset + blob_len].decode("utf-8"))
    offset += blob_len
    (n_params,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    params = ParameterSet()
    for _ in range(n_params):
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        rows, cols = struct.unpack_from("<II", raw, offset)
        offset += 8
        count = rows * cols
        value = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(rows, cols)
        offset += count * 8
        params.add(name, value.copy())
    if offset != len(raw):
        raise ParseError(f"{path}: {len(raw) - offset} trailing bytes")
    return params, config
