"""Splits, metrics, training, and the analysis protocols.

Splitting is at battery granularity by default so no battery leaks samples
across train/val/test. Training minimizes mean squared error with Adam on
standardized targets, batching samples with one usable-cycle count together;
the checkpoint returned is the epoch with the lowest validation MAPE. The
analysis protocols are the usable-cycle sweep, the seen/unseen aging
condition breakdown, and cross-domain transfer (frozen, fine-tune, and
domain adaptation with a squared maximum mean discrepancy penalty between
source and target embeddings).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from . import diffkernel as dk
from .core import AgingCondition
from .errors import ConfigError, InsufficientDataError, NumericalError, ShapeError, ValidationError
from .models import (
    CyclePatchConfig,
    DummyModel,
    MlpBaselineConfig,
    build_model,
    flat_statistics,
    token_statistics,
)
from .preprocess import SampleTensor
from .seeding import substream

DEFAULT_ALPHA = 0.15
SPLIT_RATIOS = (0.6, 0.2, 0.2)

GRID_LEARNING_RATES = (5e-4, 5e-3, 1e-3)
GRID_BATCH_SIZES = (16, 32, 64, 128)
GRID_DROPOUTS = (0.0, 0.05, 0.1)
GRID_EMBED_WIDTHS = (32, 64, 128, 256)
GRID_ENCODER_LAYERS = tuple(range(0, 13))


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass(frozen=True)
class SplitAssignment:
    tags: tuple[Split, ...]
    seed: int
    ratios: tuple[float, float, float] = SPLIT_RATIOS
    by_battery: bool = True

    def indices(self, split: Split) -> list[int]:
        return [k for k, tag in enumerate(self.tags) if tag is split]


@dataclass
class DatasetSplits:
    train: list[SampleTensor]
    val: list[SampleTensor]
    test: list[SampleTensor]


def _slice_counts(n: int) -> tuple[int, int, int]:
    n_train = int(round(SPLIT_RATIOS[0] * n))
    n_test = int(round(SPLIT_RATIOS[2] * n))
    n_val = n - n_train - n_test
    if min(n_train, n_val, n_test) < 1:
        raise InsufficientDataError(f"cannot carve a {SPLIT_RATIOS} split out of {n} units")
    return n_train, n_val, n_test


def split_dataset(samples: Sequence[SampleTensor], seed: int, by_battery: bool = True) -> SplitAssignment:
    """6:2:2 split, shuffled by a seeded RNG.

    Battery-granular by default: every sample of one battery lands in one
    split, which rules out leakage between samples that share a battery.
    """
    rng = substream(seed, "split")
    if by_battery:
        ids: list[str] = []
        seen = set()
        for s in samples:
            if s.battery_id not in seen:
                seen.add(s.battery_id)
                ids.append(s.battery_id)
        if len(ids) < 5:
            raise InsufficientDataError(f"battery-level split needs >= 5 batteries, got {len(ids)}")
        order = rng.permutation(len(ids))
        n_train, n_val, n_test = _slice_counts(len(ids))
        tag_by_id: dict[str, Split] = {}
        for pos, k in enumerate(order):
            if pos < n_train:
                tag = Split.TRAIN
            elif pos < n_train + n_val:
                tag = Split.VAL
            else:
                tag = Split.TEST
            tag_by_id[ids[k]] = tag
        tags = tuple(tag_by_id[s.battery_id] for s in samples)
    else:
        if len(samples) < 5:
            raise InsufficientDataError(f"sample-level split needs >= 5 samples, got {len(samples)}")
        order = rng.permutation(len(samples))
        n_train, n_val, n_test = _slice_counts(len(samples))
        tags_arr = np.empty(len(samples), dtype=object)
        tags_arr[order[:n_train]] = Split.TRAIN
        tags_arr[order[n_train : n_train + n_val]] = Split.VAL
        tags_arr[order[n_train + n_val :]] = Split.TEST
        tags = tuple(tags_arr)
    return SplitAssignment(tags=tags, seed=seed, by_battery=by_battery)


def partition(samples: Sequence[SampleTensor], assignment: SplitAssignment) -> DatasetSplits:
    if len(assignment.tags) != len(samples):
        raise ShapeError(f"assignment covers {len(assignment.tags)} samples, got {len(samples)}")
    return DatasetSplits(
        train=[samples[k] for k in assignment.indices(Split.TRAIN)],
        val=[samples[k] for k in assignment.indices(Split.VAL)],
        test=[samples[k] for k in assignment.indices(Split.TEST)],
    )


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _metric_inputs(truth, pred) -> tuple[np.ndarray, np.ndarray]:
    truth = np.asarray(truth, dtype=float).reshape(-1)
    pred = np.asarray(pred, dtype=float).reshape(-1)
    if truth.shape != pred.shape:
        raise ShapeError(f"truth {truth.shape} vs pred {pred.shape}")
    if truth.size == 0:
        raise ValidationError("metrics need at least one sample")
    if np.any(truth <= 0):
        raise ValidationError("true lives must be positive")
    return truth, pred


def mape(truth, pred) -> float:
    """Mean absolute percentage error |y - yhat| / y."""
    truth, pred = _metric_inputs(truth, pred)
    return float(np.mean(np.abs(truth - pred) / truth))


def alpha_accuracy(truth, pred, alpha: float = DEFAULT_ALPHA) -> float:
    """Fraction of predictions with |y - yhat| <= alpha * y (boundary counts)."""
    if alpha <= 0:
        raise ValidationError(f"alpha must be positive, got {alpha!r}")
    truth, pred = _metric_inputs(truth, pred)
    return float(np.count_nonzero(np.abs(truth - pred) <= alpha * truth) / truth.size)


# ---------------------------------------------------------------------------
# Squared maximum mean discrepancy
# ---------------------------------------------------------------------------

def _mmd_kernels(x: np.ndarray, y: np.ndarray, bandwidth: Optional[float]):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ShapeError(f"mmd: embeddings {x.shape} and {y.shape} must be 2-D with equal width")
    if x.shape[0] < 1 or y.shape[0] < 1:
        raise ValidationError("mmd needs at least one point per set")

    def sq_dists(a, b):
        an = (a * a).sum(axis=1)
        bn = (b * b).sum(axis=1)
        return np.maximum(an[:, None] + bn[None, :] - 2.0 * (a @ b.T), 0.0)

    dxx, dyy, dxy = sq_dists(x, x), sq_dists(y, y), sq_dists(x, y)
    if bandwidth is None:
        pooled = np.concatenate([x, y])
        dpool = sq_dists(pooled, pooled)
        iu = np.triu_indices(pooled.shape[0], k=1)
        if iu[0].size == 0:
            bandwidth = 1.0
        else:
            bandwidth = float(np.median(np.sqrt(dpool[iu])))
            if bandwidth <= 0.0:
                bandwidth = 1.0
    denom = 2.0 * bandwidth * bandwidth
    return x, y, np.exp(-dxx / denom), np.exp(-dyy / denom), np.exp(-dxy / denom), bandwidth


def mmd_squared(x, y, bandwidth: Optional[float] = None) -> float:
    """Biased squared MMD with a Gaussian kernel.

    The bandwidth defaults to the median pairwise distance of the pooled
    points (median heuristic); identical sets give exactly zero.
    """
    _, _, kxx, kyy, kxy, _ = _mmd_kernels(x, y, bandwidth)
    return float(kxx.mean() + kyy.mean() - 2.0 * kxy.mean())


def mmd_squared_grad(x, y, bandwidth: Optional[float] = None) -> tuple[float, np.ndarray, np.ndarray]:
    """Squared MMD plus gradients in both point sets.

    The bandwidth (median heuristic unless given) is held constant in the
    gradient, the usual convention when the penalty is optimized.
    """
    x, y, kxx, kyy, kxy, h = _mmd_kernels(x, y, bandwidth)
    n, m = x.shape[0], y.shape[0]
    h2 = h * h
    value = float(kxx.mean() + kyy.mean() - 2.0 * kxy.mean())
    d_x = (2.0 / (n * n * h2)) * (kxx @ x - x * kxx.sum(axis=1, keepdims=True)) - (
        2.0 / (n * m * h2)
    ) * (kxy @ y - x * kxy.sum(axis=1, keepdims=True))
    d_y = (2.0 / (m * m * h2)) * (kyy @ y - y * kyy.sum(axis=1, keepdims=True)) - (
        2.0 / (n * m * h2)
    ) * (kxy.T @ x - y * kxy.sum(axis=0)[:, None])
    return value, d_x, d_y


# ---------------------------------------------------------------------------
# Run metrics and aggregated reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PartitionMetrics:
    mape: float
    acc: float
    n: int


@dataclass(frozen=True)
class ConditionMetrics:
    condition: AgingCondition
    mape: float
    acc: float
    n: int
    seen: bool


@dataclass
class RunMetrics:
    """Test metrics of one trained checkpoint (one seed)."""

    mape: float
    acc: float
    n: int
    alpha: float
    per_condition: tuple[ConditionMetrics, ...] = ()
    per_s: tuple[tuple[int, float, float], ...] = ()
    seen: Optional[PartitionMetrics] = None
    unseen: Optional[PartitionMetrics] = None


def compute_run_metrics(
    truth,
    pred,
    conditions: Optional[Sequence[AgingCondition]] = None,
    train_conditions: Optional[set[AgingCondition]] = None,
    alpha: float = DEFAULT_ALPHA,
    usable_cycles: Optional[Sequence[int]] = None,
) -> RunMetrics:
    truth, pred = _metric_inputs(truth, pred)
    overall = RunMetrics(
        mape=mape(truth, pred), acc=alpha_accuracy(truth, pred, alpha), n=truth.size, alpha=alpha
    )
    per_condition: list[ConditionMetrics] = []
    seen = unseen = None
    if conditions is not None:
        groups: dict[AgingCondition, list[int]] = {}
        for k, c in enumerate(conditions):
            groups.setdefault(c, []).append(k)
        for c, idx in groups.items():
            is_seen = bool(train_conditions is not None and c in train_conditions)
            per_condition.append(
                ConditionMetrics(
                    condition=c,
                    mape=mape(truth[idx], pred[idx]),
                    acc=alpha_accuracy(truth[idx], pred[idx], alpha),
                    n=len(idx),
                    seen=is_seen,
                )
            )
        if train_conditions is not None:
            seen_idx = [k for k, c in enumerate(conditions) if c in train_conditions]
            unseen_idx = [k for k, c in enumerate(conditions) if c not in train_conditions]
            if seen_idx:
                seen = PartitionMetrics(mape(truth[seen_idx], pred[seen_idx]), alpha_accuracy(truth[seen_idx], pred[seen_idx], alpha), len(seen_idx))
            if unseen_idx:
                unseen = PartitionMetrics(mape(truth[unseen_idx], pred[unseen_idx]), alpha_accuracy(truth[unseen_idx], pred[unseen_idx], alpha), len(unseen_idx))
    per_s: list[tuple[int, float, float]] = []
    if usable_cycles is not None:
        s_groups: dict[int, list[int]] = {}
        for k, s in enumerate(usable_cycles):
            s_groups.setdefault(int(s), []).append(k)
        for s in sorted(s_groups):
            idx = s_groups[s]
            per_s.append((s, mape(truth[idx], pred[idx]), alpha_accuracy(truth[idx], pred[idx], alpha)))
    return RunMetrics(
        mape=overall.mape,
        acc=overall.acc,
        n=overall.n,
        alpha=alpha,
        per_condition=tuple(per_condition),
        per_s=tuple(per_s),
        seen=seen,
        unseen=unseen,
    )


def seen_unseen_report(
    truth,
    pred,
    conditions: Sequence[AgingCondition],
    train_conditions: set[AgingCondition],
    alpha: float = DEFAULT_ALPHA,
) -> tuple[Optional[PartitionMetrics], Optional[PartitionMetrics]]:
    """Metrics over test samples whose aging condition appears in training
    (seen) and those whose condition does not (unseen)."""
    rm = compute_run_metrics(truth, pred, conditions, train_conditions, alpha)
    return rm.seen, rm.unseen


@dataclass(frozen=True)
class MetricSummary:
    mean: float
    std: float
    values: tuple[float, ...]

    @staticmethod
    def of(values: Sequence[float]) -> "MetricSummary":
        arr = np.asarray(values, dtype=float)
        return MetricSummary(mean=float(arr.mean()), std=float(arr.std()), values=tuple(float(v) for v in arr))


@dataclass(frozen=True)
class ConditionSummary:
    condition: AgingCondition
    mape_mean: float
    acc_mean: float
    n_total: int
    runs: int
    seen_runs: int


@dataclass
class EvalReport:
    """Metrics aggregated over seeds: mean +- std, condition and S breakdowns."""

    mape: MetricSummary
    acc: MetricSummary
    seeds: tuple[int, ...]
    alpha: float
    per_condition: tuple[ConditionSummary, ...] = ()
    per_s: tuple[tuple[int, float, float], ...] = ()
    runs: tuple[RunMetrics, ...] = ()
    notes: tuple[str, ...] = ()


def aggregate_runs(runs: Sequence[RunMetrics], seeds: Sequence[int], notes: Sequence[str] = ()) -> EvalReport:
    if len(runs) != len(seeds) or not runs:
        raise ValidationError("one run per seed is required")
    alpha = runs[0].alpha
    cond_acc: dict[AgingCondition, list[ConditionMetrics]] = {}
    for run in runs:
        for cm in run.per_condition:
            cond_acc.setdefault(cm.condition, []).append(cm)
    conditions = tuple(
        ConditionSummary(
            condition=c,
            mape_mean=float(np.mean([m.mape for m in ms])),
            acc_mean=float(np.mean([m.acc for m in ms])),
            n_total=int(sum(m.n for m in ms)),
            runs=len(ms),
            seen_runs=sum(1 for m in ms if m.seen),
        )
        for c, ms in cond_acc.items()
    )
    s_acc: dict[int, list[tuple[float, float]]] = {}
    for run in runs:
        for s, m, a in run.per_s:
            s_acc.setdefault(s, []).append((m, a))
    per_s = tuple(
        (s, float(np.mean([m for m, _ in ms])), float(np.mean([a for _, a in ms])))
        for s, ms in sorted(s_acc.items())
    )
    return EvalReport(
        mape=MetricSummary.of([r.mape for r in runs]),
        acc=MetricSummary.of([r.acc for r in runs]),
        seeds=tuple(int(s) for s in seeds),
        alpha=alpha,
        per_condition=conditions,
        per_s=per_s,
        runs=tuple(runs),
        notes=tuple(notes),
    )


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    batch_size: int = 32
    beta1: float = dk.ADAM_BETA1
    beta2: float = dk.ADAM_BETA2
    eps: float = dk.ADAM_EPS
    patience: int = 20
    grid_mode: bool = False

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1:
            raise ConfigError("lr must be positive and batch_size >= 1")
        if self.grid_mode:
            if self.lr not in GRID_LEARNING_RATES:
                raise ConfigError(f"grid mode restricts lr to {GRID_LEARNING_RATES}, got {self.lr!r}")
            if self.batch_size not in GRID_BATCH_SIZES:
                raise ConfigError(f"grid mode restricts batch_size to {GRID_BATCH_SIZES}, got {self.batch_size}")


def hyperparameter_grid(intra_layer_choices=GRID_ENCODER_LAYERS, inter_layer_choices=GRID_ENCODER_LAYERS):
    """The benchmark hyperparameter search space, as a lazy enumerator of
    (OptimConfig, CyclePatchConfig) pairs. Distributed execution of the grid
    is out of scope; this is the single source of truth for its contents."""
    from .models import MlpStackEncoder

    for batch_size in GRID_BATCH_SIZES:
        for lr in GRID_LEARNING_RATES:
            for dropout in GRID_DROPOUTS:
                for width in GRID_EMBED_WIDTHS:
                    for l_intra in intra_layer_choices:
                        for l_inter in inter_layer_choices:
                            yield (
                                OptimConfig(lr=lr, batch_size=batch_size, grid_mode=True),
                                CyclePatchConfig(
                                    embed_width=width,
                                    intra_hidden=2 * width,
                                    intra_layers=l_intra,
                                    inter=MlpStackEncoder(layers=l_inter, hidden=width),
                                    dropout=dropout,
                                ),
                            )


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mape: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    batch_losses: list[float] = field(default_factory=list)
    best_epoch: int = -1
    notes: tuple[str, ...] = ()

    @property
    def val_mapes(self) -> list[float]:
        return [e.val_mape for e in self.epochs]


def _make_batches(samples: Sequence[SampleTensor], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Homogeneous-S mini-batches in a shuffled order."""
    groups: dict[int, list[int]] = {}
    for k, s in enumerate(samples):
        groups.setdefault(s.usable_cycles, []).append(k)
    batches: list[list[int]] = []
    for s in sorted(groups):
        idx = np.asarray(groups[s])
        idx = idx[rng.permutation(idx.size)]
        for start in range(0, idx.size, batch_size):
            batches.append([int(i) for i in idx[start : start + batch_size]])
    order = rng.permutation(len(batches))
    return [batches[k] for k in order]


@dataclass(frozen=True)
class DomainAdaptSpec:
    source: tuple[SampleTensor, ...]
    weight: float


def _predict_mape(model, samples: Sequence[SampleTensor]) -> float:
    out = model.predict(samples)
    return mape(np.array([s.label for s in samples], dtype=float), out.prediction)


def _fit(
    model,
    train: Sequence[SampleTensor],
    val: Sequence[SampleTensor],
    optim: OptimConfig,
    epochs: int,
    seed: int,
    da: Optional[DomainAdaptSpec] = None,
) -> TrainHistory:
    """Mini-batch MSE training with best-validation-MAPE checkpointing."""
    history = TrainHistory()
    if epochs == 0:
        history.notes = ("untrained: zero training epochs requested",)
        return history
    if not train:
        raise InsufficientDataError("training needs a nonempty train split")
    if not val:
        raise InsufficientDataError("training needs a nonempty validation split")
    rng_batches = substream(seed, "batches")
    rng_dropout = substream(seed, "dropout")
    rng_source = substream(seed, "da-source")
    mu, sigma = model.target_mean, model.target_scale
    best_val = math.inf
    best_params = None
    stale = 0
    da_active = da is not None and da.weight != 0.0
    for epoch in range(epochs):
        epoch_loss = 0.0
        batches = _make_batches(train, optim.batch_size, rng_batches)
        for b, idx in enumerate(batches):
            batch = [train[k] for k in idx]
            targets = (np.array([s.label for s in batch], dtype=float) - mu) / sigma
            raw, v_t, cache = model.forward_batch(batch, training=True, rng=rng_dropout)
            loss, d_raw = dk.mse_loss(raw, targets)
            total = loss
            if da_active:
                src = _sample_source_batch(da.source, optim.batch_size, rng_source)
                _, v_s, cache_s = model.forward_batch(src, training=True, rng=rng_source)
                penalty, d_vs, d_vt = mmd_squared_grad(v_s, v_t)
                total = loss + da.weight * penalty
                model.backward(cache, d_raw, d_v=da.weight * d_vt)
                model.backward(cache_s, np.zeros(len(src)), d_v=da.weight * d_vs)
            else:
                model.backward(cache, d_raw)
            if not math.isfinite(total):
                raise NumericalError(f"training diverged at epoch {epoch} batch {b} (loss {total!r})")
            dk.adam_step(model.params, optim.lr, optim.beta1, optim.beta2, optim.eps)
            history.batch_losses.append(total)
            epoch_loss += total
        val_mape = _predict_mape(model, val)
        history.epochs.append(EpochRecord(epoch=epoch, train_loss=epoch_loss / max(1, len(batches)), val_mape=val_mape))
        if val_mape < best_val:
            best_val = val_mape
            best_params = model.params.copy()
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= optim.patience:
                break
    if best_params is not None:
        model.params.load_values(best_params)
    return history


def _sample_source_batch(source: Sequence[SampleTensor], batch_size: int, rng: np.random.Generator) -> list[SampleTensor]:
    groups: dict[int, list[int]] = {}
    for k, s in enumerate(source):
        groups.setdefault(s.usable_cycles, []).append(k)
    keys = sorted(groups)
    s = keys[int(rng.integers(len(keys)))]
    idx = groups[s]
    take = min(batch_size, len(idx))
    chosen = rng.choice(len(idx), size=take, replace=False)
    return [source[idx[int(k)]] for k in chosen]


def _target_transform(train: Sequence[SampleTensor]) -> tuple[float, float]:
    labels = np.array([s.label for s in train], dtype=float)
    scale = float(labels.std())
    return float(labels.mean()), scale if scale > 0 else 1.0


def train_model(
    family: str,
    model_config,
    data: DatasetSplits,
    optim: OptimConfig,
    epochs: int,
    seed: int,
    alpha: float = DEFAULT_ALPHA,
):
    """Train one model on one split and evaluate it on the test set.

    Returns (model, test RunMetrics, TrainHistory). The model carries the
    parameters of the epoch with the lowest validation MAPE.
    """
    if not data.train:
        raise InsufficientDataError("empty train split")
    train_conditions = {s.condition for s in data.train}
    if family == "dummy":
        model = DummyModel([s.label for s in data.train])
        history = TrainHistory(notes=("dummy: mean of training labels",))
    else:
        mu, sigma = _target_transform(data.train)
        if family == "cyclepatch":
            center, scale = token_statistics(data.train)
        else:
            center, scale = flat_statistics(data.train)
        model = build_model(
            family,
            model_config,
            seed=seed,
            target_mean=mu,
            target_scale=sigma,
            input_center=center,
            input_scale=scale,
        )
        history = _fit(model, data.train, data.val, optim, epochs, seed)
    metrics = evaluate_model(model, data.test, alpha=alpha, train_conditions=train_conditions) if data.test else None
    return model, metrics, history


def evaluate_model(
    model,
    samples: Sequence[SampleTensor],
    alpha: float = DEFAULT_ALPHA,
    train_conditions: Optional[set[AgingCondition]] = None,
) -> RunMetrics:
    if not samples:
        raise InsufficientDataError("evaluation needs at least one sample")
    out = model.predict(samples)
    truth = np.array([s.label for s in samples], dtype=float)
    return compute_run_metrics(
        truth,
        out.prediction,
        conditions=[s.condition for s in samples],
        train_conditions=train_conditions,
        alpha=alpha,
        usable_cycles=[s.usable_cycles for s in samples],
    )


def run_experiment(
    family: str,
    model_config,
    samples: Sequence[SampleTensor],
    optim: OptimConfig,
    epochs: int,
    seeds: Sequence[int],
    alpha: float = DEFAULT_ALPHA,
    by_battery: bool = True,
):
    """Full protocol: per seed, split/train/select/evaluate; aggregate mean +- std.

    Each seed drives its own split, initialization, and batch order, so the
    spread reflects end-to-end run-to-run variability.
    """
    if not seeds:
        raise ConfigError("at least one seed is required")
    runs, artifacts, notes = [], [], []
    for seed in seeds:
        assignment = split_dataset(samples, seed, by_battery=by_battery)
        data = partition(samples, assignment)
        model, metrics, history = train_model(family, model_config, data, optim, epochs, seed, alpha)
        runs.append(metrics)
        artifacts.append((int(seed), model, history, data))
        notes.extend(f"seed {seed}: {note}" for note in history.notes)
    return aggregate_runs(runs, seeds, notes), artifacts


# ---------------------------------------------------------------------------
# Usable-cycle sweep
# ---------------------------------------------------------------------------

def sweep_usable_cycles(model, samples: Sequence[SampleTensor], s_list: Sequence[int], alpha: float = DEFAULT_ALPHA):
    """Evaluate one checkpoint at each usable-cycle count, ascending.

    samples should contain test samples materialized at every S in s_list;
    counts missing from the data raise.
    """
    s_sorted = sorted(set(int(s) for s in s_list))
    if not s_sorted:
        raise ConfigError("sweep needs at least one usable-cycle count")
    by_s: dict[int, list[SampleTensor]] = {}
    for s in samples:
        by_s.setdefault(s.usable_cycles, []).append(s)
    curve = []
    for s in s_sorted:
        if s not in by_s:
            raise InsufficientDataError(f"no samples materialized at S={s}")
        subset = by_s[s]
        out = model.predict(subset)
        truth = np.array([x.label for x in subset], dtype=float)
        curve.append((s, mape(truth, out.prediction), alpha_accuracy(truth, out.prediction, alpha)))
    return curve


# ---------------------------------------------------------------------------
# Transfer
# ---------------------------------------------------------------------------

class TransferMode(str, Enum):
    FROZEN = "frozen"
    FINE_TUNE = "fine_tune"
    DOMAIN_ADAPT = "domain_adapt"


def _clone_model(model):
    clone = build_model(
        model.family,
        model.config,
        seed=0,
        target_mean=model.target_mean,
        target_scale=model.target_scale,
        input_center=model.input_center,
        input_scale=model.input_scale,
    )
    clone.params.load_values(model.params)
    return clone


def transfer_run(
    model,
    target: DatasetSplits,
    mode: TransferMode,
    optim: OptimConfig = OptimConfig(),
    epochs: int = 0,
    seed: int = 0,
    source_train: Sequence[SampleTensor] = (),
    mmd_weight: float = 1.0,
    alpha: float = DEFAULT_ALPHA,
):
    """Apply a pretrained model to a target fleet.

    Frozen evaluates as-is; fine-tune continues MSE training on the target
    train split; domain adaptation adds mmd_weight times the squared MMD
    between source and target embeddings to every batch loss. The target
    standardization stays the one stored with the pretrained model, so
    zero-epoch fine-tuning is exactly the frozen evaluation.
    """
    train_conditions = {s.condition for s in target.train} if target.train else set()
    if mode is TransferMode.FROZEN:
        tuned = model
        history = TrainHistory(notes=("frozen: evaluation only",))
    else:
        tuned = _clone_model(model)
        da = None
        if mode is TransferMode.DOMAIN_ADAPT:
            if mmd_weight != 0.0 and not source_train:
                raise ConfigError("domain adaptation needs source samples for the discrepancy penalty")
            da = DomainAdaptSpec(source=tuple(source_train), weight=mmd_weight)
        history = _fit(tuned, target.train, target.val, optim, epochs, seed, da=da)
    metrics = evaluate_model(tuned, target.test, alpha=alpha, train_conditions=train_conditions)
    return tuned, metrics, history
