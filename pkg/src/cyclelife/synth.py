"""Seeded synthetic degradation fleets with exact life-label ground truth.

Each battery draws an aging condition from a chemistry x protocol x
temperature grid and degradation parameters (linear fade rate, knee onset,
knee sharpness). State of health follows 1 - a*n - b*max(0, n - knee)^2,
so the true life has a closed form that doubles as an oracle for the label
derivation. Per-cycle charge/discharge curves are logistic voltage ramps
whose midpoint drifts with SOH, constant-current segments (optionally with
a constant-voltage charge tail), and capacities that scale with SOH, giving
models genuine intra-cycle and inter-cycle structure to learn.

Fade parameters are drawn so the early capacity slope ranks with true life
(fleet Spearman at least 0.8); the draw retries with a fresh substream nonce
in the rare case a fleet misses the bar, keeping the guarantee for every
seed while staying deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .core import (
    AgingCondition,
    BatteryFormat,
    BatteryRecord,
    Cycle,
    Q0Mode,
    TimePoint,
    cumulative_capacity,
)
from .errors import ConfigError
from .ingest import DatasetTag, FleetManifest, ManifestEntry, save_battery, save_manifest
from .seeding import substream

SOH_FLOOR = 0.5
LIFE_THRESHOLD = 0.80


@dataclass(frozen=True)
class ChemistryArchetype:
    name: str
    battery_format: BatteryFormat
    anode: str
    cathode: str
    electrolyte: str
    v_min: float
    v_max: float
    nominal_capacity: float
    charge_steepness: float
    discharge_steepness: float
    midpoint_shift: float  # logistic midpoint drift per unit SOH lost
    # Overpotential growth per unit SOH lost, as a fraction of the voltage
    # window: aged batteries charge at higher and discharge at lower voltage.
    resistance_growth: float = 0.35

    def __post_init__(self):
        if self.v_min >= self.v_max:
            raise ConfigError(f"archetype {self.name}: v_min must be below v_max")
        if self.nominal_capacity <= 0:
            raise ConfigError(f"archetype {self.name}: nominal capacity must be positive")
        if not 0.0 <= self.resistance_growth < 1.0:
            raise ConfigError(f"archetype {self.name}: resistance_growth must be in [0, 1)")


@dataclass(frozen=True)
class CyclingProtocol:
    name: str
    charge_rate: float  # C-rate of the constant-current charge
    discharge_rate: float
    cv_fraction: float = 0.0  # fraction of charge capacity delivered in the CV tail

    def __post_init__(self):
        if self.charge_rate <= 0 or self.discharge_rate <= 0:
            raise ConfigError(f"protocol {self.name}: rates must be positive")
        if not 0.0 <= self.cv_fraction < 0.9:
            raise ConfigError(f"protocol {self.name}: cv_fraction must be in [0, 0.9)")


@dataclass(frozen=True)
class NoiseLevels:
    voltage: float = 0.003  # volts, per point
    capacity_rel: float = 0.0005  # relative, per cycle
    shape_jitter: float = 0.02  # relative jitter of the voltage-ramp steepness


@dataclass(frozen=True)
class DegradationParams:
    fade_rate: float  # linear SOH loss per cycle
    knee_sharpness: float  # quadratic SOH loss beyond the knee
    knee_onset: float  # cycle at which the quadratic term switches on


def _default_archetypes() -> tuple[ChemistryArchetype, ...]:
    return (
        ChemistryArchetype(
            name="nmc-graphite",
            battery_format=BatteryFormat.CYLINDRICAL_18650,
            anode="graphite",
            cathode="NMC",
            electrolyte="carbonate",
            v_min=2.8,
            v_max=4.3,
            nominal_capacity=2.5,
            charge_steepness=6.0,
            discharge_steepness=7.0,
            midpoint_shift=0.5,
            resistance_growth=0.55,
        ),
        ChemistryArchetype(
            name="lfp-graphite",
            battery_format=BatteryFormat.CYLINDRICAL_18650,
            anode="graphite",
            cathode="LFP",
            electrolyte="carbonate",
            v_min=2.0,
            v_max=3.65,
            nominal_capacity=1.1,
            charge_steepness=9.0,
            discharge_steepness=10.0,
            midpoint_shift=0.4,
            resistance_growth=0.50,
        ),
        ChemistryArchetype(
            name="nmc-pouch",
            battery_format=BatteryFormat.POUCH,
            anode="graphite-SiO",
            cathode="NMC",
            electrolyte="carbonate",
            v_min=2.5,
            v_max=4.35,
            nominal_capacity=5.0,
            charge_steepness=5.0,
            discharge_steepness=5.5,
            midpoint_shift=0.6,
            resistance_growth=0.60,
        ),
    )


def _default_protocols() -> tuple[CyclingProtocol, ...]:
    return (
        CyclingProtocol(name="CC1C-CV/CC1C", charge_rate=1.0, discharge_rate=1.0, cv_fraction=0.2),
        CyclingProtocol(name="CC0.5C/CC1C", charge_rate=0.5, discharge_rate=1.0, cv_fraction=0.0),
        CyclingProtocol(name="CC2C-CV/CC2C", charge_rate=2.0, discharge_rate=2.0, cv_fraction=0.3),
    )


@dataclass(frozen=True)
class SynthConfig:
    n_batteries: int
    seed: int
    archetypes: tuple[ChemistryArchetype, ...] = ()
    protocols: tuple[CyclingProtocol, ...] = ()
    temperatures: tuple[float, ...] = (25.0, 35.0, 45.0)
    # Linear fade rate a, log-uniform. 0.2/a is the knee-free life.
    fade_rate_range: tuple[float, float] = (0.2 / 640.0, 0.2 / 160.0)
    # Knee onset as a fraction of the knee-free life; kept past cycle 100 so
    # the first-100-cycle slope stays a clean life signal.
    knee_onset_range: tuple[float, float] = (0.65, 0.90)
    # True life as a fraction of the span between knee onset and knee-free
    # life; 1.0 means no knee. Knee sharpness b follows from this draw.
    knee_life_range: tuple[float, float] = (0.70, 1.00)
    noise: NoiseLevels = NoiseLevels()
    max_cycles: int = 700
    # Cycles generated past the true life, so a noisy trajectory still shows
    # its crossing instead of ending ambiguously at the threshold.
    life_margin_cycles: int = 5
    detail_cycles: int = 104  # cycles with densely sampled curves
    points_per_half_cycle: int = 48
    coarse_points: int = 4
    max_censored_fraction: float = 0.10
    min_slope_life_spearman: float = 0.80

    def __post_init__(self):
        if self.n_batteries < 1:
            raise ConfigError("n_batteries must be >= 1")
        if not self.archetypes:
            object.__setattr__(self, "archetypes", _default_archetypes())
        if not self.protocols:
            object.__setattr__(self, "protocols", _default_protocols())
        lo, hi = self.fade_rate_range
        if not (0.0 < lo <= hi):
            raise ConfigError(f"fade_rate_range must be positive and ordered, got {self.fade_rate_range}")
        olo, ohi = self.knee_onset_range
        if not (0.0 < olo <= ohi < 1.0):
            raise ConfigError(f"knee_onset_range must lie in (0, 1), got {self.knee_onset_range}")
        klo, khi = self.knee_life_range
        if not (0.0 < klo <= khi <= 1.0):
            raise ConfigError(f"knee_life_range must lie in (0, 1], got {self.knee_life_range}")
        if self.points_per_half_cycle < 2 or self.coarse_points < 2:
            raise ConfigError("curves need at least 2 points per half-cycle")
        if self.max_cycles < 2:
            raise ConfigError("max_cycles must be >= 2")


def soh_model(params: DegradationParams, n: float) -> float:
    """SOH after n cycles: linear fade plus a quadratic knee, floored at 0.5."""
    knee = max(0.0, n - params.knee_onset)
    return max(SOH_FLOOR, 1.0 - params.fade_rate * n - params.knee_sharpness * knee * knee)


def true_life(params: DegradationParams) -> int:
    """First cycle with SOH at or below the 0.8 end-of-life threshold."""
    linear_life = (1.0 - LIFE_THRESHOLD) / params.fade_rate
    start = max(1, int(math.floor(params.knee_onset)) - 1 if params.knee_sharpness > 0 else int(linear_life) - 2)
    n = start
    while soh_model(params, n) > LIFE_THRESHOLD:
        n += 1
    return n


@dataclass(frozen=True)
class SynthLabel:
    id: str
    true_life: int
    fade_rate: float
    knee_sharpness: float
    knee_onset: float


@dataclass(frozen=True)
class _BatteryDraw:
    condition: AgingCondition
    archetype: ChemistryArchetype
    protocol: CyclingProtocol
    params: DegradationParams
    life: int


def _spearman(x: np.ndarray, y: np.ndarray) -> float:
    def ranks(v):
        order = np.argsort(v, kind="stable")
        r = np.empty(v.size)
        r[order] = np.arange(1, v.size + 1)
        # average tied ranks
        vals, inv, counts = np.unique(v, return_inverse=True, return_counts=True)
        if counts.max() > 1:
            sums = np.zeros(vals.size)
            np.add.at(sums, inv, r)
            r = (sums / counts)[inv]
        return r

    rx, ry = ranks(np.asarray(x, float)), ranks(np.asarray(y, float))
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float((rx * rx).sum() * (ry * ry).sum()))
    if denom == 0.0:
        return 0.0
    return float((rx * ry).sum() / denom)


def _draw_battery(config: SynthConfig, rng: np.random.Generator) -> _BatteryDraw:
    arch = config.archetypes[int(rng.integers(len(config.archetypes)))]
    proto = config.protocols[int(rng.integers(len(config.protocols)))]
    temp = float(config.temperatures[int(rng.integers(len(config.temperatures)))])
    a = float(np.exp(rng.uniform(math.log(config.fade_rate_range[0]), math.log(config.fade_rate_range[1]))))
    onset_frac = float(rng.uniform(*config.knee_onset_range))
    life_frac = float(rng.uniform(*config.knee_life_range))
    linear_life = (1.0 - LIFE_THRESHOLD) / a
    knee_onset = onset_frac * linear_life
    life_target = knee_onset + life_frac * (linear_life - knee_onset)
    if life_frac >= 1.0 - 1e-12:
        b = 0.0
    else:
        b = ((1.0 - LIFE_THRESHOLD) - a * life_target) / (life_target - knee_onset) ** 2
    params = DegradationParams(fade_rate=a, knee_sharpness=b, knee_onset=knee_onset)
    condition = AgingCondition(
        battery_format=arch.battery_format,
        anode=arch.anode,
        cathode=arch.cathode,
        electrolyte=arch.electrolyte,
        charge_protocol=proto.name.split("/")[0],
        discharge_protocol=proto.name.split("/")[-1],
        temperature=temp,
        nominal_capacity=arch.nominal_capacity,
        manufacturer="synthfleet",
    )
    return _BatteryDraw(condition=condition, archetype=arch, protocol=proto, params=params, life=true_life(params))


def _draw_fleet(config: SynthConfig) -> list[_BatteryDraw]:
    """Draw all battery parameters, retrying with a new nonce until the
    early-slope/life rank correlation and censoring guarantees hold."""
    last_spearman = 0.0
    for nonce in range(16):
        draws = [
            _draw_battery(config, substream(config.seed, "battery-draw", nonce, i))
            for i in range(config.n_batteries)
        ]
        censored = sum(1 for d in draws if d.life > config.max_cycles)
        if censored > config.max_censored_fraction * config.n_batteries:
            raise ConfigError(
                f"{censored}/{config.n_batteries} batteries would not reach end of life within "
                f"max_cycles={config.max_cycles}; increase max_cycles or raise fade_rate_range"
            )
        if config.n_batteries < 3:
            return draws
        slopes = np.array([-d.params.fade_rate for d in draws])
        lives = np.array([d.life for d in draws], dtype=float)
        last_spearman = _spearman(slopes, lives)
        if last_spearman >= config.min_slope_life_spearman:
            return draws
    raise ConfigError(
        f"could not draw a fleet with slope/life Spearman >= {config.min_slope_life_spearman} "
        f"(best {last_spearman:.3f}); widen fade_rate_range or relax knee_life_range"
    )


def _logistic(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _voltage_noise(rng, arr: np.ndarray, arch: ChemistryArchetype, sigma: float) -> np.ndarray:
    if sigma > 0:
        arr = arr + rng.normal(0.0, sigma, size=arr.shape)
    span = arch.v_max - arch.v_min
    return np.clip(arr, arch.v_min - 0.05 * span, arch.v_max + 0.05 * span)


def _make_points(t: np.ndarray, v: np.ndarray, i: np.ndarray) -> tuple[TimePoint, ...]:
    q = cumulative_capacity(t, i)
    return tuple(TimePoint(float(t[k]), float(v[k]), float(i[k]), float(q[k])) for k in range(t.size))


def _charge_curve(config, rng, arch, proto, soh, q_target, n_points):
    i_cc = proto.charge_rate * arch.nominal_capacity
    k = arch.charge_steepness * (1.0 + config.noise.shape_jitter * float(rng.standard_normal()))
    mid = 0.45 + arch.midpoint_shift * (1.0 - soh)
    # Growing overpotential lifts the whole charge curve as the battery ages;
    # the sag is proportional to the applied current (I x R growth).
    span = arch.v_max - arch.v_min
    v_lo = arch.v_min + arch.resistance_growth * (1.0 - soh) * proto.charge_rate * span
    if proto.cv_fraction > 0 and n_points >= 4:
        q_cc = (1.0 - proto.cv_fraction) * q_target
        t_cc = 3600.0 * q_cc / i_cc
        i_end = 0.1 * i_cc
        t_cv = 3600.0 * proto.cv_fraction * q_target / (0.5 * (i_cc + i_end))
        n_cc = max(2, int(round(n_points * t_cc / (t_cc + t_cv))))
        n_cv = max(2, n_points - n_cc)
        t1 = np.linspace(0.0, t_cc, n_cc)
        t2 = t_cc + np.linspace(t_cv / n_cv, t_cv, n_cv)
        tau = t1 / t_cc
        v1 = v_lo + (arch.v_max - v_lo) * _logistic(k * (tau - mid))
        v2 = np.full(n_cv, arch.v_max)
        i1 = np.full(n_cc, i_cc)
        i2 = i_cc + (i_end - i_cc) * (t2 - t_cc) / t_cv
        t, v, cur = np.concatenate([t1, t2]), np.concatenate([v1, v2]), np.concatenate([i1, i2])
    else:
        t = np.linspace(0.0, 3600.0 * q_target / i_cc, n_points)
        tau = t / t[-1]
        v = v_lo + (arch.v_max - v_lo) * _logistic(k * (tau - mid))
        cur = np.full(n_points, i_cc)
    return _make_points(t, _voltage_noise(rng, v, arch, config.noise.voltage), cur)


def _discharge_curve(config, rng, arch, proto, soh, q_target, n_points, t_start):
    i_dc = proto.discharge_rate * arch.nominal_capacity
    duration = 3600.0 * q_target / i_dc
    t = t_start + np.linspace(0.0, duration, n_points)
    tau = (t - t_start) / duration
    k = arch.discharge_steepness * (1.0 + config.noise.shape_jitter * float(rng.standard_normal()))
    mid = 0.5 + arch.midpoint_shift * (1.0 - soh)
    # The discharge curve sags under the same overpotential growth, again
    # in proportion to the discharge current.
    span = arch.v_max - arch.v_min
    v_hi = arch.v_max - arch.resistance_growth * (1.0 - soh) * proto.discharge_rate * span
    v = v_hi - (v_hi - arch.v_min) * _logistic(k * (tau - mid))
    cur = np.full(n_points, -i_dc)  # discharging current is negative
    return _make_points(t, _voltage_noise(rng, v, arch, config.noise.voltage), cur)


def generate_battery(config: SynthConfig, index: int, draw: Optional[_BatteryDraw] = None) -> tuple[BatteryRecord, SynthLabel]:
    """One battery's record and ground-truth label row (deterministic in index)."""
    if draw is None:
        draw = _draw_fleet(config)[index]
    rng = substream(config.seed, "battery-curves", index)
    arch, proto, params = draw.archetype, draw.protocol, draw.params
    n_cycles = min(draw.life + config.life_margin_cycles, config.max_cycles)
    cycles = []
    for n in range(1, n_cycles + 1):
        soh = soh_model(params, n)
        jitter = config.noise.capacity_rel * float(rng.standard_normal()) if config.noise.capacity_rel > 0 else 0.0
        q_n = arch.nominal_capacity * soh * (1.0 + jitter)
        n_points = config.points_per_half_cycle if n <= config.detail_cycles else config.coarse_points
        charge = _charge_curve(config, rng, arch, proto, soh, q_n, n_points)
        discharge = _discharge_curve(config, rng, arch, proto, soh, q_n, n_points, t_start=charge[-1].t + 1.0)
        # The CC discharge integrates exactly, so store the integral itself.
        cycles.append(
            Cycle(
                index=n,
                charge_points=charge,
                discharge_points=discharge,
                discharge_capacity=discharge[-1].cumulative_capacity,
            )
        )
    battery_id = f"synth-{config.seed}-{index:04d}"
    record = BatteryRecord(
        id=battery_id,
        condition=draw.condition,
        cycles=tuple(cycles),
        q0_mode=Q0Mode.NOMINAL,
    )
    label = SynthLabel(
        id=battery_id,
        true_life=draw.life,
        fade_rate=params.fade_rate,
        knee_sharpness=params.knee_sharpness,
        knee_onset=params.knee_onset,
    )
    return record, label


def generate_fleet(config: SynthConfig) -> tuple[list[BatteryRecord], list[SynthLabel]]:
    """All batteries of the fleet, in index order."""
    draws = _draw_fleet(config)
    records, labels = [], []
    for i, draw in enumerate(draws):
        record, label = generate_battery(config, i, draw)
        records.append(record)
        labels.append(label)
    return records, labels


def fleet_draws(config: SynthConfig) -> list[_BatteryDraw]:
    """Parameter draws only (no curves); cheap fleet-level statistics."""
    return _draw_fleet(config)


def labels_csv_text(labels: list[SynthLabel]) -> str:
    lines = ["id,true_life,a,b,n_knee"]
    for lab in labels:
        lines.append(f"{lab.id},{lab.true_life},{lab.fade_rate!r},{lab.knee_sharpness!r},{lab.knee_onset!r}")
    return "\n".join(lines) + "\n"


def save_fleet(records: list[BatteryRecord], labels: list[SynthLabel], out_dir) -> Path:
    """Battery files, labels.csv, and a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for record in records:
        name = f"{record.id}.json"
        save_battery(record, out_dir / name)
        entries.append(ManifestEntry(path=Path(name), dataset=DatasetTag.SYNTHETIC))
    (out_dir / "labels.csv").write_text(labels_csv_text(labels), encoding="utf-8")
    manifest_path = out_dir / "manifest.json"
    save_manifest(FleetManifest(entries=tuple(entries)), manifest_path)
    return manifest_path
