"""Domain types and battery arithmetic shared by the whole package.

A degradation test is a sequence of cycles, each a charging period followed
by a discharging period. From the raw (time, voltage, current) points we
compute per-cycle capacity by integrating |I| over time, state of health as
the ratio of a cycle's discharge capacity to a reference capacity, and the
life label as the first cycle at which SOH is no larger than a threshold.

All operations here are pure functions over immutable inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import InsufficientDataError, ValidationError

SECONDS_PER_HOUR = 3600.0

DEFAULT_SOH_THRESHOLD = 0.80
# Records that reference the first cycle instead of the nominal capacity
# (industrial fleet convention) use a 0.90 end-of-life threshold.
FIRST_CYCLE_SOH_THRESHOLD = 0.90
# Final SOH in (threshold, threshold + band] is close enough to end of life
# to extrapolate a label; anything above the band is excluded.
EXTRAPOLATION_BAND = 0.025
# Labels at or below this many cycles are excluded as too-short lives.
MIN_LIFE_LABEL = 100


class BatteryFormat(str, Enum):
    COIN = "coin"
    CYLINDRICAL_18650 = "18650"
    CYLINDRICAL_21700 = "21700"
    CYLINDRICAL_26650 = "26650"
    POUCH = "pouch"
    PRISMATIC = "prismatic"
    POLYMER_502030 = "502030"
    OTHER = "other"


class Q0Mode(str, Enum):
    """Which reference capacity SOH is computed against."""

    NOMINAL = "nominal"
    FIRST_CYCLE = "first_cycle"


class TimePoint(NamedTuple):
    """One sample of a cycling log.

    t is in seconds and strictly increasing within a cycle. Current is in
    amps, positive while charging and negative while discharging.
    cumulative_capacity is the amp-hours accumulated since the start of the
    current half-cycle (it resets at the charge/discharge boundary).
    """

    t: float
    voltage: float
    current: float
    cumulative_capacity: float


def _points_t(points: Sequence[TimePoint]) -> np.ndarray:
    return np.fromiter((p.t for p in points), dtype=float, count=len(points))


def _check_monotone_time(t: np.ndarray) -> None:
    if t.size < 2:
        return
    bad = np.nonzero(np.diff(t) <= 0)[0]
    if bad.size:
        k = int(bad[0]) + 1
        raise ValidationError(f"timestamps not strictly increasing at point index {k} (t={t[k]!r} follows t={t[k - 1]!r})")


def integrate_capacity(points: Sequence[TimePoint]) -> float:
    """Amp-hours of charge moved over a point sequence: trapezoid of |I| dt.

    A single point spans no time and integrates to zero.
    """
    if len(points) == 0:
        raise ValidationError("cannot integrate an empty point sequence")
    t = _points_t(points)
    _check_monotone_time(t)
    if t.size == 1:
        return 0.0
    cur = np.fromiter((abs(p.current) for p in points), dtype=float, count=len(points))
    return float(np.trapezoid(cur, t)) / SECONDS_PER_HOUR


def cumulative_capacity(t: np.ndarray, current: np.ndarray) -> np.ndarray:
    """Running amp-hours within one half-cycle, zero at the first point."""
    t = np.asarray(t, dtype=float)
    current = np.asarray(current, dtype=float)
    if t.size == 0:
        return np.zeros(0)
    _check_monotone_time(t)
    steps = 0.5 * (np.abs(current[1:]) + np.abs(current[:-1])) * np.diff(t) / SECONDS_PER_HOUR
    out = np.empty(t.size)
    out[0] = 0.0
    np.cumsum(steps, out=out[1:])
    return out


@dataclass(frozen=True)
class Cycle:
    """One charge period followed by one discharge period."""

    index: int
    charge_points: tuple[TimePoint, ...]
    discharge_points: tuple[TimePoint, ...]
    discharge_capacity: float

    def __post_init__(self):
        if self.index < 1:
            raise ValidationError(f"cycle index must be positive, got {self.index}")
        if not self.charge_points or not self.discharge_points:
            raise ValidationError(f"cycle {self.index}: charge and discharge segments must be nonempty")
        measured = integrate_capacity(self.discharge_points)
        if not math.isclose(measured, self.discharge_capacity, rel_tol=1e-6, abs_tol=1e-12):
            raise ValidationError(
                f"cycle {self.index}: discharge_capacity {self.discharge_capacity!r} does not match "
                f"integrated capacity {measured!r} (rel tol 1e-6)"
            )


@dataclass(frozen=True)
class AgingCondition:
    """The nine aging factors; a difference in any field is a different condition."""

    battery_format: BatteryFormat
    anode: str
    cathode: str
    electrolyte: str
    charge_protocol: str
    discharge_protocol: str
    temperature: float
    nominal_capacity: float
    manufacturer: str


@dataclass(frozen=True)
class BatteryRecord:
    """One battery's cleaned or raw cycling history plus its aging condition."""

    id: str
    condition: AgingCondition
    cycles: tuple[Cycle, ...]
    q0_mode: Q0Mode = Q0Mode.NOMINAL
    life_label: Optional[int] = None
    manual_exclusions: tuple[int, ...] = field(default=())

    def __post_init__(self):
        indices = [c.index for c in self.cycles]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ValidationError(f"battery {self.id}: cycles must be strictly ordered by index, got {indices[:20]}...")
        if self.life_label is not None and self.life_label <= MIN_LIFE_LABEL:
            raise ValidationError(f"battery {self.id}: life_label must exceed {MIN_LIFE_LABEL}, got {self.life_label}")


@dataclass(frozen=True)
class SohTrajectory:
    """Per-cycle state of health: (cycle index, SOH fraction) pairs."""

    indices: tuple[int, ...]
    soh: tuple[float, ...]

    def __post_init__(self):
        if len(self.indices) != len(self.soh):
            raise ValidationError("trajectory indices and SOH values differ in length")
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise ValidationError("trajectory cycle indices must be strictly increasing")
        for idx, s in zip(self.indices, self.soh):
            if not (0.0 < s <= 1.5):
                raise ValidationError(f"SOH {s!r} at cycle {idx} outside (0, 1.5]")

    def __len__(self) -> int:
        return len(self.indices)


def compute_soh(q_i: float, q_0: float) -> float:
    """State of health: a cycle's capacity over the reference capacity."""
    if q_0 <= 0:
        raise ValidationError(f"reference capacity must be positive, got {q_0!r}")
    return q_i / q_0


def reference_capacity(record: BatteryRecord) -> float:
    """The record's Q0: nominal capacity, or the first cycle's discharge capacity."""
    if record.q0_mode is Q0Mode.FIRST_CYCLE:
        if not record.cycles:
            raise InsufficientDataError(f"battery {record.id}: first-cycle reference needs at least one cycle")
        return record.cycles[0].discharge_capacity
    return record.condition.nominal_capacity


def soh_trajectory(record: BatteryRecord) -> SohTrajectory:
    """SOH per cycle from discharge capacities, against the record's Q0."""
    if not record.cycles:
        raise InsufficientDataError(f"battery {record.id}: no cycles")
    q0 = reference_capacity(record)
    return SohTrajectory(
        indices=tuple(c.index for c in record.cycles),
        soh=tuple(compute_soh(c.discharge_capacity, q0) for c in record.cycles),
    )


def soh_threshold(q0_mode: Q0Mode) -> float:
    """Default end-of-life SOH threshold for a record's reference mode."""
    return FIRST_CYCLE_SOH_THRESHOLD if q0_mode is Q0Mode.FIRST_CYCLE else DEFAULT_SOH_THRESHOLD


class LabelStatus(str, Enum):
    OK = "label"
    ABOVE_BAND = "excluded_above_band"
    SHORT_LIFE = "excluded_short_life"


@dataclass(frozen=True)
class LabelResult:
    status: LabelStatus
    cycle: Optional[int] = None

    @property
    def is_label(self) -> bool:
        return self.status is LabelStatus.OK


def derive_life_label(traj: SohTrajectory, lam: float = DEFAULT_SOH_THRESHOLD) -> LabelResult:
    """Life label: first cycle with SOH <= lam, extrapolated when close.

    If the trajectory never reaches lam but ends within (lam, lam + 0.025],
    the last two points are extended linearly to SOH = lam and the label is
    the next integer cycle. Trajectories ending above the band are excluded,
    as are labels of 100 cycles or fewer.
    """
    if not (0.0 < lam < 1.0):
        raise ValidationError(f"threshold must be in (0, 1), got {lam!r}")
    if len(traj) == 0:
        raise ValidationError("empty trajectory")

    label: Optional[int] = None
    for idx, s in zip(traj.indices, traj.soh):
        if s <= lam:
            label = idx
            break
    if label is None:
        final = traj.soh[-1]
        if final > lam + EXTRAPOLATION_BAND:
            return LabelResult(LabelStatus.ABOVE_BAND)
        if len(traj) < 2:
            raise InsufficientDataError("extrapolation needs at least two trajectory points")
        n1, n2 = traj.indices[-2], traj.indices[-1]
        s1, s2 = traj.soh[-2], traj.soh[-1]
        if s2 >= s1:
            raise ValidationError(f"cannot extrapolate a non-decreasing tail (SOH {s1!r} -> {s2!r})")
        crossing = n2 + (lam - s2) * (n2 - n1) / (s2 - s1)
        # Snap crossings within 1e-9 above an integer back down, so an exact
        # analytic crossing is not pushed to the next cycle by float noise.
        label = math.ceil(crossing - 1e-9)
    if label <= MIN_LIFE_LABEL:
        return LabelResult(LabelStatus.SHORT_LIFE, cycle=label)
    return LabelResult(LabelStatus.OK, cycle=label)
