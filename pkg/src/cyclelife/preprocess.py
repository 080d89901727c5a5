"""From cleaned battery records to fixed-shape model inputs.

Each usable cycle is resampled to 150 points per half-cycle by linear
interpolation on a uniform time grid (300 points per cycle), normalized
(capacity and current by the nominal capacity, voltage by its per-cycle
maximum), and packed into a (3 variables x 100 cycles x 300 points) tensor.
Cycle slots beyond the usable count S are zero placeholders. One sample is
one battery at one usable-cycle count, labeled with the battery's life.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import (
    AgingCondition,
    BatteryFormat,
    BatteryRecord,
    Cycle,
    LabelResult,
    Q0Mode,
    derive_life_label,
    soh_threshold,
    soh_trajectory,
)
from .errors import (
    ConfigError,
    CycleLifeError,
    DataError,
    InsufficientDataError,
    ParseError,
    ValidationError,
)
from .ingest import DatasetTag, FleetManifest, clean_battery, load_battery

log = logging.getLogger(__name__)

HALF_CYCLE_POINTS = 150
CYCLE_POINTS = 2 * HALF_CYCLE_POINTS
MAX_INPUT_CYCLES = 100
N_VARIABLES = 3  # channel order: capacity, voltage, current

CACHE_MAGIC = b"BLPT"
CACHE_VERSION = 1


@dataclass(frozen=True)
class ResampledCycle:
    """One cycle on the fixed grid: 150 charge points then 150 discharge points."""

    capacity: np.ndarray
    voltage: np.ndarray
    current: np.ndarray

    def __post_init__(self):
        for name in ("capacity", "voltage", "current"):
            arr = getattr(self, name)
            if arr.shape != (CYCLE_POINTS,):
                raise ValidationError(f"{name} must have shape ({CYCLE_POINTS},), got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains non-finite values")


@dataclass(frozen=True, eq=False)
class SampleTensor:
    """A model input: (3, 100, 300) float32 with S usable cycles and a life label."""

    data: np.ndarray
    usable_cycles: int
    label: int
    battery_id: str
    condition: AgingCondition

    def __post_init__(self):
        if self.data.shape != (N_VARIABLES, MAX_INPUT_CYCLES, CYCLE_POINTS):
            raise ValidationError(f"sample data must be (3, 100, 300), got {self.data.shape}")
        if self.data.dtype != np.float32:
            raise ValidationError(f"sample data must be float32, got {self.data.dtype}")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError(f"battery {self.battery_id}: non-finite sample values")
        if not 1 <= self.usable_cycles <= MAX_INPUT_CYCLES:
            raise ValidationError(f"usable_cycles must be in [1, {MAX_INPUT_CYCLES}], got {self.usable_cycles}")
        if self.usable_cycles >= self.label:
            raise ValidationError(
                f"battery {self.battery_id}: usable cycles {self.usable_cycles} must precede life {self.label}"
            )
        if np.any(self.data[:, self.usable_cycles :, :]):
            raise ValidationError(f"battery {self.battery_id}: padding slots beyond S must be exactly zero")


def _interp_half(points, cycle_index: int, side: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if len(points) < 2:
        raise InsufficientDataError(
            f"cycle {cycle_index}: {side} segment has {len(points)} point(s); resampling needs at least 2"
        )
    t = np.array([p.t for p in points])
    grid = np.linspace(t[0], t[-1], HALF_CYCLE_POINTS)
    v = np.interp(grid, t, np.array([p.voltage for p in points]))
    i = np.interp(grid, t, np.array([p.current for p in points]))
    q = np.interp(grid, t, np.array([p.cumulative_capacity for p in points]))
    return q, v, i


def resample_cycle(cycle: Cycle) -> ResampledCycle:
    """Linear interpolation of each half-cycle onto 150 uniform time points.

    Endpoints are preserved exactly. Values are not yet normalized.
    """
    qc, vc, ic = _interp_half(cycle.charge_points, cycle.index, "charge")
    qd, vd, id_ = _interp_half(cycle.discharge_points, cycle.index, "discharge")
    return ResampledCycle(
        capacity=np.concatenate([qc, qd]),
        voltage=np.concatenate([vc, vd]),
        current=np.concatenate([ic, id_]),
    )


def normalize_cycle(rc: ResampledCycle, q_nominal: float) -> ResampledCycle:
    """Scale capacity and current by the nominal capacity, voltage by its max.

    The maximum is taken over the whole 300-point cycle, so the normalized
    voltage has max exactly 1.0.
    """
    if q_nominal <= 0:
        raise ValidationError(f"nominal capacity must be positive, got {q_nominal!r}")
    vmax = float(np.max(rc.voltage))
    if vmax <= 0:
        raise ValidationError(f"max voltage must be positive to normalize, got {vmax!r}")
    return ResampledCycle(
        capacity=rc.capacity / q_nominal,
        voltage=rc.voltage / vmax,
        current=rc.current / q_nominal,
    )


def _normalized_cycle_matrix(record: BatteryRecord, n_cycles: int) -> np.ndarray:
    """(3, n_cycles, 300) float64 of the record's first n_cycles, normalized."""
    out = np.empty((N_VARIABLES, n_cycles, CYCLE_POINTS))
    q_nominal = record.condition.nominal_capacity
    for k in range(n_cycles):
        rc = normalize_cycle(resample_cycle(record.cycles[k]), q_nominal)
        out[0, k] = rc.capacity
        out[1, k] = rc.voltage
        out[2, k] = rc.current
    return out


def build_sample(record: BatteryRecord, usable_cycles: int) -> SampleTensor:
    """Pack the first S cleaned cycles into a zero-padded sample tensor."""
    if not 1 <= usable_cycles <= MAX_INPUT_CYCLES:
        raise ValidationError(f"usable cycle count must be in [1, {MAX_INPUT_CYCLES}], got {usable_cycles}")
    if record.life_label is None:
        raise ValidationError(f"battery {record.id}: cannot build a sample without a life label")
    if usable_cycles >= record.life_label:
        raise ValidationError(
            f"battery {record.id}: S={usable_cycles} does not precede life {record.life_label}"
        )
    if len(record.cycles) < usable_cycles:
        raise InsufficientDataError(
            f"battery {record.id}: {len(record.cycles)} cycles available, S={usable_cycles} requested"
        )
    data = np.zeros((N_VARIABLES, MAX_INPUT_CYCLES, CYCLE_POINTS), dtype=np.float32)
    data[:, :usable_cycles, :] = _normalized_cycle_matrix(record, usable_cycles)
    return SampleTensor(
        data=data,
        usable_cycles=usable_cycles,
        label=record.life_label,
        battery_id=record.id,
        condition=record.condition,
    )


def _check_s_values(s_values: Iterable[int]) -> list[int]:
    s_list = sorted(set(int(s) for s in s_values))
    if not s_list:
        raise ConfigError("S_values must be a nonempty set of usable-cycle counts")
    if s_list[0] < 1 or s_list[-1] > MAX_INPUT_CYCLES:
        raise ConfigError(f"S_values must lie in [1, {MAX_INPUT_CYCLES}], got {s_list}")
    return s_list


def label_record(
    record: BatteryRecord,
    lam: Optional[float] = None,
    dataset: DatasetTag = DatasetTag.SYNTHETIC,
) -> LabelResult:
    """Derive the record's life label from its cleaned SOH trajectory."""
    if lam is None:
        lam = 0.90 if dataset is DatasetTag.CALB else soh_threshold(record.q0_mode)
    return derive_life_label(soh_trajectory(record), lam)


def samples_from_record(
    record: BatteryRecord,
    s_values: Sequence[int],
    lam: Optional[float] = None,
    dataset: DatasetTag = DatasetTag.SYNTHETIC,
    filter_window: int = 21,
    filter_threshold: float = 0.10,
    q0_mode_override: Optional[Q0Mode] = None,
) -> list[SampleTensor]:
    """Clean, label, and materialize one battery's samples (possibly none).

    Batteries that cannot be labeled are skipped with a log line, matching
    the exclusion rules applied to the real datasets.
    """
    s_list = _check_s_values(s_values)
    if q0_mode_override is not None and record.q0_mode is not q0_mode_override:
        record = dataclasses.replace(record, q0_mode=q0_mode_override)
    cleaned, report = clean_battery(record, filter_window, filter_threshold)
    if report.removed_cycle_indices:
        log.info("battery %s: removed %d cycle(s) during cleaning", record.id, len(report.removed_cycle_indices))
    try:
        result = label_record(cleaned, lam, dataset)
    except CycleLifeError as e:
        log.warning("battery %s: skipped, labeling failed: %s", record.id, e)
        return []
    if not result.is_label:
        log.info("battery %s: skipped (%s)", record.id, result.status.value)
        return []
    labeled = dataclasses.replace(cleaned, life_label=result.cycle)
    usable = [s for s in s_list if s < result.cycle and s <= len(cleaned.cycles)]
    if not usable:
        return []
    mat = _normalized_cycle_matrix(labeled, usable[-1])
    samples = []
    for s in usable:
        data = np.zeros((N_VARIABLES, MAX_INPUT_CYCLES, CYCLE_POINTS), dtype=np.float32)
        data[:, :s, :] = mat[:, :s]
        samples.append(
            SampleTensor(
                data=data,
                usable_cycles=s,
                label=result.cycle,
                battery_id=labeled.id,
                condition=labeled.condition,
            )
        )
    return samples


def make_dataset(
    manifest: FleetManifest,
    s_values: Sequence[int],
    lam: Optional[float] = None,
    filter_window: int = 21,
    filter_threshold: float = 0.10,
    q0_mode_override: Optional[Q0Mode] = None,
    jobs: int = 1,
) -> list[SampleTensor]:
    """Materialize the (sample, label) dataset for a whole fleet.

    Deterministic: manifest order, then ascending S within each battery;
    jobs > 1 fans the per-battery work out to a thread pool with the same
    ordered reduce.
    """
    _check_s_values(s_values)

    def one(entry):
        record = load_battery(entry.path)
        return samples_from_record(
            record, s_values, lam, entry.dataset, filter_window, filter_threshold, q0_mode_override
        )

    samples: list[SampleTensor] = []
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for chunk in pool.map(one, manifest.entries):
                samples.extend(chunk)
    else:
        for entry in manifest.entries:
            samples.extend(one(entry))
    if not samples:
        raise ConfigError("dataset is empty after exclusions; check S_values and the manifest")
    return samples


# ---------------------------------------------------------------------------
# Binary sample cache
# ---------------------------------------------------------------------------

def save_sample_cache(samples: Sequence[SampleTensor], path) -> None:
    """Little-endian binary cache plus a JSON sidecar with per-battery conditions."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<II", CACHE_VERSION, len(samples)))
        for s in samples:
            ident = s.battery_id.encode("utf-8")
            f.write(struct.pack("<H", len(ident)))
            f.write(ident)
            f.write(struct.pack("<HI", s.usable_cycles, s.label))
            f.write(np.ascontiguousarray(s.data, dtype="<f4").tobytes())
    meta = {
        "conditions": {
            s.battery_id: {
                "battery_format": s.condition.battery_format.value,
                "anode": s.condition.anode,
                "cathode": s.condition.cathode,
                "electrolyte": s.condition.electrolyte,
                "charge_protocol": s.condition.charge_protocol,
                "discharge_protocol": s.condition.discharge_protocol,
                "temperature": s.condition.temperature,
                "nominal_capacity": s.condition.nominal_capacity,
                "manufacturer": s.condition.manufacturer,
            }
            for s in samples
        }
    }
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load_sample_cache(path, conditions: Optional[dict[str, AgingCondition]] = None) -> list[SampleTensor]:
    """Read a sample cache; conditions come from the sidecar unless provided."""
    path = Path(path)
    if conditions is None:
        meta_path = Path(str(path) + ".meta.json")
        if not meta_path.exists():
            raise DataError(f"{path}: missing sidecar {meta_path.name}; pass conditions explicitly")
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        conditions = {
            bid: AgingCondition(
                battery_format=BatteryFormat(c["battery_format"]),
                anode=c["anode"],
                cathode=c["cathode"],
                electrolyte=c["electrolyte"],
                charge_protocol=c["charge_protocol"],
                discharge_protocol=c["discharge_protocol"],
                temperature=float(c["temperature"]),
                nominal_capacity=float(c["nominal_capacity"]),
                manufacturer=c["manufacturer"],
            )
            for bid, c in meta["conditions"].items()
        }
    raw = path.read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise ParseError(f"{path}: bad magic {raw[:4]!r}")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != CACHE_VERSION:
        raise ParseError(f"{path}: unsupported cache version {version}")
    offset = 12
    block = N_VARIABLES * MAX_INPUT_CYCLES * CYCLE_POINTS
    samples = []
    for k in range(n):
        (id_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        battery_id = raw[offset : offset + id_len].decode("utf-8")
        offset += id_len
        s, label = struct.unpack_from("<HI", raw, offset)
        offset += 6
        data = np.frombuffer(raw, dtype="<f4", count=block, offset=offset).reshape(
            N_VARIABLES, MAX_INPUT_CYCLES, CYCLE_POINTS
        )
        offset += block * 4
        if battery_id not in conditions:
            raise DataError(f"{path}: no condition for battery {battery_id!r}")
        samples.append(
            SampleTensor(
                data=data.copy(),
                usable_cycles=int(s),
                label=int(label),
                battery_id=battery_id,
                condition=conditions[battery_id],
            )
        )
    if offset != len(raw):
        raise ParseError(f"{path}: {len(raw) - offset} trailing bytes")
    return samples
