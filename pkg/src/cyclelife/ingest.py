"""Loading, cleaning, and saving standardized battery files.

One battery per UTF-8 JSON file. The serialization is canonical: fixed key
order, floats at 9 significant digits, so saving the same record twice is
byte-identical and files diff cleanly. A fleet manifest lists battery file
paths together with their dataset tag.

Cleaning removes cycles whose discharge capacity deviates from a running
median of the degradation trajectory, plus any explicitly listed exclusions
(formation/reference-test cycles are handled through those lists; there is
no auto-detection).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

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
from .errors import ConfigError, ParseError, ValidationError

log = logging.getLogger(__name__)

DEFAULT_FILTER_WINDOW = 21
DEFAULT_FILTER_THRESHOLD = 0.10

_CONDITION_KEYS = (
    "battery_format",
    "anode",
    "cathode",
    "electrolyte",
    "charge_protocol",
    "discharge_protocol",
    "temperature",
    "nominal_capacity",
    "manufacturer",
)


class RemovalReason(str, Enum):
    MEDIAN_OUTLIER = "median_outlier"
    FORMATION = "formation"
    RPT = "rpt"
    MANUAL = "manual"


class DatasetTag(str, Enum):
    LI_ION = "Li-ion"
    ZN_ION = "Zn-ion"
    NA_ION = "Na-ion"
    CALB = "CALB"
    SYNTHETIC = "synthetic"


@dataclass(frozen=True)
class CleaningReport:
    battery_id: str
    removed_cycle_indices: tuple[int, ...]
    removal_reasons: dict[int, RemovalReason]

    def __post_init__(self):
        if set(self.removed_cycle_indices) != set(self.removal_reasons):
            raise ValidationError("cleaning report indices and reasons disagree")


# ---------------------------------------------------------------------------
# Canonical serialization
# ---------------------------------------------------------------------------

def _fmt_number(x, locus: str) -> str:
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ValidationError(f"{locus}: expected a number, got {type(x).__name__}")
    if isinstance(x, int):
        return str(x)
    if not math.isfinite(x):
        raise ValidationError(f"{locus}: non-finite value {x!r}")
    return format(x, ".9g")


def _fmt_str(s: str) -> str:
    return json.dumps(s, ensure_ascii=True)


def _fmt_number_array(values, locus: str) -> str:
    return "[" + ",".join(_fmt_number(v, locus) for v in values) + "]"


def _half_cycle_json(points: Sequence[TimePoint], locus: str) -> str:
    t = _fmt_number_array([p.t for p in points], locus + ".t")
    v = _fmt_number_array([p.voltage for p in points], locus + ".v")
    i = _fmt_number_array([p.current for p in points], locus + ".i")
    return f'{{"t":{t},"v":{v},"i":{i}}}'


def record_to_canonical_json(record: BatteryRecord) -> str:
    """Canonical text form of a record. The life label is not part of the
    on-disk format; labels are derived downstream or carried in a labels CSV."""
    cond = record.condition
    cond_fields = [
        f'"battery_format":{_fmt_str(cond.battery_format.value)}',
        f'"anode":{_fmt_str(cond.anode)}',
        f'"cathode":{_fmt_str(cond.cathode)}',
        f'"electrolyte":{_fmt_str(cond.electrolyte)}',
        f'"charge_protocol":{_fmt_str(cond.charge_protocol)}',
        f'"discharge_protocol":{_fmt_str(cond.discharge_protocol)}',
        f'"temperature":{_fmt_number(cond.temperature, "condition.temperature")}',
        f'"nominal_capacity":{_fmt_number(cond.nominal_capacity, "condition.nominal_capacity")}',
        f'"manufacturer":{_fmt_str(cond.manufacturer)}',
    ]
    lines = [
        "{",
        f'"id":{_fmt_str(record.id)},',
        '"condition":{' + ",".join(cond_fields) + "},",
        f'"q0_mode":{_fmt_str(record.q0_mode.value)},',
        '"manual_exclusions":[' + ",".join(str(int(i)) for i in record.manual_exclusions) + "],",
        '"cycles":[',
    ]
    cycle_lines = []
    for c in record.cycles:
        locus = f"cycles[{c.index}]"
        cycle_lines.append(
            f'{{"index":{c.index},'
            f'"charge":{_half_cycle_json(c.charge_points, locus + ".charge")},'
            f'"discharge":{_half_cycle_json(c.discharge_points, locus + ".discharge")},'
            f'"discharge_capacity":{_fmt_number(c.discharge_capacity, locus + ".discharge_capacity")}}}'
        )
    lines.append(",\n".join(cycle_lines))
    lines.append("]")
    lines.append("}")
    return "\n".join(lines) + "\n"


def save_battery(record: BatteryRecord, path) -> None:
    """Write the canonical form; two saves of one record are byte-identical."""
    Path(path).write_text(record_to_canonical_json(record), encoding="utf-8")


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _require_keys(obj: dict, keys: Sequence[str], locus: str) -> None:
    missing = [k for k in keys if k not in obj]
    if missing:
        raise ParseError(f"{locus}: missing key(s) {missing}")
    extra = [k for k in obj if k not in keys]
    if extra:
        raise ParseError(f"{locus}: unknown key(s) {extra}")


def _parse_number_list(obj, locus: str) -> np.ndarray:
    if not isinstance(obj, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in obj):
        raise ParseError(f"{locus}: expected a list of numbers")
    arr = np.asarray(obj, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ParseError(f"{locus}: non-finite value")
    return arr


def _parse_half_cycle(obj, locus: str) -> tuple[TimePoint, ...]:
    if not isinstance(obj, dict):
        raise ParseError(f"{locus}: expected an object")
    _require_keys(obj, ("t", "v", "i"), locus)
    t = _parse_number_list(obj["t"], locus + ".t")
    v = _parse_number_list(obj["v"], locus + ".v")
    i = _parse_number_list(obj["i"], locus + ".i")
    if not (t.size == v.size == i.size):
        raise ParseError(f"{locus}: t/v/i lengths differ ({t.size}/{v.size}/{i.size})")
    if t.size == 0:
        raise ParseError(f"{locus}: empty segment")
    try:
        q = cumulative_capacity(t, i)
    except ValidationError as e:
        raise ValidationError(f"{locus}: {e}") from None
    return tuple(TimePoint(float(t[k]), float(v[k]), float(i[k]), float(q[k])) for k in range(t.size))


def _parse_condition(obj, locus: str) -> AgingCondition:
    if not isinstance(obj, dict):
        raise ParseError(f"{locus}: expected an object")
    _require_keys(obj, _CONDITION_KEYS, locus)
    try:
        fmt = BatteryFormat(obj["battery_format"])
    except ValueError:
        raise ParseError(f"{locus}.battery_format: unknown format {obj['battery_format']!r}") from None
    for key in ("anode", "cathode", "electrolyte", "charge_protocol", "discharge_protocol", "manufacturer"):
        if not isinstance(obj[key], str):
            raise ParseError(f"{locus}.{key}: expected a string")
    for key in ("temperature", "nominal_capacity"):
        if isinstance(obj[key], bool) or not isinstance(obj[key], (int, float)):
            raise ParseError(f"{locus}.{key}: expected a number")
    return AgingCondition(
        battery_format=fmt,
        anode=obj["anode"],
        cathode=obj["cathode"],
        electrolyte=obj["electrolyte"],
        charge_protocol=obj["charge_protocol"],
        discharge_protocol=obj["discharge_protocol"],
        temperature=float(obj["temperature"]),
        nominal_capacity=float(obj["nominal_capacity"]),
        manufacturer=obj["manufacturer"],
    )


def load_battery(path) -> BatteryRecord:
    """Parse and validate one standardized battery file."""
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
    if not isinstance(obj, dict):
        raise ParseError(f"{path}: top level must be an object")
    _require_keys(obj, ("id", "condition", "q0_mode", "manual_exclusions", "cycles"), str(path))
    if not isinstance(obj["id"], str) or not obj["id"]:
        raise ParseError(f"{path}: id must be a nonempty string")
    condition = _parse_condition(obj["condition"], f"{path}: condition")
    try:
        q0_mode = Q0Mode(obj["q0_mode"])
    except ValueError:
        raise ParseError(f"{path}: q0_mode must be 'nominal' or 'first_cycle', got {obj['q0_mode']!r}") from None
    excl = obj["manual_exclusions"]
    if not isinstance(excl, list) or not all(isinstance(x, int) and not isinstance(x, bool) for x in excl):
        raise ParseError(f"{path}: manual_exclusions must be a list of integers")
    if not isinstance(obj["cycles"], list):
        raise ParseError(f"{path}: cycles must be a list")

    cycles = []
    for pos, cobj in enumerate(obj["cycles"]):
        locus = f"{path}: cycles[{pos}]"
        if not isinstance(cobj, dict):
            raise ParseError(f"{locus}: expected an object")
        _require_keys(cobj, ("index", "charge", "discharge", "discharge_capacity"), locus)
        if not isinstance(cobj["index"], int) or isinstance(cobj["index"], bool):
            raise ParseError(f"{locus}.index: expected an integer")
        dq = cobj["discharge_capacity"]
        if isinstance(dq, bool) or not isinstance(dq, (int, float)):
            raise ParseError(f"{locus}.discharge_capacity: expected a number")
        try:
            cycles.append(
                Cycle(
                    index=cobj["index"],
                    charge_points=_parse_half_cycle(cobj["charge"], locus + ".charge"),
                    discharge_points=_parse_half_cycle(cobj["discharge"], locus + ".discharge"),
                    discharge_capacity=float(dq),
                )
            )
        except ValidationError as e:
            raise ValidationError(f"{locus}: {e}") from None

    try:
        return BatteryRecord(
            id=obj["id"],
            condition=condition,
            cycles=tuple(cycles),
            q0_mode=q0_mode,
            manual_exclusions=tuple(excl),
        )
    except ValidationError as e:
        raise ValidationError(f"{path}: {e}") from None


# ---------------------------------------------------------------------------
# Cleaning
# ---------------------------------------------------------------------------

def running_median(values: np.ndarray, window: int) -> np.ndarray:
    """Centered running median with edge replication at the boundaries."""
    if window % 2 == 0 or window < 3:
        raise ConfigError(f"median window must be odd and >= 3, got {window}")
    values = np.asarray(values, dtype=float)
    pad = window // 2
    padded = np.concatenate([np.repeat(values[:1], pad), values, np.repeat(values[-1:], pad)])
    windows = np.lib.stride_tricks.sliding_window_view(padded, window)
    return np.median(windows, axis=1)


def filter_outlier_cycles(
    record: BatteryRecord,
    window: int = DEFAULT_FILTER_WINDOW,
    rel_threshold: float = DEFAULT_FILTER_THRESHOLD,
) -> tuple[BatteryRecord, CleaningReport]:
    """Drop cycles whose discharge capacity strays from the running median.

    A cycle is removed when |Q - median| / median exceeds rel_threshold.
    Records shorter than the window are returned unchanged (no-op by
    contract). Surviving cycles keep their original indices and data.
    """
    if window % 2 == 0 or window < 3:
        raise ConfigError(f"median window must be odd and >= 3, got {window}")
    if rel_threshold <= 0:
        raise ConfigError(f"rel_threshold must be positive, got {rel_threshold!r}")
    if len(record.cycles) < window:
        return record, CleaningReport(record.id, (), {})
    caps = np.asarray([c.discharge_capacity for c in record.cycles])
    med = running_median(caps, window)
    deviation = np.abs(caps - med) / np.maximum(med, 1e-300)
    keep = deviation <= rel_threshold
    removed = tuple(int(record.cycles[k].index) for k in np.nonzero(~keep)[0])
    cleaned = BatteryRecord(
        id=record.id,
        condition=record.condition,
        cycles=tuple(c for c, k in zip(record.cycles, keep) if k),
        q0_mode=record.q0_mode,
        life_label=record.life_label,
        manual_exclusions=record.manual_exclusions,
    )
    return cleaned, CleaningReport(record.id, removed, {i: RemovalReason.MEDIAN_OUTLIER for i in removed})


def apply_manual_exclusions(record: BatteryRecord) -> tuple[BatteryRecord, CleaningReport]:
    """Drop the record's listed exclusion indices (formation/RPT/odd cycles)."""
    excluded = set(record.manual_exclusions)
    removed = tuple(c.index for c in record.cycles if c.index in excluded)
    cleaned = BatteryRecord(
        id=record.id,
        condition=record.condition,
        cycles=tuple(c for c in record.cycles if c.index not in excluded),
        q0_mode=record.q0_mode,
        life_label=record.life_label,
        manual_exclusions=(),
    )
    return cleaned, CleaningReport(record.id, removed, {i: RemovalReason.MANUAL for i in removed})


def clean_battery(
    record: BatteryRecord,
    window: int = DEFAULT_FILTER_WINDOW,
    rel_threshold: float = DEFAULT_FILTER_THRESHOLD,
) -> tuple[BatteryRecord, CleaningReport]:
    """Manual exclusions first, then median-filter outlier removal."""
    record, manual = apply_manual_exclusions(record)
    record, outliers = filter_outlier_cycles(record, window, rel_threshold)
    indices = tuple(sorted(manual.removed_cycle_indices + outliers.removed_cycle_indices))
    reasons = {**manual.removal_reasons, **outliers.removal_reasons}
    if len(indices) != len(reasons):
        raise ValidationError(f"battery {record.id}: overlapping removal reasons")
    return record, CleaningReport(record.id, indices, reasons)


# ---------------------------------------------------------------------------
# Fleet manifest
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    dataset: DatasetTag


@dataclass(frozen=True)
class FleetManifest:
    entries: tuple[ManifestEntry, ...]


def save_manifest(manifest: FleetManifest, path) -> None:
    path = Path(path)
    lines = ["{", '"version":1,', '"entries":[']
    entry_lines = []
    for e in manifest.entries:
        rel = e.path if not e.path.is_absolute() else e.path
        entry_lines.append(f'{{"path":{_fmt_str(str(rel))},"dataset":{_fmt_str(e.dataset.value)}}}')
    lines.append(",\n".join(entry_lines))
    lines.append("]")
    lines.append("}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path) -> FleetManifest:
    """Read a fleet manifest; relative battery paths resolve against its directory."""
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
    if not isinstance(obj, dict):
        raise ParseError(f"{path}: top level must be an object")
    _require_keys(obj, ("version", "entries"), str(path))
    if obj["version"] != 1:
        raise ParseError(f"{path}: unsupported manifest version {obj['version']!r}")
    if not isinstance(obj["entries"], list):
        raise ParseError(f"{path}: entries must be a list")
    entries = []
    for pos, e in enumerate(obj["entries"]):
        locus = f"{path}: entries[{pos}]"
        if not isinstance(e, dict):
            raise ParseError(f"{locus}: expected an object")
        _require_keys(e, ("path", "dataset"), locus)
        try:
            tag = DatasetTag(e["dataset"])
        except ValueError:
            raise ParseError(f"{locus}: unknown dataset tag {e['dataset']!r}") from None
        p = Path(e["path"])
        if not p.is_absolute():
            p = path.parent / p
        entries.append(ManifestEntry(path=p, dataset=tag))
    return FleetManifest(entries=tuple(entries))
