"""Report rendering: human-readable tables, flat JSON rows, and sweep CSV."""

from __future__ import annotations

import json
from typing import Optional, Sequence

from .core import AgingCondition
from .evaluation import EvalReport


def condition_dict(c: AgingCondition) -> dict:
    return {
        "battery_format": c.battery_format.value,
        "anode": c.anode,
        "cathode": c.cathode,
        "electrolyte": c.electrolyte,
        "charge_protocol": c.charge_protocol,
        "discharge_protocol": c.discharge_protocol,
        "temperature": c.temperature,
        "nominal_capacity": c.nominal_capacity,
        "manufacturer": c.manufacturer,
    }


def report_rows(report: EvalReport, split: str = "test") -> list[dict]:
    """Flat machine-readable rows: {metric, split, condition, S, seed, value}."""
    rows: list[dict] = []

    def row(metric, value, condition=None, s=None, seed=None):
        rows.append({"metric": metric, "split": split, "condition": condition, "S": s, "seed": seed, "value": value})

    for seed, m, a in zip(report.seeds, report.mape.values, report.acc.values):
        row("mape", m, seed=seed)
        row("acc", a, seed=seed)
    row("mape_mean", report.mape.mean)
    row("mape_std", report.mape.std)
    row("acc_mean", report.acc.mean)
    row("acc_std", report.acc.std)
    for cs in report.per_condition:
        cond = condition_dict(cs.condition)
        row("mape", cs.mape_mean, condition=cond)
        row("acc", cs.acc_mean, condition=cond)
        row("seen_runs", cs.seen_runs, condition=cond)
    for s, m, a in report.per_s:
        row("mape", m, s=s)
        row("acc", a, s=s)
    for run, seed in zip(report.runs, report.seeds):
        if run.seen is not None:
            row("mape_seen", run.seen.mape, seed=seed)
            row("acc_seen", run.seen.acc, seed=seed)
        if run.unseen is not None:
            row("mape_unseen", run.unseen.mape, seed=seed)
            row("acc_unseen", run.unseen.acc, seed=seed)
    return rows


def report_json(report: EvalReport, resolved_config: Optional[dict] = None, input_hash: Optional[str] = None) -> str:
    doc = {
        "rows": report_rows(report),
        "alpha": report.alpha,
        "seeds": list(report.seeds),
        "notes": list(report.notes),
    }
    if resolved_config is not None:
        doc["resolved_config"] = resolved_config
    if input_hash is not None:
        doc["input_hash"] = input_hash
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def render_report(report: EvalReport, title: str = "evaluation") -> str:
    """A compact fixed-width table for terminals and logs."""
    lines = [title, "=" * len(title)]
    pct = 100.0 * report.alpha
    lines.append(
        f"MAPE {report.mape.mean:.4f} +- {report.mape.std:.4f} | "
        f"{pct:g}%-Acc {report.acc.mean:.4f} +- {report.acc.std:.4f} | seeds {list(report.seeds)}"
    )
    if report.per_s:
        lines.append("usable cycles:")
        for s, m, a in report.per_s:
            lines.append(f"  S={s:>3d}  MAPE {m:.4f}  Acc {a:.4f}")
    seen_runs = [r for r in report.runs if r.seen is not None]
    unseen_runs = [r for r in report.runs if r.unseen is not None]
    if seen_runs:
        mean_seen = sum(r.seen.mape for r in seen_runs) / len(seen_runs)
        lines.append(f"seen-condition MAPE (mean over {len(seen_runs)} run(s)): {mean_seen:.4f}")
    if unseen_runs:
        mean_unseen = sum(r.unseen.mape for r in unseen_runs) / len(unseen_runs)
        lines.append(f"unseen-condition MAPE (mean over {len(unseen_runs)} run(s)): {mean_unseen:.4f}")
    if report.per_condition:
        lines.append("aging conditions:")
        for cs in sorted(report.per_condition, key=lambda c: repr(condition_dict(c.condition))):
            cond = cs.condition
            tag = f"{cond.cathode}/{cond.anode}@{cond.temperature:g}C chg={cond.charge_protocol}"
            lines.append(
                f"  {tag:<44s} MAPE {cs.mape_mean:.4f}  Acc {cs.acc_mean:.4f}  n={cs.n_total}  seen {cs.seen_runs}/{cs.runs}"
            )
    for note in report.notes:
        lines.append(f"note: {note}")
    return "\n".join(lines) + "\n"


def sweep_csv(curve: Sequence[tuple[int, float, float]]) -> str:
    lines = ["S,mape,acc15"]
    for s, m, a in curve:
        lines.append(f"{s},{m!r},{a!r}")
    return "\n".join(lines) + "\n"
