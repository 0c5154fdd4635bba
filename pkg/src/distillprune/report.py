"""Run summaries, per-epoch CSV emission, and cross-run comparison tables."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

from .telemetry import PowerLog, energy_joules
from .training import EpochRecord

# External reference point published with every size report: the original
# experiments report a 45% model-size reduction alongside the 66.67% power
# saving, so size reports carry it for side-by-side comparison.
REFERENCE_SIZE_REDUCTION = 0.45

METRIC_COLUMNS = [
    "epoch",
    "class_loss",
    "attention_loss",
    "soft_loss",
    "total_loss",
    "val_accuracy",
    "val_mae",
    "val_mse",
    "cumulative_sparsity",
    "learning_rate",
    "wall_time",
    "energy_joules",
]


def write_metrics_csv(history: Sequence[EpochRecord], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRIC_COLUMNS)
        for rec in history:
            row = asdict(rec)
            w.writerow(["" if row[c] is None else repr(row[c]) for c in METRIC_COLUMNS])


def read_metrics_csv(path) -> List[dict]:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(
                {k: (None if v == "" else float(v)) for k, v in row.items()}
            )
    return out


@dataclass
class RunReport:
    """Per-run summary; every number is recomputable from the metrics CSV."""

    name: str
    strategy: str
    dataset: str
    seed: int
    metric_family: str  # 'accuracy' | 'regression'
    epochs: int
    feature_group: Optional[str] = None
    winning_round: Optional[int] = None
    winning_sparsity: Optional[float] = None
    winning_metric: Optional[float] = None
    final_accuracy: Optional[float] = None
    final_mae: Optional[float] = None
    final_mse: Optional[float] = None
    total_params: Optional[int] = None
    surviving_params: Optional[int] = None
    size_reduction: Optional[float] = None
    reference_size_reduction: float = REFERENCE_SIZE_REDUCTION
    energy_total_j: float = 0.0
    energy_train_j: float = 0.0
    energy_inference_j: float = 0.0
    metrics_csv: Optional[str] = None
    checkpoint: Optional[str] = None
    power_log: Optional[str] = None
    resolved_config: Optional[str] = None

    def to_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2)

    @classmethod
    def from_json(cls, path) -> "RunReport":
        with open(path) as f:
            payload = json.load(f)
        return cls(**payload)

    def headline_metric(self) -> Dict[str, float]:
        if self.metric_family == "accuracy":
            return {"accuracy": self.winning_metric if self.winning_metric is not None else self.final_accuracy}
        return {"mae": self.final_mae, "mse": self.final_mse}


def _delta_pct(metric: str, baseline: float, value: float) -> float:
    """Positive = improvement: higher accuracy, or lower error/energy/size."""
    if baseline == 0:
        return 0.0
    if metric == "accuracy":
        return 100.0 * (value - baseline) / abs(baseline)
    return 100.0 * (baseline - value) / abs(baseline)


def compare_reports(reports: Sequence[RunReport]) -> Dict[str, object]:
    """Tabulate metric, size reduction, and energy per run plus percentage
    deltas against the first (baseline) report."""
    if len(reports) < 2:
        raise ValueError("compare needs at least two reports")
    family = reports[0].metric_family
    if any(r.metric_family != family for r in reports):
        raise ValueError("cannot compare reports from different metric families")
    if any(r.dataset != reports[0].dataset for r in reports):
        raise ValueError("cannot compare reports from different datasets")

    if family == "accuracy":
        metric_rows = [("accuracy", [r.headline_metric()["accuracy"] for r in reports])]
    else:
        metric_rows = [
            ("mae", [r.final_mae for r in reports]),
            ("mse", [r.final_mse for r in reports]),
        ]
    metric_rows.append(("size_reduction", [r.size_reduction or 0.0 for r in reports]))
    metric_rows.append(("energy_j", [r.energy_total_j for r in reports]))

    rows = []
    for metric, values in metric_rows:
        deltas = [None] + [
            None if v is None or values[0] is None else _delta_pct(metric, values[0], v)
            for v in values[1:]
        ]
        rows.append({"metric": metric, "values": values, "deltas_pct": deltas})
    return {"runs": [r.name for r in reports], "baseline": reports[0].name, "rows": rows}


def comparison_text(table: Dict[str, object]) -> str:
    names = table["runs"]
    width = max(14, *(len(n) + 2 for n in names))
    header = "metric".ljust(16) + "".join(n.rjust(width) for n in names)
    lines = [header, "-" * len(header)]
    for row in table["rows"]:
        cells = []
        for v, d in zip(row["values"], row["deltas_pct"]):
            if v is None:
                cells.append("n/a".rjust(width))
            elif d is None:
                cells.append(f"{v:.4g}".rjust(width))
            else:
                cells.append(f"{v:.4g} ({d:+.1f}%)".rjust(width))
        lines.append(row["metric"].ljust(16) + "".join(cells))
    lines.append(f"(baseline: {table['baseline']}; positive deltas are improvements)")
    return "\n".join(lines)


def comparison_csv(table: Dict[str, object]) -> str:
    names = table["runs"]
    lines = ["metric," + ",".join(names) + "," + ",".join(f"{n}_delta_pct" for n in names[1:])]
    for row in table["rows"]:
        vals = ",".join("" if v is None else f"{v:.6g}" for v in row["values"])
        deltas = ",".join(
            "" if d is None else f"{d:+.2f}" for d in row["deltas_pct"][1:]
        )
        lines.append(f"{row['metric']},{vals},{deltas}")
    return "\n".join(lines) + "\n"


def power_report_text(plog: PowerLog) -> str:
    lines = [f"source: {plog.source}   samples: {len(plog.samples)}"]
    if plog.truncated:
        lines.append("note: log truncated (power source disappeared mid-run)")
    if len(plog.samples) >= 2:
        span = plog.samples[-1].timestamp_s - plog.samples[0].timestamp_s
        total = energy_joules(plog)
        lines.append(f"span: {span:.1f} s   mean power: {total / span if span else 0:.1f} W")
        lines.append(f"energy: {total:.1f} J ({total / 1000:.3f} kJ)")
        for phase in plog.phases():
            lines.append(f"  {phase}: {energy_joules(plog, phase):.1f} J")
    else:
        lines.append("energy: 0.0 J (fewer than two samples)")
    return "\n".join(lines)


def ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return path
