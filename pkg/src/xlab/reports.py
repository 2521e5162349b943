"""Report records and their CSV/JSON serialization.

The CSV is the machine-readable artifact: one row per victim x budget x seed
with a fixed column order (victim_type, technique, epsilon, budget, seed,
test_acc, agreement, then one adv_{technique}_{eps} column per grid cell).
The JSON document carries everything else: victim-side records, transfer
grids, provenance, and timings.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

from .errors import ExperimentError

SCHEMA_VERSION = 1

VICTIM_NATURAL = "natural"

GridKey = tuple[str, float]
Grid = dict[GridKey, float]


def victim_type_for(technique: str | None, epsilon: float | None) -> str:
    if technique is None:
        return VICTIM_NATURAL
    return f"adv-{technique}"


@dataclass
class VictimRecord:
    """Victim-side measurements for one (victim, seed) pair."""

    victim_id: str
    victim_type: str
    technique: str | None
    epsilon: float | None
    seed: int
    clean_accuracy: float
    adv_grid: Grid = field(default_factory=dict)
    checkpoint: str | None = None
    timing: float | None = None


@dataclass
class ExtractionReport:
    """One extraction run: a victim queried at one budget by one seed.

    adv_grid holds adversarial accuracies of the surrogate against examples
    crafted on the surrogate itself; transfer_grid holds its accuracies on
    examples crafted against the victim. Either may be absent when the
    experiment config restricts grid evaluation.
    """

    victim_id: str
    victim_type: str
    technique: str | None
    epsilon: float | None
    budget: int
    seed: int
    test_accuracy: float
    agreement: float
    queries_used: int = 0
    adv_grid: Grid | None = None
    transfer_grid: Grid | None = None
    provenance: dict = field(default_factory=dict)
    timing: float | None = None


def _grid_to_json(grid: Grid | None):
    if grid is None:
        return None
    out: dict[str, dict[str, float]] = {}
    for (tech, eps), value in grid.items():
        out.setdefault(tech, {})[repr(float(eps))] = value
    return out


def _grid_from_json(obj) -> Grid | None:
    if obj is None:
        return None
    grid: Grid = {}
    for tech, row in obj.items():
        for eps_str, value in row.items():
            grid[(tech, float(eps_str))] = value
    return grid


def grid_columns(techniques: list[str], eps_grid: list[float]) -> list[str]:
    return [f"adv_{tech}_{eps:g}" for tech in techniques for eps in eps_grid]


def write_reports_csv(path, reports: list[ExtractionReport],
                      techniques: list[str], eps_grid: list[float]) -> None:
    """Deterministic CSV: fixed header, rows sorted, repr-formatted floats."""
    columns = ["victim_type", "technique", "epsilon", "budget", "seed",
               "test_acc", "agreement"] + grid_columns(techniques, eps_grid)
    rows = sorted(reports, key=lambda r: (r.victim_type, r.technique or "",
                                          r.epsilon or 0.0, r.budget, r.seed))
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for r in rows:
            row = [
                r.victim_type,
                r.technique or "",
                repr(float(r.epsilon)) if r.epsilon is not None else "",
                r.budget,
                r.seed,
                repr(float(r.test_accuracy)),
                repr(float(r.agreement)),
            ]
            for tech in techniques:
                for eps in eps_grid:
                    value = (r.adv_grid or {}).get((tech, float(eps)))
                    row.append(repr(float(value)) if value is not None else "")
            writer.writerow(row)


def write_reports_json(path, *, experiment_id: str, config: dict,
                       victims: list[VictimRecord], reports: list[ExtractionReport]) -> None:
    def report_dict(r: ExtractionReport) -> dict:
        d = asdict(r)
        d["adv_grid"] = _grid_to_json(r.adv_grid)
        d["transfer_grid"] = _grid_to_json(r.transfer_grid)
        return d

    def victim_dict(v: VictimRecord) -> dict:
        d = asdict(v)
        d["adv_grid"] = _grid_to_json(v.adv_grid)
        return d

    doc = {
        "schema_version": SCHEMA_VERSION,
        "experiment": experiment_id,
        "config": config,
        "victims": [victim_dict(v) for v in sorted(
            victims, key=lambda v: (v.victim_type, v.technique or "", v.epsilon or 0.0, v.seed))],
        "extractions": [report_dict(r) for r in sorted(
            reports, key=lambda r: (r.victim_type, r.technique or "", r.epsilon or 0.0,
                                    r.budget, r.seed))],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def load_reports_json(path) -> tuple[dict, list[VictimRecord], list[ExtractionReport]]:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ExperimentError(f"unsupported report schema {doc.get('schema_version')}")
    victims = []
    for v in doc.get("victims", []):
        v = dict(v)
        v["adv_grid"] = _grid_from_json(v.get("adv_grid")) or {}
        victims.append(VictimRecord(**v))
    reports = []
    for r in doc.get("extractions", []):
        r = dict(r)
        r["adv_grid"] = _grid_from_json(r.get("adv_grid"))
        r["transfer_grid"] = _grid_from_json(r.get("transfer_grid"))
        reports.append(ExtractionReport(**r))
    return doc, victims, reports
