"""Evaluation battery: accuracy, agreement, adversarial-accuracy grids, and
extraction gain ratios.

Agreement (fidelity) counts inputs on which two models predict the same
label, right or wrong; it equals accuracy computed with one model's
predictions as the ground truth. Gain ratios compare surrogates stolen from
hardened victims against surrogates stolen from the natural victim at the
same query budget, plus the fraction of the budget at which the hardened
victim's surrogate first matches the natural baseline.
"""

from __future__ import annotations

from dataclasses import dataclass
from statistics import median
from typing import Sequence

import numpy as np

from .attacks import AttackConfig, craft_adversarial_set
from .data import LabeledDataset
from .errors import ExperimentError, ShapeError
from .models import Model, predict_label
from .reports import ExtractionReport, Grid, VICTIM_NATURAL
from .training import evaluate_accuracy


def accuracy(predicted: Sequence[int], truth: Sequence[int]) -> float:
    """Fraction of matching positions; exact integer counting."""
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ShapeError(f"length mismatch: {predicted.shape} vs {truth.shape}")
    if predicted.size == 0:
        raise ShapeError("accuracy of empty sequences is undefined")
    return int((predicted == truth).sum()) / predicted.size


def agreement(surrogate: Model, victim: Model, testset: LabeledDataset,
              batch_size: int = 64) -> float:
    """Fraction of testset inputs where the two models agree on the label."""
    a = predict_label(surrogate, testset.inputs, batch_size=batch_size)
    b = predict_label(victim, testset.inputs, batch_size=batch_size)
    return accuracy(a, b)


def adv_accuracy_grid(model: Model, testset: LabeledDataset, techniques: Sequence[str],
                      eps_grid: Sequence[float], *, steps: int = 10,
                      step_size: float | None = None,
                      source_model: Model | None = None) -> Grid:
    """Accuracy under attack for every (technique, epsilon) cell.

    Examples are crafted against `source_model` when given (transfer
    evaluation), otherwise against the evaluated model itself. An epsilon of
    0 denotes the clean test accuracy.
    """
    if not eps_grid:
        raise ExperimentError("eps_grid must be nonempty")
    crafter = source_model if source_model is not None else model
    grid: Grid = {}
    clean = None
    for tech in techniques:
        for eps in eps_grid:
            eps = float(eps)
            if eps == 0.0:
                if clean is None:
                    clean = evaluate_accuracy(model, testset)
                grid[(tech, eps)] = clean
                continue
            config = AttackConfig(technique=tech, epsilon=eps, steps=steps, step_size=step_size)
            adv = craft_adversarial_set(crafter, testset, config)
            grid[(tech, eps)] = evaluate_accuracy(model, adv)
    return grid


@dataclass
class GainRow:
    """Gains of one hardened victim over the natural baseline at one budget.

    parity_* is the fraction B'/B at which the hardened victim's surrogate
    curve first reaches the natural baseline's value at B, interpolated
    linearly between measured budgets; None when the crossing lies outside
    the measured range.
    """

    victim_type: str
    technique: str | None
    epsilon: float | None
    budget: int
    accuracy_gain: float
    agreement_gain: float
    parity_accuracy: float | None
    parity_agreement: float | None


@dataclass
class GainTable:
    rows: list[GainRow]

    def lookup(self, technique: str, epsilon: float, budget: int) -> GainRow:
        for row in self.rows:
            if (row.technique == technique and row.budget == budget
                    and row.epsilon is not None and abs(row.epsilon - epsilon) < 1e-9):
                return row
        raise ExperimentError(f"no gain row for ({technique}, {epsilon}, {budget})")


def _median_curves(reports: list[ExtractionReport]):
    """Per victim key: budget -> (median accuracy, median agreement)."""
    by_key: dict[tuple, dict[int, tuple[list[float], list[float]]]] = {}
    for r in reports:
        key = (r.victim_type, r.technique, r.epsilon)
        cell = by_key.setdefault(key, {}).setdefault(r.budget, ([], []))
        cell[0].append(r.test_accuracy)
        cell[1].append(r.agreement)
    return {
        key: {b: (median(acc), median(agr)) for b, (acc, agr) in cells.items()}
        for key, cells in by_key.items()
    }


def _parity_fraction(curve: dict[int, float], target: float, budget: int) -> float | None:
    """Smallest B'/budget with curve(B') >= target, interpolating between
    measured budgets; None when the crossing is outside the measured range."""
    points = sorted(curve.items())
    prev_b, prev_v = None, None
    for b, v in points:
        if v >= target:
            if prev_b is None or prev_v is None:
                return b / budget
            if v == prev_v:
                return b / budget
            crossing = prev_b + (target - prev_v) * (b - prev_b) / (v - prev_v)
            return crossing / budget
        prev_b, prev_v = b, v
    return None


def extraction_gains(reports: list[ExtractionReport]) -> GainTable:
    """Gain ratios of every hardened victim against the natural baseline.

    Requires a natural-victim report at every budget that appears; raises
    when the baseline is missing.
    """
    curves = _median_curves(reports)
    natural_key = next((k for k in curves if k[0] == VICTIM_NATURAL), None)
    if natural_key is None:
        raise ExperimentError("missing natural-victim baseline reports")
    natural = curves[natural_key]
    rows = []
    for key, curve in sorted(curves.items(), key=lambda kv: (kv[0][0], kv[0][1] or "", kv[0][2] or 0.0)):
        if key == natural_key:
            continue
        victim_type, technique, epsilon = key
        acc_curve = {b: acc for b, (acc, _) in curve.items()}
        agr_curve = {b: agr for b, (_, agr) in curve.items()}
        for budget in sorted(curve):
            if budget not in natural:
                raise ExperimentError(f"missing natural baseline at budget {budget}")
            nat_acc, nat_agr = natural[budget]
            acc, agr = curve[budget]
            rows.append(GainRow(
                victim_type=victim_type,
                technique=technique,
                epsilon=epsilon,
                budget=budget,
                accuracy_gain=acc / nat_acc,
                agreement_gain=agr / nat_agr,
                parity_accuracy=_parity_fraction(acc_curve, nat_acc, budget),
                parity_agreement=_parity_fraction(agr_curve, nat_agr, budget),
            ))
    return GainTable(rows=rows)
