"""Metric oracles, grids, and gain-ratio computation."""

import numpy as np
import pytest

from xlab.data import ROLE_HELDOUT_TEST, SynthConfig, synth_generate
from xlab.errors import ExperimentError, ShapeError
from xlab.metrics import (accuracy, adv_accuracy_grid, agreement,
                          extraction_gains)
from xlab.models import build_model, model_family
from xlab.reports import ExtractionReport
from xlab.training import evaluate_accuracy


def brute_force_match_fraction(a, b):
    count = 0
    for x, y in zip(a, b):
        if x == y:
            count += 1
    return count / len(a)


def test_accuracy_trivial_cases():
    assert accuracy([0, 1, 2], [0, 1, 2]) == 1.0
    assert accuracy([0, 1, 2, 2], [0, 2, 2, 2]) == 0.75
    assert accuracy([1, 1], [0, 0]) == 0.0


def test_accuracy_errors():
    with pytest.raises(ShapeError, match="length"):
        accuracy([1, 2], [1])
    with pytest.raises(ShapeError, match="empty"):
        accuracy([], [])


def test_accuracy_matches_brute_force_loop():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 50))
        a = rng.integers(0, 5, n)
        b = rng.integers(0, 5, n)
        assert accuracy(a, b) == brute_force_match_fraction(list(a), list(b))


@pytest.fixture(scope="module")
def testset():
    return synth_generate(SynthConfig(num_classes=3, per_class=15, side=4, seed=2,
                                      template_seed=9, noise=0.2),
                          name="held", role=ROLE_HELDOUT_TEST)


def models_pair(testset):
    spec = model_family("mlp-wide", (1, 4, 4), 3)
    return build_model(spec, seed=1), build_model(spec, seed=2)


def test_self_agreement_is_one(testset):
    spec = model_family("mlp-wide", (1, 4, 4), 3)
    for seed in range(5):
        model = build_model(spec, seed=seed)
        assert agreement(model, model, testset) == 1.0


def test_agreement_symmetric(testset):
    a, b = models_pair(testset)
    assert agreement(a, b, testset) == agreement(b, a, testset)


def test_agreement_equals_accuracy_on_victim_labels(testset):
    from xlab.models import predict_label
    a, b = models_pair(testset)
    expected = accuracy(predict_label(a, testset.inputs), predict_label(b, testset.inputs))
    assert agreement(a, b, testset) == expected


def test_agreement_counts_shared_mistakes(testset):
    # identical models agree even where both are wrong
    spec = model_family("mlp-wide", (1, 4, 4), 3)
    model = build_model(spec, seed=3)
    acc = evaluate_accuracy(model, testset)
    assert acc < 1.0  # untrained model is wrong somewhere
    assert agreement(model, model, testset) == 1.0


def test_grid_zero_eps_equals_clean(testset):
    model = build_model(model_family("mlp-wide", (1, 4, 4), 3), seed=4)
    grid = adv_accuracy_grid(model, testset, ["fgsm"], [0.0, 0.1], steps=2)
    assert grid[("fgsm", 0.0)] == evaluate_accuracy(model, testset)


def test_grid_dimensions(testset):
    model = build_model(model_family("mlp-wide", (1, 4, 4), 3), seed=5)
    grid = adv_accuracy_grid(model, testset, ["fgsm", "pgd"], [0.05, 0.1], steps=2)
    assert set(grid) == {("fgsm", 0.05), ("fgsm", 0.1), ("pgd", 0.05), ("pgd", 0.1)}
    assert all(0.0 <= v <= 1.0 for v in grid.values())


def make_report(victim_type, technique, epsilon, budget, acc, agr, seed=1):
    return ExtractionReport(victim_id=victim_type, victim_type=victim_type,
                            technique=technique, epsilon=epsilon, budget=budget,
                            seed=seed, test_accuracy=acc, agreement=agr)


def test_gains_identity():
    reports = [
        make_report("natural", None, None, 100, 0.5, 0.52),
        make_report("adv-fgsm", "fgsm", 0.1, 100, 0.5, 0.52),
    ]
    table = extraction_gains(reports)
    row = table.lookup("fgsm", 0.1, 100)
    assert row.accuracy_gain == pytest.approx(1.0)
    assert row.agreement_gain == pytest.approx(1.0)
    assert row.parity_accuracy == pytest.approx(1.0)


def test_gains_missing_baseline():
    with pytest.raises(ExperimentError, match="baseline"):
        extraction_gains([make_report("adv-fgsm", "fgsm", 0.1, 100, 0.5, 0.5)])


def test_gains_median_over_seeds():
    reports = [make_report("natural", None, None, 10, acc, acc, seed=s)
               for s, acc in ((1, 0.4), (2, 0.5), (3, 0.9))]
    reports += [make_report("adv-pgd", "pgd", 0.1, 10, acc, acc, seed=s)
                for s, acc in ((1, 0.5), (2, 0.6), (3, 1.0))]
    row = extraction_gains(reports).lookup("pgd", 0.1, 10)
    assert row.accuracy_gain == pytest.approx(0.6 / 0.5)


def test_parity_interpolation():
    # hardened curve crosses the natural baseline (0.6@1000) between budgets
    reports = [
        make_report("natural", None, None, 500, 0.40, 0.40),
        make_report("natural", None, None, 1000, 0.60, 0.60),
        make_report("adv-pgd", "pgd", 0.1, 500, 0.50, 0.50),
        make_report("adv-pgd", "pgd", 0.1, 1000, 0.70, 0.70),
    ]
    row = extraction_gains(reports).lookup("pgd", 0.1, 1000)
    # crossing at 500 + (0.6-0.5)/(0.7-0.5)*500 = 750 -> fraction 0.75
    assert row.parity_accuracy == pytest.approx(0.75)


def test_parity_refused_outside_range():
    reports = [
        make_report("natural", None, None, 500, 0.40, 0.40),
        make_report("natural", None, None, 1000, 0.90, 0.90),
        make_report("adv-pgd", "pgd", 0.1, 500, 0.30, 0.30),
        make_report("adv-pgd", "pgd", 0.1, 1000, 0.80, 0.80),
    ]
    row = extraction_gains(reports).lookup("pgd", 0.1, 1000)
    assert row.parity_accuracy is None
