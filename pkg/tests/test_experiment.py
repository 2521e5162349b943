"""Experiment orchestration: config validation, runs, resumability, trends."""

import pytest
import yaml

from xlab.errors import ConfigError, ExperimentError
from xlab.experiment import (ExperimentConfig, build_datasets, default_config,
                             load_config, run_experiment, run_trends,
                             validate_config)
from xlab.reports import load_reports_json


def tiny_config(**overrides) -> ExperimentConfig:
    base = {
        "id": "tiny",
        "seeds": [1],
        "victim_data": {"num_classes": 3, "side": 8, "train_per_class": 30,
                        "test_per_class": 10, "patch_size": 3, "template_seed": 5,
                        "train_seed": 6, "test_seed": 7},
        "pool_data": {"samples": 300, "num_classes": 6, "template_seed": 8, "seed": 9},
        "victim_train": {"max_epochs": 2},
        "adv_training": {"techniques": [], "epsilons": []},
        "extraction": {"budgets": [20, 50], "train": {"max_epochs": 2}},
        "metrics": {"eps_grid": [0.05, 0.1], "attack_steps": 2},
    }
    base.update(overrides)
    return validate_config(base)


def test_default_config_is_valid():
    cfg = default_config()
    assert cfg.extraction.budgets == sorted(cfg.extraction.budgets)
    assert len(cfg.metrics.eps_grid) == 8
    assert cfg.seeds == [1, 2, 3]
    assert cfg.victim_model != cfg.extraction.surrogate_model
    # hardening radii stay in the range where images remain recognizable
    assert all(0.01 <= e <= 0.15 for e in cfg.adv_training.epsilons)


def test_published_scale_config():
    from importlib import resources
    text = resources.files("xlab.configs").joinpath("published-scale.yaml").read_text()
    cfg = validate_config(yaml.safe_load(text))
    assert cfg.victim_train.max_epochs == 200
    assert cfg.victim_train.decay_every == 60
    assert cfg.victim_train.initial_lr == 0.01
    assert cfg.extraction.train.max_epochs == 100
    assert cfg.adv_training.techniques == ["fgsm", "pgd"]
    assert cfg.adv_training.epsilons == [0.03, 0.05, 0.1, 0.15]
    assert len(cfg.victim_specs()) == 1 + 2 * 4


def test_packaged_default_yaml_matches_defaults():
    from importlib import resources
    text = resources.files("xlab.configs").joinpath("default.yaml").read_text()
    assert validate_config(yaml.safe_load(text)) == default_config()


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="turbo"):
        validate_config({"turbo": True})
    with pytest.raises(ConfigError, match="victim_data"):
        validate_config({"victim_data": {"sides": 8}})


def test_invalid_values_carry_field_paths():
    with pytest.raises(ConfigError, match="budgets"):
        validate_config({"extraction": {"budgets": [100, 50]}})
    with pytest.raises(ConfigError, match="seeds"):
        validate_config({"seeds": []})
    with pytest.raises(ConfigError, match="epsilons"):
        validate_config({"adv_training": {"epsilons": [0.7]}})


def test_load_config_yaml(tmp_path):
    path = tmp_path / "exp.yaml"
    path.write_text("id: from-file\nseeds: [4]\n")
    cfg = load_config(path)
    assert cfg.id == "from-file"
    assert cfg.seeds == [4]


def test_build_datasets_roles_and_shapes():
    cfg = tiny_config()
    train_set, heldout, pool = build_datasets(cfg)
    assert train_set.role == "victim-train"
    assert heldout.role == "heldout-test"
    assert pool.role == "adversary-pool"
    assert len(train_set) == 90 and len(heldout) == 30 and len(pool) == 300
    assert train_set.input_shape == heldout.input_shape == pool.input_shape


def test_run_experiment_row_accounting(tmp_path):
    cfg = tiny_config()
    result = run_experiment(cfg, out_dir=str(tmp_path))
    # 1 victim (natural only) x 2 budgets x 1 seed
    assert len(result.reports) == 2
    assert {r.budget for r in result.reports} == {20, 50}
    assert all(r.victim_type == "natural" for r in result.reports)
    doc, victims, reports = load_reports_json(result.json_path)
    assert len(victims) == 1 and len(reports) == 2
    csv_lines = open(result.csv_path).read().splitlines()
    assert len(csv_lines) == 3  # header + 2 rows
    assert csv_lines[0].startswith("victim_type,technique,epsilon,budget,seed,test_acc,agreement")
    assert "adv_fgsm_0.05" in csv_lines[0] and "adv_pgd_0.1" in csv_lines[0]


def test_rerun_hits_manifest_and_reproduces_reports(tmp_path):
    cfg = tiny_config()
    first = run_experiment(cfg, out_dir=str(tmp_path))
    assert first.stages_run > 0
    csv_first = open(first.csv_path).read()
    second = run_experiment(cfg, out_dir=str(tmp_path))
    assert second.stages_run == 0
    assert second.stages_cached > 0
    assert open(second.csv_path).read() == csv_first


def test_changed_config_invalidates_cache(tmp_path):
    cfg = tiny_config()
    run_experiment(cfg, out_dir=str(tmp_path))
    changed = tiny_config(victim_train={"max_epochs": 3})
    result = run_experiment(changed, out_dir=str(tmp_path))
    assert result.stages_run > 0


def test_determinism_across_directories(tmp_path):
    cfg = tiny_config(adv_training={"techniques": ["fgsm"], "epsilons": [0.1]})
    a = run_experiment(cfg, out_dir=str(tmp_path / "a"))
    b = run_experiment(cfg, out_dir=str(tmp_path / "b"))
    assert open(a.csv_path, "rb").read() == open(b.csv_path, "rb").read()


def test_adv_matrix_expands_victims(tmp_path):
    cfg = tiny_config(adv_training={"techniques": ["fgsm", "pgd"], "epsilons": [0.1]},
                      extraction={"budgets": [20], "train": {"max_epochs": 2}})
    result = run_experiment(cfg, out_dir=str(tmp_path))
    # natural + 2 hardened victims, 1 budget, 1 seed
    assert len(result.reports) == 3
    assert {r.victim_type for r in result.reports} == {"natural", "adv-fgsm", "adv-pgd"}
    assert len(result.victims) == 3


def test_grid_budget_restriction(tmp_path):
    cfg = tiny_config()
    result = run_experiment(cfg, out_dir=str(tmp_path))
    by_budget = {r.budget: r for r in result.reports}
    assert by_budget[50].adv_grid is not None      # max budget gets the grid
    assert by_budget[20].adv_grid is None
    assert by_budget[50].transfer_grid is not None


def test_trends_require_outputs_and_seeds(tmp_path):
    cfg = tiny_config()
    with pytest.raises(ExperimentError, match="run the experiment"):
        run_trends(cfg, out_dir=str(tmp_path))
    run_experiment(cfg, out_dir=str(tmp_path))
    with pytest.raises(ExperimentError, match="insufficient seeds"):
        run_trends(cfg, out_dir=str(tmp_path))


def test_trends_pass_on_constructed_fixture(tmp_path):
    # synthesize a report file with the desired shape: agreement rising in
    # budget, hardened above natural, robustness transferring
    from xlab.reports import ExtractionReport, VictimRecord, write_reports_json

    budgets = [100, 200]
    reports, victims = [], []
    for seed in (1, 2, 3):
        for vt, tech, eps, base in (("natural", None, None, 0.50),
                                    ("adv-pgd", "pgd", 0.1, 0.60)):
            victims.append(VictimRecord(
                victim_id=vt, victim_type=vt, technique=tech, epsilon=eps, seed=seed,
                clean_accuracy=0.99,
                adv_grid={("pgd", 0.1): 0.05 if vt == "natural" else 0.55,
                          ("fgsm", 0.1): 0.05 if vt == "natural" else 0.55}))
            for i, b in enumerate(budgets):
                reports.append(ExtractionReport(
                    victim_id=vt, victim_type=vt, technique=tech, epsilon=eps,
                    budget=b, seed=seed, test_accuracy=base + 0.1 * i,
                    agreement=base + 0.1 * i,
                    adv_grid={("pgd", 0.1): (0.02 if vt == "natural" else 0.30),
                              ("fgsm", 0.1): (0.02 if vt == "natural" else 0.30)}
                    if b == budgets[-1] else None))
    out = tmp_path / "fix" / "tiny"
    out.mkdir(parents=True)
    write_reports_json(out / "reports.json", experiment_id="tiny", config={},
                       victims=victims, reports=reports)
    verdict = run_trends(tiny_config(id="tiny"), out_dir=str(tmp_path / "fix"))
    assert verdict.passed
    assert [c.passed for c in verdict.checks] == [True] * 4


def test_trends_detect_violations(tmp_path):
    from xlab.reports import ExtractionReport, VictimRecord, write_reports_json

    reports, victims = [], []
    for seed in (1, 2, 3):
        for vt, tech, eps in (("natural", None, None), ("adv-pgd", "pgd", 0.1)):
            victims.append(VictimRecord(
                victim_id=vt, victim_type=vt, technique=tech, epsilon=eps, seed=seed,
                clean_accuracy=0.99, adv_grid={("pgd", 0.1): 0.5, ("fgsm", 0.1): 0.5}))
            for b, agr in ((100, 0.9), (200, 0.4)):  # agreement collapses in budget
                reports.append(ExtractionReport(
                    victim_id=vt, victim_type=vt, technique=tech, epsilon=eps,
                    budget=b, seed=seed, test_accuracy=agr, agreement=agr,
                    adv_grid={("pgd", 0.1): 0.3, ("fgsm", 0.1): 0.3}))
    out = tmp_path / "fix" / "tiny"
    out.mkdir(parents=True)
    write_reports_json(out / "reports.json", experiment_id="tiny", config={},
                       victims=victims, reports=reports)
    verdict = run_trends(tiny_config(id="tiny"), out_dir=str(tmp_path / "fix"))
    assert not verdict.passed
    t1 = verdict.checks[0]
    assert t1.name.startswith("T1") and not t1.passed
    t4 = verdict.checks[3]
    assert not t4.passed  # no robustness lift in the fixture
