"""Command-line entry point.

Subcommands cover the pipeline stages individually (train, advtrain, attack,
extract, serve, evaluate) and as a whole (run, trends). Errors print a
machine-readable JSON line on stderr and exit nonzero.
"""

from __future__ import annotations

import json
import logging
import sys
from importlib import resources

import click

from .attacks import AdvTrainConfig, AttackConfig, adversarial_train, craft_adversarial_set
from .client import RemoteOracle
from .errors import XlabError
from .experiment import (ExperimentConfig, build_datasets, load_config,
                         run_experiment, run_trends)
from .extraction import ExtractionConfig, LocalOracle, save_transferset
from .metrics import adv_accuracy_grid, agreement
from .models import build_model, load_checkpoint, model_family, save_checkpoint
from .service import ServiceConfig, serve as serve_blocking
from .training import evaluate_accuracy, train


def _fail(error: Exception, code: int = 2):
    sys.stderr.write(json.dumps({"error": type(error).__name__, "message": str(error)}) + "\n")
    sys.exit(code)


def _load_experiment_config(path: str | None) -> ExperimentConfig:
    if path is None or path == "default":
        text = resources.files("xlab.configs").joinpath("default.yaml").read_text()
        import yaml

        from .experiment import validate_config
        return validate_config(yaml.safe_load(text))
    return load_config(path)


def _victim_train_config(cfg: ExperimentConfig, seed: int):
    return cfg.victim_train.to_train_config(seed)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log stage progress.")
def main(verbose: bool):
    """Extraction-risk laboratory: train victims, harden them, steal them,
    and measure what changed."""
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
    )


@main.command()
@click.option("--config", "config_path", default="default", show_default=True,
              help="Experiment config file, or 'default' for the built-in one.")
@click.option("--seed", type=int, default=1, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path(),
              help="Checkpoint file to write.")
def train_cmd(config_path, seed, out_path):
    """Train the natural victim and write its checkpoint."""
    try:
        cfg = _load_experiment_config(config_path)
        train_set, heldout, _ = build_datasets(cfg)
        spec = model_family(cfg.victim_model, train_set.input_shape, train_set.num_classes)
        model, history = train(build_model(spec, seed), train_set,
                               _victim_train_config(cfg, seed), heldout=heldout)
        model.metadata.update({"victim_type": "natural", "train_seed": seed,
                               "dataset": train_set.name})
        save_checkpoint(model, out_path)
        final = history.final()
        click.echo(f"wrote {out_path}  train_acc={final.accuracy:.4f} "
                   f"heldout_acc={final.heldout_accuracy:.4f}")
    except XlabError as e:
        _fail(e)


main.add_command(train_cmd, name="train")


@main.command()
@click.option("--config", "config_path", default="default", show_default=True)
@click.option("--seed", type=int, default=1, show_default=True)
@click.option("--technique", type=click.Choice(["fgsm", "pgd"]), required=True)
@click.option("--epsilon", type=float, required=True)
@click.option("--natural", "natural_path", type=click.Path(exists=True), default=None,
              help="Reuse an already trained natural victim checkpoint.")
@click.option("--out", "out_path", required=True, type=click.Path())
def advtrain(config_path, seed, technique, epsilon, natural_path, out_path):
    """Adversarially train a victim (augment-and-retrain) and save it."""
    try:
        cfg = _load_experiment_config(config_path)
        train_set, heldout, _ = build_datasets(cfg)
        spec = model_family(cfg.victim_model, train_set.input_shape, train_set.num_classes)
        attack = AttackConfig(technique=technique, epsilon=epsilon,
                              steps=cfg.adv_training.attack.steps,
                              step_size=cfg.adv_training.attack.step_size)
        natural = load_checkpoint(natural_path) if natural_path else None
        model, history = adversarial_train(spec, train_set, AdvTrainConfig(attack=attack),
                                           _victim_train_config(cfg, seed),
                                           natural_model=natural)
        save_checkpoint(model, out_path)
        click.echo(f"wrote {out_path}  heldout_acc={evaluate_accuracy(model, heldout):.4f}")
    except XlabError as e:
        _fail(e)


@main.command()
@click.option("--config", "config_path", default="default", show_default=True)
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True))
@click.option("--technique", type=click.Choice(["fgsm", "pgd"]), default="fgsm",
              show_default=True)
@click.option("--epsilon", type=float, default=0.1, show_default=True)
@click.option("--steps", type=int, default=10, show_default=True)
def attack(config_path, checkpoint_path, technique, epsilon, steps):
    """Craft adversarial heldout examples against a model and report accuracy."""
    try:
        cfg = _load_experiment_config(config_path)
        _, heldout, _ = build_datasets(cfg)
        model = load_checkpoint(checkpoint_path)
        clean = evaluate_accuracy(model, heldout)
        adv = craft_adversarial_set(model, heldout,
                                    AttackConfig(technique=technique, epsilon=epsilon,
                                                 steps=steps))
        adv_acc = evaluate_accuracy(model, adv)
        click.echo(f"clean_acc={clean:.4f} adv_acc={adv_acc:.4f} "
                   f"({technique} eps={epsilon:g})")
    except XlabError as e:
        _fail(e)


@main.command()
@click.option("--config", "config_path", default="default", show_default=True)
@click.option("--seed", type=int, default=1, show_default=True)
@click.option("--budget", type=int, required=True)
@click.option("--checkpoint", "victim_path", type=click.Path(exists=True), default=None,
              help="Victim checkpoint for a local oracle.")
@click.option("--oracle-url", default=None, help="Base URL of a remote oracle service.")
@click.option("--out", "out_path", required=True, type=click.Path(),
              help="Surrogate checkpoint to write.")
@click.option("--save-transferset", "transferset_path", type=click.Path(), default=None)
def extract_cmd(config_path, seed, budget, victim_path, oracle_url, out_path, transferset_path):
    """Run a budgeted extraction against a local or remote oracle."""
    try:
        if (victim_path is None) == (oracle_url is None):
            raise click.UsageError("pass exactly one of --checkpoint or --oracle-url")
        cfg = _load_experiment_config(config_path)
        _, heldout, pool = build_datasets(cfg)
        surrogate_spec = model_family(cfg.extraction.surrogate_model, pool.input_shape,
                                      cfg.victim_data.num_classes)
        ext_cfg = ExtractionConfig(
            budget=budget, surrogate_spec=surrogate_spec,
            surrogate_train=cfg.extraction.train.to_train_config(seed),
            seed=seed, query_batch_size=cfg.extraction.query_batch_size)
        from .extraction import build_transferset, train_surrogate
        victim = load_checkpoint(victim_path) if victim_path else None
        oracle = LocalOracle(victim, name=f"local:{victim_path}") if victim \
            else RemoteOracle(oracle_url)
        try:
            transferset = build_transferset(oracle, pool, budget, seed,
                                            batch_size=ext_cfg.query_batch_size)
        finally:
            if oracle_url:
                oracle.close()
        surrogate = train_surrogate(ext_cfg, transferset)
        save_checkpoint(surrogate, out_path)
        if transferset_path:
            save_transferset(transferset, transferset_path)
        test_acc = evaluate_accuracy(surrogate, heldout)
        agreement_txt = "n/a" if victim is None else f"{agreement(surrogate, victim, heldout):.4f}"
        click.echo(f"wrote {out_path}  test_acc={test_acc:.4f} "
                   f"agreement={agreement_txt} queries={len(transferset)}")
    except XlabError as e:
        _fail(e)


main.add_command(extract_cmd, name="extract")


@main.command()
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True))
@click.option("--bind", default="127.0.0.1:8100", show_default=True,
              help="host:port to listen on.")
@click.option("--budget", type=int, default=None, help="Total sample budget; unlimited if unset.")
@click.option("--max-batch", type=int, default=256, show_default=True)
@click.option("--log", "log_path", type=click.Path(), default=None,
              help="Query log (JSONL) path.")
def serve(checkpoint_path, bind, budget, max_batch, log_path):
    """Serve a victim checkpoint over the /v1 prediction API."""
    try:
        host, _, port = bind.partition(":")
        config = ServiceConfig(checkpoint=checkpoint_path, host=host or "127.0.0.1",
                               port=int(port or 8100), budget=budget,
                               max_batch=max_batch, log_path=log_path)
        serve_blocking(config)
    except XlabError as e:
        _fail(e)


@main.command()
@click.option("--config", "config_path", default="default", show_default=True)
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True))
@click.option("--victim", "victim_path", type=click.Path(exists=True), default=None,
              help="Second model for an agreement measurement.")
@click.option("--grid/--no-grid", default=False, help="Also run the adversarial grid.")
def evaluate(config_path, checkpoint_path, victim_path, grid):
    """Accuracy (and optionally agreement and the adversarial grid) on heldout data."""
    try:
        cfg = _load_experiment_config(config_path)
        _, heldout, _ = build_datasets(cfg)
        model = load_checkpoint(checkpoint_path)
        click.echo(f"heldout_acc={evaluate_accuracy(model, heldout):.4f}")
        if victim_path:
            victim = load_checkpoint(victim_path)
            click.echo(f"agreement={agreement(model, victim, heldout):.4f}")
        if grid:
            cells = adv_accuracy_grid(model, heldout, cfg.metrics.techniques,
                                      cfg.metrics.eps_grid, steps=cfg.metrics.attack_steps)
            for (tech, eps), value in sorted(cells.items()):
                click.echo(f"adv_{tech}_{eps:g}={value:.4f}")
    except XlabError as e:
        _fail(e)


@main.command()
@click.option("--config", "config_path", default="default", show_default=True)
@click.option("--out", "out_dir", default=None, help="Output root (default from config).")
@click.option("--workers", type=int, default=1, show_default=True,
              help="Parallel seed workers.")
def run(config_path, out_dir, workers):
    """Run the full experiment matrix and write reports."""
    try:
        cfg = _load_experiment_config(config_path)
        result = run_experiment(cfg, out_dir=out_dir, workers=workers)
        click.echo(f"wrote {result.csv_path} ({len(result.reports)} extraction rows, "
                   f"{result.stages_run} stages run, {result.stages_cached} cached, "
                   f"{result.elapsed:.1f}s)")
    except XlabError as e:
        _fail(e)


@main.command()
@click.option("--config", "config_path", default="default", show_default=True)
@click.option("--out", "out_dir", default=None)
def trends(config_path, out_dir):
    """Evaluate the trend checks on a completed experiment; exit 1 on failure."""
    try:
        cfg = _load_experiment_config(config_path)
        verdict = run_trends(cfg, out_dir=out_dir)
    except XlabError as e:
        _fail(e)
        return
    for check in verdict.checks:
        status = "PASS" if check.passed else "FAIL"
        click.echo(f"[{status}] {check.name}: measured={check.measured:.4f} "
                   f"threshold={check.threshold:.4f}  {check.detail}")
    click.echo(f"overall: {'PASS' if verdict.passed else 'FAIL'}")
    if not verdict.passed:
        sys.exit(1)


if __name__ == "__main__":
    main()
