"""Config-driven orchestration of the full pipeline.

One experiment = for every seed: train the natural victim, harden copies of
it per (technique, epsilon), extract every victim at every query budget, and
run the metrics battery. Outputs land in a per-experiment directory tree:

    out/<id>/reports.csv          fixed-schema machine output
    out/<id>/reports.json         full records with provenance
    out/<id>/manifest.json        run status
    out/<id>/seed-<s>/            checkpoints, metric caches, stage manifest

Every stage records a content hash of the configuration slice that feeds
it; a rerun that finds matching hashes loads outputs instead of recomputing,
so completed work is never repeated and interrupted runs resume.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path
from statistics import median
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator

from .attacks import AdvTrainConfig, AttackConfig, adversarial_train, craft_adversarial_set
from .data import (ROLE_ADVERSARY_POOL, ROLE_HELDOUT_TEST, ROLE_VICTIM_TRAIN,
                   LabeledDataset, SynthConfig, synth_generate)
from .errors import ConfigError, ExperimentError
from .extraction import ExtractionConfig, LocalOracle, extract
from .models import Model, build_model, load_checkpoint, model_family, save_checkpoint
from .reports import (ExtractionReport, VictimRecord, load_reports_json,
                      victim_type_for, write_reports_csv, write_reports_json)
from .training import TrainConfig, evaluate_accuracy, train

logger = logging.getLogger(__name__)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TrainSection(_Section):
    initial_lr: float = 0.01
    decay_factor: float = 0.1
    decay_every: int = 15
    max_epochs: int = 30
    batch_size: int = 64
    momentum: float = 0.9

    def to_train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **self.model_dump())


class VictimDataSection(_Section):
    num_classes: int = 10
    side: int = 16
    train_per_class: int = 500
    test_per_class: int = 100
    noise: float = 0.25
    style: str = "patch"
    patch_size: int = 4
    patch_contrast: float = 0.5
    template_seed: int = 11
    train_seed: int = 101
    test_seed: int = 202


class PoolDataSection(_Section):
    samples: int = 8000
    num_classes: int = 40
    noise: float = 0.45
    style: str = "field"
    template_seed: int = 97
    seed: int = 303


class AttackSection(_Section):
    steps: int = 10
    step_size: float | None = None
    random_start: bool = False


class AdvTrainingSection(_Section):
    techniques: list[str] = ["fgsm", "pgd"]
    epsilons: list[float] = [0.05, 0.1]
    attack: AttackSection = AttackSection()

    @field_validator("epsilons")
    @classmethod
    def _eps_range(cls, v):
        if any(not 0.0 < e <= 0.5 for e in v):
            raise ValueError("epsilons must lie in (0, 0.5]")
        return v

    @field_validator("techniques")
    @classmethod
    def _tech_known(cls, v):
        if any(t not in ("fgsm", "pgd") for t in v):
            raise ValueError("techniques must be fgsm or pgd")
        return v


class ExtractionSection(_Section):
    budgets: list[int] = [250, 500, 1000, 2000, 4000]
    surrogate_model: str = "cnn-thin"
    train: TrainSection = TrainSection()
    query_batch_size: int = 64

    @field_validator("budgets")
    @classmethod
    def _ascending(cls, v):
        if not v or any(b < 1 for b in v):
            raise ValueError("budgets must be nonempty positive integers")
        if sorted(v) != v:
            raise ValueError("budgets must be sorted ascending")
        return v


class MetricsSection(_Section):
    techniques: list[str] = ["fgsm", "pgd"]
    eps_grid: list[float] = [0.01, 0.03, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3]
    attack_steps: int = 10
    surrogate_grid: Literal["max-budget", "all", "none"] = "max-budget"
    transfer_grid: bool = True

    @field_validator("eps_grid")
    @classmethod
    def _eps_range(cls, v):
        if not v:
            raise ValueError("eps_grid must be nonempty")
        if any(not 0.0 <= e <= 0.5 for e in v):
            raise ValueError("eps_grid values must lie in [0, 0.5]")
        return v


class ExperimentConfig(_Section):
    id: str = "desk-default"
    seeds: list[int] = [1, 2, 3]
    oracle: Literal["local", "http"] = "local"
    out_dir: str = "out"
    victim_model: str = "cnn-small"
    victim_data: VictimDataSection = VictimDataSection()
    pool_data: PoolDataSection = PoolDataSection()
    victim_train: TrainSection = TrainSection()
    adv_training: AdvTrainingSection = AdvTrainingSection()
    extraction: ExtractionSection = ExtractionSection()
    metrics: MetricsSection = MetricsSection()

    @field_validator("seeds")
    @classmethod
    def _nonempty(cls, v):
        if not v:
            raise ValueError("seeds must be nonempty")
        return v

    def victim_specs(self) -> list[tuple[str, str | None, float | None]]:
        """(victim_id, technique, epsilon) triples; the natural victim first."""
        victims: list[tuple[str, str | None, float | None]] = [("natural", None, None)]
        for tech in self.adv_training.techniques:
            for eps in self.adv_training.epsilons:
                victims.append((f"adv-{tech}-{eps:g}", tech, eps))
        return victims


def load_config(path) -> ExperimentConfig:
    with open(path) as f:
        raw = yaml.safe_load(f)
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    return validate_config(raw)


def validate_config(raw: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        paths = "; ".join(
            ".".join(str(p) for p in err["loc"]) + ": " + err["msg"] for err in e.errors()
        )
        raise ConfigError(paths) from None


def default_config() -> ExperimentConfig:
    return ExperimentConfig()


def stable_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def derive_seed(*parts) -> int:
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**31)


def build_datasets(config: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Victim training set, heldout test set, adversary pool.

    Training and heldout data share class templates but use disjoint noise
    seeds; the pool comes from different templates entirely, so the
    adversary queries with out-of-distribution images.
    """
    vd = config.victim_data
    victim_synth = dict(num_classes=vd.num_classes, side=vd.side, noise=vd.noise,
                        style=vd.style, patch_size=vd.patch_size,
                        patch_contrast=vd.patch_contrast, template_seed=vd.template_seed)
    train_set = synth_generate(
        SynthConfig(per_class=vd.train_per_class, seed=vd.train_seed, **victim_synth),
        name="victim-train", role=ROLE_VICTIM_TRAIN)
    heldout = synth_generate(
        SynthConfig(per_class=vd.test_per_class, seed=vd.test_seed, **victim_synth),
        name="heldout", role=ROLE_HELDOUT_TEST)
    pd_ = config.pool_data
    pool = synth_generate(
        SynthConfig(num_classes=pd_.num_classes, per_class=pd_.samples // pd_.num_classes,
                    side=vd.side, seed=pd_.seed, template_seed=pd_.template_seed,
                    noise=pd_.noise, style=pd_.style),
        name="adversary-pool", role=ROLE_ADVERSARY_POOL)
    return train_set, heldout, pool


class _StageCache:
    """Per-seed manifest of completed stages keyed by config-slice hash."""

    def __init__(self, path: Path):
        self.path = path
        self.stages: dict[str, dict] = {}
        if path.exists():
            try:
                self.stages = json.loads(path.read_text()).get("stages", {})
            except (json.JSONDecodeError, OSError):
                self.stages = {}
        self.hits = 0
        self.runs = 0

    def matches(self, key: str, digest: str) -> bool:
        entry = self.stages.get(key)
        return bool(entry and entry.get("hash") == digest and entry.get("status") == "done")

    def mark(self, key: str, digest: str, status: str = "done", **extra) -> None:
        self.stages[key] = {"hash": digest, "status": status, **extra}
        self.flush()

    def flush(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps({"stages": self.stages}, indent=2, sort_keys=True))


@contextmanager
def _stage(cache: _StageCache, key: str, digest: str):
    try:
        yield
        cache.runs += 1
        cache.mark(key, digest, status="done")
    except Exception as e:
        cache.mark(key, digest, status="failed", error=str(e))
        raise


def _cfg_dump(model: BaseModel) -> dict:
    return json.loads(model.model_dump_json())


@dataclass
class SeedResult:
    victims: list[VictimRecord]
    reports: list[ExtractionReport]
    stages_run: int
    stages_cached: int


def run_seed(config: ExperimentConfig, seed: int, out_root: Path,
             datasets=None) -> SeedResult:
    """All work for one seed: victims, metrics, extraction cells."""
    train_set, heldout, pool = datasets if datasets is not None else build_datasets(config)
    seed_dir = out_root / f"seed-{seed}"
    ckpt_dir = seed_dir / "checkpoints"
    metrics_dir = seed_dir / "metrics"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    metrics_dir.mkdir(parents=True, exist_ok=True)
    cache = _StageCache(seed_dir / "manifest.json")

    vd = config.victim_data
    input_shape = (1, vd.side, vd.side)
    victim_spec = model_family(config.victim_model, input_shape, vd.num_classes)
    surrogate_spec = model_family(config.extraction.surrogate_model, input_shape, vd.num_classes)
    train_cfg = config.victim_train.to_train_config(seed)
    mcfg = config.metrics

    base_slice = {
        "data": _cfg_dump(vd),
        "model": config.victim_model,
        "train": _cfg_dump(config.victim_train),
        "seed": seed,
    }

    # Victim models, the natural one first so hardened runs can reuse it.
    victims: dict[str, Model] = {}
    natural_digest = stable_hash(base_slice)
    natural_path = ckpt_dir / "victim-natural.xlab"
    if cache.matches("victim-natural", natural_digest) and natural_path.exists():
        victims["natural"] = load_checkpoint(natural_path)
        cache.hits += 1
    else:
        with _stage(cache, "victim-natural", natural_digest):
            logger.info("seed %d: training natural victim", seed)
            model, _ = train(build_model(victim_spec, seed), train_set, train_cfg)
            model.metadata.update({"victim_type": "natural", "train_seed": seed,
                                   "dataset": train_set.name,
                                   "train_epochs": train_cfg.max_epochs})
            save_checkpoint(model, natural_path)
            victims["natural"] = model

    for victim_id, tech, eps in config.victim_specs():
        if tech is None:
            continue
        digest = stable_hash({**base_slice, "technique": tech, "epsilon": eps,
                              "attack": _cfg_dump(config.adv_training.attack)})
        path = ckpt_dir / f"victim-{victim_id}.xlab"
        if cache.matches(f"victim-{victim_id}", digest) and path.exists():
            victims[victim_id] = load_checkpoint(path)
            cache.hits += 1
            continue
        with _stage(cache, f"victim-{victim_id}", digest):
            logger.info("seed %d: adversarial training %s", seed, victim_id)
            atk = AttackConfig(technique=tech, epsilon=eps,
                               steps=config.adv_training.attack.steps,
                               step_size=config.adv_training.attack.step_size)
            model, _ = adversarial_train(victim_spec, train_set, AdvTrainConfig(attack=atk),
                                         train_cfg, natural_model=victims["natural"])
            save_checkpoint(model, path)
            victims[victim_id] = model

    # Adversarial test sets crafted against each victim, built on demand and
    # shared between the victim's own grid and the surrogates' transfer grid.
    crafted: dict[tuple[str, str, float], LabeledDataset] = {}

    def victim_adv_set(victim_id: str, tech: str, eps: float) -> LabeledDataset:
        key = (victim_id, tech, float(eps))
        if key not in crafted:
            cfg = AttackConfig(technique=tech, epsilon=float(eps), steps=mcfg.attack_steps)
            crafted[key] = craft_adversarial_set(victims[victim_id], heldout, cfg)
        return crafted[key]

    def grid_for(model: Model, source_victim: str | None) -> dict:
        """source_victim None: craft against the model itself."""
        grid = {}
        for tech in mcfg.techniques:
            for eps in mcfg.eps_grid:
                eps = float(eps)
                if eps == 0.0:
                    grid[(tech, eps)] = evaluate_accuracy(model, heldout)
                elif source_victim is None:
                    cfg = AttackConfig(technique=tech, epsilon=eps, steps=mcfg.attack_steps)
                    grid[(tech, eps)] = evaluate_accuracy(
                        model, craft_adversarial_set(model, heldout, cfg))
                else:
                    grid[(tech, eps)] = evaluate_accuracy(
                        model, victim_adv_set(source_victim, tech, eps))
        return grid

    victim_records: list[VictimRecord] = []
    metrics_slice = {"metrics": _cfg_dump(mcfg), "heldout": _cfg_dump(vd)}
    for victim_id, tech, eps in config.victim_specs():
        digest = stable_hash({**base_slice, **metrics_slice, "victim": victim_id,
                              "technique": tech, "epsilon": eps})
        cache_path = metrics_dir / f"victim-{victim_id}.json"
        if cache.matches(f"metrics-{victim_id}", digest) and cache_path.exists():
            record = _victim_record_from_cache(cache_path)
            cache.hits += 1
        else:
            with _stage(cache, f"metrics-{victim_id}", digest):
                logger.info("seed %d: victim metrics %s", seed, victim_id)
                started = time.perf_counter()
                grid = grid_for(victims[victim_id], source_victim=victim_id)
                record = VictimRecord(
                    victim_id=victim_id,
                    victim_type=victim_type_for(tech, eps),
                    technique=tech,
                    epsilon=eps,
                    seed=seed,
                    clean_accuracy=evaluate_accuracy(victims[victim_id], heldout),
                    adv_grid=grid,
                    checkpoint=str(ckpt_dir / f"victim-{victim_id}.xlab"),
                    timing=time.perf_counter() - started,
                )
                _victim_record_to_cache(cache_path, record)
        victim_records.append(record)

    # The victim's own white-box adversarial sets feed the surrogates'
    # transfer grids, so keep them crafted before extraction begins. Victim
    # heldout labels are evaluated once per victim, not once per budget cell.
    import numpy as np

    from .models import predict_label

    heldout_labels = np.asarray(heldout.labels)
    victim_labels: dict[str, np.ndarray] = {}
    reports: list[ExtractionReport] = []
    max_budget = max(config.extraction.budgets)
    for victim_id, tech, eps in config.victim_specs():
        oracle_ctx = _oracle_for(config, victims[victim_id], victim_id)
        with oracle_ctx as oracle:
            for budget in config.extraction.budgets:
                wants_grid = mcfg.surrogate_grid == "all" or (
                    mcfg.surrogate_grid == "max-budget" and budget == max_budget)
                digest = stable_hash({
                    **base_slice, "victim": victim_id, "budget": budget,
                    "surrogate": config.extraction.surrogate_model,
                    "surrogate_train": _cfg_dump(config.extraction.train),
                    "pool": _cfg_dump(config.pool_data),
                    "grid": _cfg_dump(mcfg) if wants_grid else None,
                })
                key = f"extract-{victim_id}-b{budget}"
                cell_path = metrics_dir / f"{key}.json"
                surrogate_path = ckpt_dir / f"surrogate-{victim_id}-b{budget}.xlab"
                if cache.matches(key, digest) and cell_path.exists():
                    reports.append(_report_from_cache(cell_path))
                    cache.hits += 1
                    continue
                with _stage(cache, key, digest):
                    logger.info("seed %d: extracting %s at budget %d", seed, victim_id, budget)
                    ext_cfg = ExtractionConfig(
                        budget=budget,
                        surrogate_spec=surrogate_spec,
                        surrogate_train=config.extraction.train.to_train_config(seed),
                        seed=seed,
                        query_batch_size=config.extraction.query_batch_size,
                    )
                    surrogate, report = extract(
                        oracle, pool, ext_cfg,
                        victim_info={"victim_id": victim_id,
                                     "victim_type": victim_type_for(tech, eps),
                                     "technique": tech, "epsilon": eps})
                    if victim_id not in victim_labels:
                        victim_labels[victim_id] = np.asarray(
                            predict_label(victims[victim_id], heldout.inputs))
                    surrogate_labels = np.asarray(predict_label(surrogate, heldout.inputs))
                    report.test_accuracy = float((surrogate_labels == heldout_labels).mean())
                    report.agreement = float(
                        (surrogate_labels == victim_labels[victim_id]).mean())
                    if wants_grid:
                        report.adv_grid = grid_for(surrogate, source_victim=None)
                        if mcfg.transfer_grid:
                            report.transfer_grid = grid_for(surrogate, source_victim=victim_id)
                    save_checkpoint(surrogate, surrogate_path)
                    _report_to_cache(cell_path, report)
                    reports.append(report)

    return SeedResult(victims=victim_records, reports=reports,
                      stages_run=cache.runs, stages_cached=cache.hits)


def _oracle_for(config: ExperimentConfig, model: Model, victim_id: str):
    if config.oracle == "local":
        @contextmanager
        def local():
            yield LocalOracle(model, name=f"local:{victim_id}")
        return local()
    from .testing import spawned_service  # deferred: pulls in uvicorn

    @contextmanager
    def remote():
        from .client import RemoteOracle
        with spawned_service(model, max_batch=config.extraction.query_batch_size) as url:
            oracle = RemoteOracle(url)
            try:
                yield oracle
            finally:
                oracle.close()
    return remote()


def _grid_cache(grid):
    if grid is None:
        return None
    return [[tech, eps, value] for (tech, eps), value in sorted(grid.items())]


def _grid_uncache(rows):
    if rows is None:
        return None
    return {(tech, float(eps)): value for tech, eps, value in rows}


def _victim_record_to_cache(path: Path, record: VictimRecord) -> None:
    d = asdict(record)
    d["adv_grid"] = _grid_cache(record.adv_grid)
    path.write_text(json.dumps(d, sort_keys=True))


def _victim_record_from_cache(path: Path) -> VictimRecord:
    d = json.loads(path.read_text())
    d["adv_grid"] = _grid_uncache(d.get("adv_grid")) or {}
    return VictimRecord(**d)


def _report_to_cache(path: Path, report: ExtractionReport) -> None:
    d = asdict(report)
    d["adv_grid"] = _grid_cache(report.adv_grid)
    d["transfer_grid"] = _grid_cache(report.transfer_grid)
    path.write_text(json.dumps(d, sort_keys=True))


def _report_from_cache(path: Path) -> ExtractionReport:
    d = json.loads(path.read_text())
    d["adv_grid"] = _grid_uncache(d.get("adv_grid"))
    d["transfer_grid"] = _grid_uncache(d.get("transfer_grid"))
    return ExtractionReport(**d)


@dataclass
class ExperimentResult:
    out_dir: str
    csv_path: str
    json_path: str
    victims: list[VictimRecord]
    reports: list[ExtractionReport]
    stages_run: int
    stages_cached: int
    elapsed: float


def _run_seed_job(config_json: str, seed: int, out_root: str) -> SeedResult:
    config = validate_config(json.loads(config_json))
    return run_seed(config, seed, Path(out_root))


def run_experiment(config: ExperimentConfig, out_dir: str | None = None,
                   workers: int = 1) -> ExperimentResult:
    """Execute every (victim, budget, seed) cell and write the report files.

    Seeds are independent; with workers > 1 they run in parallel processes.
    Reports are identical either way: rows are merged in sorted order.
    """
    started = time.perf_counter()
    out_root = Path(out_dir or config.out_dir) / config.id
    out_root.mkdir(parents=True, exist_ok=True)

    manifest_path = out_root / "manifest.json"
    config_dict = _cfg_dump(config)
    manifest = {"config_hash": stable_hash(config_dict), "seeds": config.seeds,
                "status": "running"}
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))

    results: list[SeedResult] = []
    try:
        if workers > 1 and len(config.seeds) > 1:
            import multiprocessing as mp
            ctx = mp.get_context("spawn")
            with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
                futures = [pool.submit(_run_seed_job, json.dumps(config_dict), s, str(out_root))
                           for s in config.seeds]
                results = [f.result() for f in futures]
        else:
            datasets = build_datasets(config)
            for s in config.seeds:
                results.append(run_seed(config, s, out_root, datasets=datasets))
    except Exception:
        manifest["status"] = "failed"
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        raise

    victims = [v for r in results for v in r.victims]
    reports = [x for r in results for x in r.reports]
    csv_path = out_root / "reports.csv"
    json_path = out_root / "reports.json"
    write_reports_csv(csv_path, reports, config.metrics.techniques,
                      [float(e) for e in config.metrics.eps_grid])
    write_reports_json(json_path, experiment_id=config.id, config=config_dict,
                       victims=victims, reports=reports)
    manifest["status"] = "done"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))

    return ExperimentResult(
        out_dir=str(out_root),
        csv_path=str(csv_path),
        json_path=str(json_path),
        victims=victims,
        reports=reports,
        stages_run=sum(r.stages_run for r in results),
        stages_cached=sum(r.stages_cached for r in results),
        elapsed=time.perf_counter() - started,
    )


@dataclass
class TrendCheck:
    name: str
    passed: bool
    measured: float
    threshold: float
    detail: str


@dataclass
class TrendVerdict:
    checks: list[TrendCheck]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


def _grid_value(grid, tech: str, eps: float) -> float:
    for (t, e), v in grid.items():
        if t == tech and abs(e - eps) < 1e-9:
            return v
    raise ExperimentError(f"metrics grid has no ({tech}, {eps}) cell")


def run_trends(config: ExperimentConfig, out_dir: str | None = None,
               min_seeds: int = 3) -> TrendVerdict:
    """Evaluate the four mandatory findings on a completed experiment.

    T1  agreement is non-decreasing in budget per victim (2-point slack)
    T2  hardened victims extract at least as well as the natural one at the
        smallest budget
    T3  surrogates of hardened victims inherit adversarial robustness
    T4  hardening itself works: +20 points of adversarial accuracy
    """
    out_root = Path(out_dir or config.out_dir) / config.id
    json_path = out_root / "reports.json"
    if not json_path.exists():
        raise ExperimentError(f"no experiment outputs at {json_path}; run the experiment first")
    _, victims, reports = load_reports_json(json_path)
    seeds = sorted({r.seed for r in reports})
    if len(seeds) < min_seeds:
        raise ExperimentError(f"insufficient seeds: need >= {min_seeds}, found {len(seeds)}")

    budgets = sorted({r.budget for r in reports})
    smallest, largest = budgets[0], budgets[-1]
    checks: list[TrendCheck] = []

    # T1: per victim, median agreement across seeds must not drop more than
    # 2 points between consecutive budgets.
    worst_step = float("inf")
    worst_detail = ""
    for victim_key in sorted({(r.victim_type, r.technique, r.epsilon) for r in reports},
                             key=lambda k: (k[0], k[1] or "", k[2] or 0.0)):
        curve = []
        for b in budgets:
            vals = [r.agreement for r in reports
                    if (r.victim_type, r.technique, r.epsilon) == victim_key and r.budget == b]
            if vals:
                curve.append(median(vals))
        for i in range(1, len(curve)):
            step = curve[i] - curve[i - 1]
            if step < worst_step:
                worst_step = step
                worst_detail = f"{victim_key[0]} eps={victim_key[2]}: {curve[i-1]:.3f} -> {curve[i]:.3f}"
    checks.append(TrendCheck(
        name="T1-agreement-monotone-in-budget",
        passed=worst_step >= -0.02,
        measured=worst_step,
        threshold=-0.02,
        detail=f"worst consecutive-budget step {worst_step:.4f} ({worst_detail})",
    ))

    # T2: pooled median agreement of hardened victims at the smallest budget
    # must reach the natural victim's.
    nat_small = [r.agreement for r in reports
                 if r.victim_type == "natural" and r.budget == smallest]
    adv_small = [r.agreement for r in reports
                 if r.victim_type != "natural" and r.budget == smallest]
    if not nat_small or not adv_small:
        raise ExperimentError("T2 needs natural and hardened reports at the smallest budget")
    gain = median(adv_small) / median(nat_small)
    checks.append(TrendCheck(
        name="T2-hardened-extract-at-least-as-fast",
        passed=gain >= 1.0,
        measured=gain,
        threshold=1.0,
        detail=f"agreement gain at budget {smallest}: {gain:.3f} "
               f"(hardened {median(adv_small):.3f} vs natural {median(nat_small):.3f})",
    ))

    # T3: surrogates from hardened victims are more robust at eps=0.1 than
    # surrogates from the natural victim (white-box grid, iterated attack).
    nat_rob = [_grid_value(r.adv_grid, "pgd", 0.1) for r in reports
               if r.victim_type == "natural" and r.budget == largest and r.adv_grid]
    adv_rob = [_grid_value(r.adv_grid, "pgd", 0.1) for r in reports
               if r.victim_type != "natural" and r.budget == largest and r.adv_grid]
    if not nat_rob or not adv_rob:
        raise ExperimentError("T3 needs surrogate adversarial grids at the largest budget")
    checks.append(TrendCheck(
        name="T3-robustness-transfers-to-surrogates",
        passed=median(adv_rob) > median(nat_rob),
        measured=median(adv_rob) - median(nat_rob),
        threshold=0.0,
        detail=f"surrogate pgd@0.1 accuracy: hardened {median(adv_rob):.3f} "
               f"vs natural {median(nat_rob):.3f}",
    ))

    # T4: the hardened victim itself gains >= 20 points at eps=0.1.
    nat_victim = [_grid_value(v.adv_grid, "pgd", 0.1) for v in victims
                  if v.victim_type == "natural"]
    pgd_victim = [_grid_value(v.adv_grid, "pgd", 0.1) for v in victims
                  if v.technique == "pgd" and v.epsilon is not None
                  and abs(v.epsilon - 0.1) < 1e-9]
    if not nat_victim or not pgd_victim:
        raise ExperimentError("T4 needs natural and pgd-eps-0.1 victim grids")
    lift = median(pgd_victim) - median(nat_victim)
    checks.append(TrendCheck(
        name="T4-hardening-raises-victim-robustness",
        passed=lift >= 0.20,
        measured=lift,
        threshold=0.20,
        detail=f"victim pgd@0.1 accuracy lift {lift:.3f} "
               f"(hardened {median(pgd_victim):.3f} vs natural {median(nat_victim):.3f})",
    ))

    return TrendVerdict(checks=checks)
