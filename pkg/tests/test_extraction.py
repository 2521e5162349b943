"""Extraction: transfer sets, budget accounting, surrogate training."""

import numpy as np
import pytest

from xlab.data import ROLE_ADVERSARY_POOL, ROLE_HELDOUT_TEST, SynthConfig, synth_generate
from xlab.errors import BudgetExhaustedError, ExperimentError
from xlab.extraction import (ExtractionConfig, LocalOracle, TransferSet,
                             build_transferset, extract, load_transferset,
                             save_transferset, train_surrogate)
from xlab.models import build_model, model_family, predict_proba
from xlab.tensor import Tensor, cross_entropy, log_softmax
from xlab.training import TrainConfig


@pytest.fixture(scope="module")
def pool():
    return synth_generate(SynthConfig(num_classes=4, per_class=50, side=4, seed=3,
                                      template_seed=21, noise=0.3),
                          name="pool", role=ROLE_ADVERSARY_POOL)


@pytest.fixture(scope="module")
def victim():
    return build_model(model_family("cnn-small", (1, 4, 4), 4), seed=1)


def test_transferset_contract(victim, pool):
    ts = build_transferset(LocalOracle(victim), pool, budget=100, seed=5)
    assert len(ts) == 100
    assert ts.soft_labels.shape == (100, 4)
    assert np.all(np.abs(ts.soft_labels.sum(axis=1) - 1.0) < 1e-5)
    assert ts.provenance["budget"] == 100
    assert ts.provenance["pool"] == "pool"


def test_transferset_deterministic(victim, pool):
    a = build_transferset(LocalOracle(victim), pool, budget=60, seed=9)
    b = build_transferset(LocalOracle(victim), pool, budget=60, seed=9)
    assert np.array_equal(a.inputs, b.inputs)
    assert np.array_equal(a.soft_labels, b.soft_labels)
    c = build_transferset(LocalOracle(victim), pool, budget=60, seed=10)
    assert not np.array_equal(a.inputs, c.inputs)


def test_budget_exceeds_pool(victim, pool):
    with pytest.raises(ExperimentError, match="exceeds pool"):
        build_transferset(LocalOracle(victim), pool, budget=len(pool) + 1, seed=1)


def test_budget_zero_rejected(victim, pool):
    with pytest.raises(ExperimentError, match="budget"):
        build_transferset(LocalOracle(victim), pool, budget=0, seed=1)
    spec = model_family("mlp-wide", (1, 4, 4), 4)
    with pytest.raises(ExperimentError, match="budget"):
        ExtractionConfig(budget=0, surrogate_spec=spec, surrogate_train=TrainConfig(seed=0))


def test_soft_labels_exactly_oracle_outputs(victim, pool):
    oracle = LocalOracle(victim)
    ts = build_transferset(oracle, pool, budget=32, seed=2)
    direct = predict_proba(victim, ts.inputs)
    assert np.array_equal(ts.soft_labels, direct)


def test_query_accounting(victim, pool):
    oracle = LocalOracle(victim, budget=100)
    ts = build_transferset(oracle, pool, budget=100, seed=1, batch_size=17)
    assert oracle.queries_used == len(ts) == 100
    assert oracle.budget_remaining == 0


def test_oracle_budget_exhaustion_fails_loudly(victim, pool):
    oracle = LocalOracle(victim, budget=50)
    with pytest.raises(BudgetExhaustedError):
        build_transferset(oracle, pool, budget=80, seed=1, batch_size=16)
    # rejected batch consumed nothing beyond the served ones
    assert oracle.queries_used == 48


def test_pool_labels_discarded(victim, pool):
    ts = build_transferset(LocalOracle(victim), pool, budget=20, seed=4)
    assert not hasattr(ts, "labels")
    assert set(ts.provenance) == {"oracle", "pool", "seed", "budget"}


def test_one_hot_transferset_matches_hard_training_loss(victim, pool):
    # when soft labels are one-hot, the first-batch loss equals hard-label
    # cross entropy on those labels
    ts = build_transferset(LocalOracle(victim), pool, budget=16, seed=6)
    hard = np.eye(4, dtype=np.float32)[ts.soft_labels.argmax(axis=1)]
    onehot_ts = TransferSet(inputs=ts.inputs, soft_labels=hard, provenance={})
    spec = model_family("mlp-wide", (1, 4, 4), 4)
    surrogate = build_model(spec, seed=0)
    logits = surrogate.forward(Tensor(onehot_ts.inputs))
    soft_loss = cross_entropy(log_softmax(logits), onehot_ts.soft_labels).item()
    labels = hard.argmax(axis=1)
    lp = log_softmax(surrogate.forward(Tensor(onehot_ts.inputs))).data
    hard_loss = -np.mean([lp[i, labels[i]] for i in range(len(labels))])
    assert soft_loss == pytest.approx(hard_loss, rel=1e-6)


def test_train_surrogate_deterministic(victim, pool):
    spec = model_family("mlp-wide", (1, 4, 4), 4)
    cfg = ExtractionConfig(budget=64, surrogate_spec=spec,
                           surrogate_train=TrainConfig(max_epochs=3, seed=8), seed=8)
    ts = build_transferset(LocalOracle(victim), pool, budget=64, seed=8)
    a = train_surrogate(cfg, ts)
    b = train_surrogate(cfg, ts)
    for name in a.params:
        assert np.array_equal(a.params[name].data, b.params[name].data)


def test_extract_reports_metrics(victim, pool):
    heldout = synth_generate(SynthConfig(num_classes=4, per_class=10, side=4, seed=7,
                                         template_seed=21, noise=0.3),
                             name="held", role=ROLE_HELDOUT_TEST)
    spec = model_family("mlp-wide", (1, 4, 4), 4)
    cfg = ExtractionConfig(budget=50, surrogate_spec=spec,
                           surrogate_train=TrainConfig(max_epochs=2, seed=3), seed=3)
    surrogate, report = extract(LocalOracle(victim), pool, cfg,
                                heldout=heldout, victim=victim)
    assert report.budget == report.queries_used == 50
    assert 0.0 <= report.test_accuracy <= 1.0
    assert 0.0 <= report.agreement <= 1.0
    assert report.victim_type == "natural"
    assert report.timing is not None and report.timing > 0
    assert surrogate.metadata["surrogate"] is True


def test_transferset_roundtrip(tmp_path, victim, pool):
    ts = build_transferset(LocalOracle(victim), pool, budget=24, seed=11)
    path = tmp_path / "transfer.xlab"
    save_transferset(ts, path)
    loaded = load_transferset(path)
    assert np.array_equal(loaded.inputs, ts.inputs)
    assert np.array_equal(loaded.soft_labels, ts.soft_labels)
    assert loaded.provenance == {k: ts.provenance[k] for k in loaded.provenance}


def test_transferset_file_kind_checked(tmp_path, victim):
    from xlab.errors import CheckpointError
    from xlab.models import save_checkpoint
    path = tmp_path / "model.xlab"
    save_checkpoint(victim, path)
    with pytest.raises(CheckpointError, match="transferset"):
        load_transferset(path)


def test_local_oracle_thread_safety(victim, pool):
    import threading
    oracle = LocalOracle(victim, budget=100)
    served = []
    def worker():
        while True:
            try:
                out = oracle.query(pool.inputs[:7])
                served.append(len(out))
            except BudgetExhaustedError:
                return
    threads = [threading.Thread(target=worker) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sum(served) <= 100
    assert oracle.queries_used == sum(served)
