import csv
import os

import numpy as np
import pytest

from dataio.sources import Dataset, synth_dataset
from model.backbone import build_model
from model.checkpoint import load_checkpoint, save_checkpoint
from model.config import get_preset
from tests.conftest import perturb
from training.optim import OptimConfig
from training.trainer import DUMP_NAME, CSV_HEADER, EpochMetrics, Trainer, evaluate, train, write_metrics_csv


def _small(n=16, seed=0):
    return synth_dataset(10, n, seed=seed)


def _params(model):
    return {n: p.data.copy() for n, p in model.named_parameters()}


def test_zero_init_loss_is_log_classes():
    model = build_model(get_preset("micro"), seed=0)
    top1, loss = evaluate(model, _small())
    assert loss == pytest.approx(np.log(10), abs=1e-5)
    assert 0.0 <= top1 <= 1.0


def test_evaluate_ties_pick_lowest_class():
    model = build_model(get_preset("micro"), seed=0)
    ds = Dataset(np.zeros((4, 3, 32, 32), dtype=np.float32), [0, 0, 1, 2])
    top1, _ = evaluate(model, ds)
    assert top1 == 0.5


def test_deterministic_runs_are_bit_identical():
    ds = _small(24)
    cfg = OptimConfig(batch_size=8, epochs=1, warmup_epochs=0)
    results = []
    for _ in range(2):
        model = build_model(get_preset("micro"), seed=2)
        train(model, ds, cfg, seed=5, deterministic=True, threads=4)
        results.append(_params(model))
    assert all(np.array_equal(results[0][n], results[1][n]) for n in results[0])
    fresh = _params(build_model(get_preset("micro"), seed=2))
    assert any(not np.array_equal(fresh[n], results[0][n]) for n in fresh)


def test_sharded_gradients_match_single_thread():
    cfg64 = get_preset("micro").with_overrides(dtype="f64")
    ds = _small(8)
    x, y = ds.batch(np.arange(8))
    grads = []
    for workers in (1, 2):
        model = perturb(build_model(cfg64, seed=1))
        trainer = Trainer(model, OptimConfig(label_smoothing=0.1), threads=workers)
        loss, g, _ = trainer._sharded(x, y, seeds=(0,))
        grads.append((loss, g))
    (l1, g1), (l2, g2) = grads
    assert l1 == pytest.approx(l2, rel=1e-12)
    assert set(g1) == set(g2)
    for name in g1:
        np.testing.assert_allclose(g1[name], g2[name], atol=1e-12, err_msg=name)


def test_fit_records_metrics_and_normalizer(tmp_path):
    logs = []
    model = build_model(get_preset("micro"), seed=0)
    trainer = Trainer(model, OptimConfig(batch_size=8, epochs=2, warmup_epochs=1), logs.append)
    metrics = trainer.fit(_small(16), _small(8, seed=9))
    assert [(m.epoch, m.split) for m in metrics] == [(1, "train"), (1, "test"), (2, "train"), (2, "test")]
    assert model.norm is not None and len(model.norm["mean"]) == 3
    assert trainer.optimizer.state.step == 4
    assert any(line.startswith("[训练]") for line in logs)
    assert any(line.startswith("[评估]") for line in logs)

    path = tmp_path / "m.csv"
    write_metrics_csv(metrics, str(path))
    rows = list(csv.reader(path.read_text(encoding="utf-8").splitlines()))
    assert tuple(rows[0]) == CSV_HEADER
    assert len(rows) == 5


def test_stop_event_ends_fit_early():
    class Stopped:
        def is_set(self):
            return True

    model = build_model(get_preset("micro"), seed=0)
    trainer = Trainer(model, OptimConfig(batch_size=8, epochs=3), stop_event=Stopped())
    assert trainer.fit(_small(16)) == []
    assert trainer.optimizer.state.step == 0


def test_divergence_dumps_checkpoint(tmp_path):
    model = build_model(get_preset("micro"), seed=0)
    trainer = Trainer(model, OptimConfig(batch_size=8, epochs=1), dump_dir=str(tmp_path))
    bad = _small(8)
    bad.images[0, 0, 0, 0] = np.inf
    with pytest.raises(RuntimeError, match="发散"):
        trainer.fit(bad)
    assert os.path.exists(tmp_path / DUMP_NAME)
    assert load_checkpoint(str(tmp_path / DUMP_NAME)).cfg == model.cfg


def test_resume_restores_optimizer(tmp_path):
    ds = _small(16)
    cfg = OptimConfig(batch_size=8, epochs=2, warmup_epochs=0)
    model = build_model(get_preset("micro"), seed=0)
    trainer = Trainer(model, cfg)
    trainer.fit(ds, epochs=1)
    path = tmp_path / "half.vheat"
    save_checkpoint(model, str(path), trainer.optimizer.state)

    resumed = load_checkpoint(str(path))
    t2 = Trainer(resumed, cfg)
    metrics = t2.fit(ds, epochs=2, resume=True)
    assert [m.epoch for m in metrics] == [2]
    assert t2.optimizer.state.step == 4


def test_epoch_metrics_row():
    assert EpochMetrics(3, "test", 0.5, 0.25).row() == [3, "test", "0.500000", "0.250000"]


@pytest.mark.slow
def test_overfits_tiny_batch():
    ds = _small(32, seed=4)
    model = build_model(get_preset("micro"), seed=0)
    cfg = OptimConfig(lr=2e-3, batch_size=32, epochs=300, warmup_epochs=10, weight_decay=0.0,
                      label_smoothing=0.0)
    trainer = Trainer(model, cfg)
    trainer.fit(ds)
    assert trainer.last_loss < 0.01


@pytest.mark.slow
def test_learns_synthetic_classes():
    train_ds = synth_dataset(10, 2048, seed=0)
    test_ds = synth_dataset(10, 512, seed=10_000)
    model = build_model(get_preset("micro"), seed=0)
    _, metrics = train(model, train_ds, OptimConfig(batch_size=64, epochs=5), test=test_ds, threads=2)
    assert metrics[-1].split == "test"
    assert metrics[-1].top1 >= 0.95
