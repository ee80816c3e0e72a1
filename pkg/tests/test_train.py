"""Optimizer, metrics, the training loop, and its CSV output."""

import numpy as np
import pytest

from eaanet.backbone import build_model, plain_resnet18
from eaanet.data import synthetic_dataset
from eaanet.errors import DivergedError
from eaanet.tensor import Tensor, tape
from eaanet.train import (METRICS_HEADER, TrainConfig, evaluate, schedule_lr,
                          sgd_step, topk_accuracy, train, write_metrics_csv)


@pytest.fixture(autouse=True)
def _clean_tape():
    tape().clear()
    yield
    tape().clear()


class TestSgdStep:
    def test_matches_manual_momentum_update(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True, dtype=np.float64)
        p.grad = np.array([0.5, -0.5])
        state = {}
        sgd_step([("p", p)], state, lr=0.1, momentum=0.9, weight_decay=0.0)
        assert np.allclose(p.data, [1.0 - 0.05, 2.0 + 0.05])
        p.grad = np.array([0.5, -0.5])
        sgd_step([("p", p)], state, lr=0.1, momentum=0.9, weight_decay=0.0)
        # v = 0.9*0.5 + 0.5 = 0.95
        assert np.allclose(p.data, [0.95 - 0.095, 2.05 + 0.095])

    def test_weight_decay_enters_the_velocity(self):
        p = Tensor(np.array([10.0]), requires_grad=True, dtype=np.float64)
        p.grad = np.array([0.0])
        sgd_step([("p", p)], {}, lr=0.1, momentum=0.0, weight_decay=0.1)
        assert np.allclose(p.data, [10.0 - 0.1 * 1.0])

    def test_nonfinite_gradient_raises(self):
        p = Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)
        p.grad = np.array([np.nan])
        with pytest.raises(DivergedError, match="p"):
            sgd_step([("p", p)], {}, lr=0.1)

    def test_params_without_grad_are_skipped(self):
        p = Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)
        sgd_step([("p", p)], {}, lr=0.1)
        assert p.data[0] == 1.0


class TestSchedule:
    def test_cosine_endpoints(self):
        cfg = TrainConfig(epochs=10, lr=0.4, lr_schedule="cosine")
        assert np.isclose(schedule_lr(cfg, 0), 0.4)
        assert schedule_lr(cfg, 9) < 0.02

    def test_step_drops_twice(self):
        cfg = TrainConfig(epochs=100, lr=1.0, lr_schedule="step")
        assert schedule_lr(cfg, 0) == 1.0
        assert np.isclose(schedule_lr(cfg, 60), 0.1)
        assert np.isclose(schedule_lr(cfg, 80), 0.01)


class TestTopk:
    def test_basic(self):
        logits = np.array([[0.1, 0.9, 0.0], [0.8, 0.1, 0.1]])
        assert topk_accuracy(logits, np.array([1, 0]), 1) == 100.0
        assert topk_accuracy(logits, np.array([2, 1]), 1) == 0.0
        assert topk_accuracy(logits, np.array([2, 1]), 2) == 50.0

    def test_ties_break_toward_lower_class(self):
        logits = np.zeros((1, 4))
        assert topk_accuracy(logits, np.array([0]), 1) == 100.0
        assert topk_accuracy(logits, np.array([3]), 1) == 0.0

    def test_k_larger_than_classes_rejected(self):
        with pytest.raises(ValueError):
            topk_accuracy(np.zeros((1, 3)), np.array([0]), 5)


def _tiny_model(classes=4):
    spec = plain_resnet18(classes=classes)
    return build_model(spec, 0)


def test_evaluate_is_batch_size_invariant():
    model = _tiny_model()
    ds = synthetic_dataset(30, 4, seed=0)
    a = evaluate(model, ds, batch=7)
    b = evaluate(model, ds, batch=30)
    assert a == b


def test_evaluate_empty_dataset_rejected():
    model = _tiny_model()
    ds = synthetic_dataset(10, 4, seed=0).subset(np.arange(0))
    with pytest.raises(ValueError):
        evaluate(model, ds)


def _quick_cfg(**kw):
    base = dict(epochs=2, batch_size=16, lr=0.02, seed=0, augment=False,
                timing=False, convergence_window=50)
    base.update(kw)
    return TrainConfig(**base)


def test_train_returns_one_record_per_epoch():
    model = _tiny_model()
    ds = synthetic_dataset(48, 4, seed=0)
    records = train(model, ds.subset(np.arange(32)),
                    ds.subset(np.arange(32, 48)), _quick_cfg())
    assert [r.epoch for r in records] == [0, 1]
    assert all(np.isfinite(r.train_loss) for r in records)
    assert all(r.seconds == 0.0 for r in records)
    assert all(r.peak_bytes > 0 for r in records)


def test_train_stops_on_divergence_with_partial_records():
    model = _tiny_model()
    ds = synthetic_dataset(32, 4, seed=0)
    cfg = _quick_cfg(epochs=5, lr=1e9)  # guaranteed blow-up
    records = train(model, ds.subset(np.arange(24)),
                    ds.subset(np.arange(24, 32)), cfg)
    assert len(records) < 5


def test_train_convergence_early_stop():
    model = _tiny_model()
    ds = synthetic_dataset(32, 4, seed=0)
    # a delta above 100 points always counts as a plateau, so the rule
    # fires as soon as the window fills
    cfg = _quick_cfg(epochs=10, lr=1e-12, convergence_window=3,
                     convergence_delta=200.0)
    records = train(model, ds.subset(np.arange(24)),
                    ds.subset(np.arange(24, 32)), cfg)
    assert len(records) == 3


def test_metrics_csv_format(tmp_path):
    model = _tiny_model()
    ds = synthetic_dataset(32, 4, seed=0)
    records = train(model, ds.subset(np.arange(24)),
                    ds.subset(np.arange(24, 32)), _quick_cfg(epochs=1))
    path = str(tmp_path / "metrics.csv")
    write_metrics_csv(records, path)
    lines = open(path).read().splitlines()
    assert lines[0] == METRICS_HEADER
    cells = lines[1].split(",")
    assert len(cells) == 6 and cells[0] == "0" and cells[4] == "0.000"
