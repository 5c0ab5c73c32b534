import json
import math

import numpy as np
import pytest

from lambdakws import model as M
from lambdakws import tensor as T
from lambdakws import train as TR
from lambdakws.checkpoint import load
from lambdakws.dataset import build_manifest
from lambdakws.errors import ConfigurationError, NumericError

TINY = dict(stem_channels=4, stage_channels=(4, 8, 8, 8), blocks_per_stage=1, d_k=4, heads=2, r=5)


def _param(values, grad):
    t = T.Tensor(np.array(values, dtype=float), requires_grad=True)
    t.grad = np.array(grad, dtype=float)
    return t


def test_plain_sgd():
    p = {"w": _param([0.0], [1.0])}
    TR.sgd_step(p, {}, lr=1.0, momentum=0.0, weight_decay=0.0)
    np.testing.assert_array_equal(p["w"].data, [-1.0])


def test_momentum_recurrence():
    p = {"w": _param([0.0], [2.0])}
    v = {}
    TR.sgd_step(p, v, lr=0.1, momentum=0.9, weight_decay=0.0)
    TR.sgd_step(p, v, lr=0.1, momentum=0.9, weight_decay=0.0)
    np.testing.assert_allclose(v["w"], 1.9 * 2.0)


def test_weight_decay_is_geometric():
    p = {"w": _param([3.0], [0.0])}
    for _ in range(5):
        p["w"].grad = np.zeros(1)
        TR.sgd_step(p, {}, lr=0.5, momentum=0.0, weight_decay=1e-3)
    np.testing.assert_allclose(p["w"].data, 3.0 * (1 - 0.5e-3) ** 5)


def test_zero_lr_changes_nothing():
    p = {"w": _param([1.0, 2.0], [5.0, -3.0])}
    TR.sgd_step(p, {}, lr=0.0)
    np.testing.assert_array_equal(p["w"].data, [1.0, 2.0])


def test_non_finite_gradient_names_parameter():
    p = {"a": _param([1.0], [1.0]), "layer.w": _param([1.0], [np.nan])}
    with pytest.raises(NumericError, match="layer.w"):
        TR.sgd_step(p, {}, lr=0.1)
    assert p["a"].data[0] == 1.0


def test_cosine_schedule():
    assert TR.cosine_lr(0, 200) == pytest.approx(0.1)
    assert TR.cosine_lr(199, 200) == pytest.approx(0.01)
    assert TR.cosine_lr(50, 101) == pytest.approx(0.055)
    lrs = [TR.cosine_lr(e, 30) for e in range(30)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TR.TrainConfig(batch_size=0)
    with pytest.raises(ConfigurationError):
        TR.TrainConfig(momentum=1.0)
    c = TR.TrainConfig()
    assert (c.lr0, c.momentum, c.weight_decay, c.max_epochs) == (0.1, 0.9, 1e-3, 200)


def _check_monotone(roc):
    assert np.all(np.diff(roc.thresholds) > 0)
    assert np.all(np.diff(roc.far) <= 0)
    assert np.all(np.diff(roc.frr) >= 0)
    assert (roc.far[0], roc.frr[0]) == (1.0, 0.0)
    assert (roc.far[-1], roc.frr[-1]) == (0.0, 1.0) and roc.thresholds[-1] == np.inf


def test_roc_perfect_classifier():
    labels = np.repeat([0, 1, 2], 10)
    scores = np.full((30, 3), 0.05)
    scores[np.arange(30), labels] = 0.9
    rep = TR.report_from_scores(scores, labels, 3)
    assert rep.accuracy == 1.0
    _check_monotone(rep.roc)
    corner = (rep.roc.far == 0) & (rep.roc.frr == 0)
    assert corner.any()
    assert rep.roc.auc == pytest.approx(1.0)
    np.testing.assert_array_equal(rep.confusion.sum(axis=1), [10, 10, 10])


def test_roc_random_scores_is_diagonal():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 4, 1000)
    scores = rng.dirichlet(np.ones(4), size=1000)
    roc = TR.roc_curve(scores, labels)
    _check_monotone(roc)
    assert abs(roc.auc - 0.5) < 0.05


def test_roc_ties_collapse_to_one_point():
    roc = TR.roc_curve(np.full((4, 2), 0.5), [0, 1, 0, 1])
    assert len(roc.thresholds) == 2


def test_roc_csv(tmp_path):
    roc = TR.roc_curve(np.eye(3), [0, 1, 2])
    roc.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "threshold,far,frr" and lines[-1] == "inf,0.0,1.0"


@pytest.fixture(scope="module")
def yesno(small_corpus):
    return build_manifest(small_corpus, ("yes", "no"))


def _config(**kw):
    base = dict(batch_size=8, max_epochs=3, lr0=0.05, augment=False, patience=5)
    base.update(kw)
    return TR.TrainConfig(**base)


def test_train_outputs(yesno, tmp_path):
    spec = M.ModelSpec(**TINY, num_classes=2)
    res = TR.train(_config(), yesno, tmp_path, spec=spec)
    lines = [json.loads(s) for s in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in lines] == [0, 1, 2]
    assert set(lines[0]) >= {"epoch", "lr", "train_loss", "val_loss", "val_acc"}
    assert (tmp_path / "best.ckpt").exists() and (tmp_path / "roc.csv").exists()
    finite = [r["val_loss"] for r in lines if r["val_loss"] is not None]
    if finite:
        assert res.best.metadata["val_loss"] <= finite[-1] + 1e-12
    best = load(tmp_path / "best.ckpt")
    assert best.metadata["epoch"] == res.best_epoch
    assert res.test.confusion.sum() == len(res.test.labels)


def test_first_epoch_loss_is_deterministic(yesno):
    spec = M.ModelSpec(**TINY, num_classes=2)
    a = TR.train(_config(max_epochs=1, augment=True, seed=5), yesno, spec=spec, evaluate_test=False)
    b = TR.train(_config(max_epochs=1, augment=True, seed=5), yesno, spec=spec, evaluate_test=False)
    assert a.metrics[0]["train_loss"] == b.metrics[0]["train_loss"]


def test_non_finite_loss_aborts_and_keeps_checkpoint(yesno, tmp_path, monkeypatch):
    spec = M.ModelSpec(**TINY, num_classes=2)
    real = T.cross_entropy
    calls = {"n": 0}

    def flaky(logits, labels):
        calls["n"] += 1
        out = real(logits, labels)
        if calls["n"] > 12:
            out.data = np.array(np.nan)
        return out

    monkeypatch.setattr(T, "cross_entropy", flaky)
    with pytest.raises(NumericError, match="best.ckpt"):
        TR.train(_config(max_epochs=5), yesno, tmp_path, spec=spec)
    assert load(tmp_path / "best.ckpt").metadata["epoch"] >= 0


def test_evaluate_rejects_class_mismatch(yesno):
    mp = M.build(M.ModelSpec(**TINY, num_classes=3))
    with pytest.raises(ConfigurationError):
        TR.evaluate(mp, yesno)


def test_early_stopping(yesno):
    spec = M.ModelSpec(**TINY, num_classes=2)
    res = TR.train(_config(max_epochs=30, patience=1, lr0=1e-9), yesno, spec=spec, evaluate_test=False)
    assert len(res.metrics) < 30
