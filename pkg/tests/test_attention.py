import csv

import numpy as np
import pytest

from lambdakws import attention as A
from lambdakws import tensor as T
from lambdakws.errors import ConfigurationError, DimensionError
from gradcheck import check
from oracles import attention_loop


@pytest.mark.parametrize("seed", range(10))
def test_single_head_matches_loop(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(6, 4))
    wq, wk, wv = rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
    y = A.attend(T.Tensor(x), T.Tensor(wq), T.Tensor(wk), T.Tensor(wv)).data
    assert np.max(np.abs(y - attention_loop(x, wq, wk, wv))) < 1e-10


@pytest.mark.parametrize("seed", range(5))
def test_multi_head_matches_loop(seed):
    rng = np.random.default_rng(seed)
    cfg = A.AttentionConfig(n=5, d=6, h=3, d_k=2, d_v=2)
    p = A.AttentionParams.init(cfg, rng)
    x = rng.normal(size=(5, 6))
    heads = [attention_loop(x, p.wq[i].data, p.wk[i].data, p.wv[i].data) for i in range(3)]
    ref = np.concatenate(heads, axis=1) @ p.wa.data
    assert np.max(np.abs(A.multi_head_attend(T.Tensor(x), p).data - ref)) < 1e-10


def test_attention_weights_rows_sum_to_one():
    rng = np.random.default_rng(0)
    a = A.attention_weights(T.Tensor(rng.normal(size=(7, 4))), T.Tensor(rng.normal(size=(4, 2))),
                            T.Tensor(rng.normal(size=(4, 2)))).data
    np.testing.assert_allclose(a.sum(axis=1), 1.0)


def test_permutation_equivariance():
    rng = np.random.default_rng(1)
    cfg = A.AttentionConfig(n=6, d=4, h=2, d_k=3, d_v=2)
    p = A.AttentionParams.init(cfg, rng)
    x = rng.normal(size=(6, 4))
    perm = rng.permutation(6)
    y = A.multi_head_attend(T.Tensor(x), p).data
    np.testing.assert_allclose(A.multi_head_attend(T.Tensor(x[perm]), p).data, y[perm], atol=1e-12)


def test_gradients():
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        cfg = A.AttentionConfig(n=4, d=4, h=2, d_k=2, d_v=2)
        p = A.AttentionParams.init(cfg, rng)
        arrays = [rng.normal(size=(4, 4))] + [t.data.copy() for t in p.tensors()]

        def fn(x, *ws):
            h = cfg.h
            q = A.AttentionParams(list(ws[:h]), list(ws[h : 2 * h]), list(ws[2 * h : 3 * h]), ws[3 * h])
            return A.multi_head_attend(x, q)

        worst = max(worst, check(fn, arrays, seed))
    assert worst < 1e-4


def test_config_errors():
    with pytest.raises(ConfigurationError):
        A.AttentionConfig(n=4, d=6, h=4, d_k=2, d_v=2)
    with pytest.raises(DimensionError):
        A.attend(T.Tensor(np.ones(3)), T.Tensor(np.ones((3, 2))), T.Tensor(np.ones((3, 2))), T.Tensor(np.ones((3, 2))))


def test_benchmark_edge_cases(tmp_path):
    assert A.scaling_benchmark("attention", [8, 16, 32, 64], reps=0).points == []
    with pytest.raises(ConfigurationError):
        A.scaling_benchmark("attention", [8, 16], reps=1)
    with pytest.raises(ConfigurationError):
        A.scaling_benchmark("mlp", [8, 16, 32, 64], reps=1)
    rep = A.scaling_benchmark("lambda_conv", [8, 16, 32, 64], reps=2, d=16, warmup=1)
    assert [p.n for p in rep.points] == [8, 16, 32, 64]
    rep.to_csv(tmp_path / "s.csv")
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0] == ["n", "mean_ns", "stderr_ns", "peak_bytes"] and len(rows) == 5


def test_attention_memory_grows_faster_than_lambda():
    att = A.scaling_benchmark("attention", [32, 64, 128, 256], reps=2, d=16, warmup=1)
    lam = A.scaling_benchmark("lambda_conv", [32, 64, 128, 256], reps=2, d=16, warmup=1)
    assert att.memory_slope > 1.5
    assert lam.memory_slope < 1.3
