import numpy as np
import pytest

from lambdakws import lambda_layer as L
from lambdakws import tensor as T
from lambdakws.errors import ConfigurationError, DimensionError
from gradcheck import check
from oracles import lambda_loop, relative_to_absolute


def _setup(seed, context="local", n=7, r=5, normalize=False, d_in=6, h=2, d_k=3, d_out=4):
    rng = np.random.default_rng(seed)
    cfg = L.LambdaConfig(d_in=d_in, d_out=d_out, h=h, d_k=d_k, r=r, context=context,
                         n=n if context == "global" else None, normalize=normalize)
    params = L.init_params(cfg, rng)
    if normalize:
        for t in (params.bnq_gamma, params.bnq_beta, params.bnv_gamma, params.bnv_beta):
            t.data = rng.normal(size=t.shape)
    x = rng.normal(size=(1, d_in, n))
    return cfg, params, x


def _bn_args(p):
    return (p.bnq_gamma.data, p.bnq_beta.data, p.bnv_gamma.data, p.bnv_beta.data)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("normalize", [False, True])
def test_local_matches_loop(seed, normalize):
    cfg, p, x = _setup(seed, "local", normalize=normalize)
    y = L.lambda_conv_forward(T.Tensor(x), p, cfg, "train").data[0]
    e_abs = relative_to_absolute(p.e.data, x.shape[2])
    ref = lambda_loop(x[0], p.wq.data, p.wk.data, p.wv.data, e_abs, cfg.h, _bn_args(p) if normalize else None)
    assert np.max(np.abs(y - ref)) < 1e-10


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("normalize", [False, True])
def test_global_matches_loop(seed, normalize):
    cfg, p, x = _setup(seed, "global", normalize=normalize)
    y = L.lambda_forward(T.Tensor(x), p, cfg, "train").data[0]
    ref = lambda_loop(x[0], p.wq.data, p.wk.data, p.wv.data, p.e.data, cfg.h, _bn_args(p) if normalize else None)
    assert np.max(np.abs(y - ref)) < 1e-10


@pytest.mark.parametrize("seed", range(10))
def test_local_equals_global_when_scope_covers_sequence(seed):
    n = 6
    cfg_l, p, x = _setup(seed, "local", n=n, r=2 * n - 1)
    cfg_g = L.LambdaConfig(d_in=cfg_l.d_in, d_out=cfg_l.d_out, h=cfg_l.h, d_k=cfg_l.d_k, context="global", n=n,
                           normalize=False)
    pg = L.LambdaParams(p.wq, p.wk, p.wv, T.Tensor(L.materialize_global_embedding(p.e.data, n)))
    yl = L.lambda_conv_forward(T.Tensor(x), p, cfg_l).data
    yg = L.lambda_forward(T.Tensor(x), pg, cfg_g).data
    assert np.max(np.abs(yl - yg)) < 1e-10


def test_materialize_matches_oracle():
    e = np.random.default_rng(0).normal(size=(5, 3))
    np.testing.assert_array_equal(L.materialize_global_embedding(e, 8), relative_to_absolute(e, 8))


def test_batched_equals_per_sequence():
    cfg, p, _ = _setup(0, "local")
    x = np.random.default_rng(1).normal(size=(3, cfg.d_in, 7))
    y = L.lambda_conv_forward(T.Tensor(x), p, cfg).data
    for b in range(3):
        np.testing.assert_allclose(L.lambda_conv_forward(T.Tensor(x[b : b + 1]), p, cfg).data[0], y[b], atol=1e-12)


def test_content_lambda_is_permutation_invariant():
    rng = np.random.default_rng(3)
    k, v = rng.normal(size=(9, 4)), rng.normal(size=(9, 3))
    perm = rng.permutation(9)
    a = L.content_lambda(T.Tensor(k), T.Tensor(v)).data
    b = L.content_lambda(T.Tensor(k[perm]), T.Tensor(v[perm])).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_content_only_layer_is_permutation_equivariant():
    cfg, p, x = _setup(4, "global")
    p.e.data = np.zeros_like(p.e.data)
    perm = np.random.default_rng(4).permutation(x.shape[2])
    y = L.lambda_forward(T.Tensor(x), p, cfg).data
    yp = L.lambda_forward(T.Tensor(x[:, :, perm]), p, cfg).data
    np.testing.assert_allclose(yp, y[:, :, perm], atol=1e-12)


def test_position_lambda_with_zero_embedding():
    out = L.position_lambda(T.Tensor(np.zeros((4, 2))), T.Tensor(np.ones((4, 3)))).data
    np.testing.assert_array_equal(out, np.zeros((2, 3)))


def test_errors():
    with pytest.raises(ConfigurationError):
        L.LambdaConfig(d_in=4, d_out=6, h=4)
    with pytest.raises(ConfigurationError):
        L.LambdaConfig(d_in=4, d_out=4, h=2, r=4)
    with pytest.raises(ConfigurationError):
        L.LambdaConfig(d_in=4, d_out=4, h=2, context="global")
    cfg, p, x = _setup(0, "local")
    with pytest.raises(DimensionError):
        L.lambda_conv_forward(T.Tensor(x[:, :3]), p, cfg)
    with pytest.raises(DimensionError):
        L.content_lambda(T.Tensor(np.ones((3, 2))), T.Tensor(np.ones((4, 2))))


@pytest.mark.parametrize("context", ["local", "global"])
def test_gradients(context):
    worst = 0.0
    for seed in range(20):
        cfg, p, x = _setup(seed, context, n=5, r=3, normalize=True)
        x = np.random.default_rng(seed).normal(size=(2, cfg.d_in, 5))
        names = list(p.named())
        arrays = [x] + [p.named()[k].data.copy() for k in names]

        def fn(xt, *ws):
            q = L.LambdaParams(**dict(zip(names, ws)), bnq_state=T.BatchNormState.fresh(cfg.h * cfg.d_k),
                               bnv_state=T.BatchNormState.fresh(cfg.d_v))
            return L.forward(xt, q, cfg, "train")

        worst = max(worst, check(fn, arrays, seed))
    assert worst < 1e-4


def test_multiply_counts_match_instrumented_pass():
    for context in ("local", "global"):
        for n in (16, 32):
            cfg, p, _ = _setup(0, context, n=n, r=5)
            with T.count_multiplies() as c:
                L.forward(T.Tensor(np.zeros((1, cfg.d_in, n))), p, cfg)
            expected = L.multiplies(cfg, n)
            assert c.prefixed("proj") == expected["proj"]
            assert c.prefixed("content") == expected["content"]
            assert c.prefixed("position") == expected["position"]


def test_position_term_is_linear_in_n_locally():
    cfg = L.LambdaConfig(d_in=64, d_out=64, h=4, d_k=16, r=23)
    counts = [L.multiplies(cfg, n)["position"] for n in (64, 128, 256, 512)]
    assert all(c == counts[0] * n // 64 for c, n in zip(counts, (64, 128, 256, 512)))
