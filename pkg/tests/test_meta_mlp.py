import math

import numpy as np
import pytest

from dynlsm.data_model import TaskPool, YearTask
from dynlsm.errors import DataError, InvalidInputError
from dynlsm.meta_mlp import (
    AdaptedModel,
    MetaConfig,
    MetaState,
    adapt,
    fit_standardizer,
    forward,
    init_params,
    inner_loop,
    inner_update,
    loss_and_grad,
    loss_grad_hvp,
    meta_gradient,
    meta_train,
    n_params,
    softplus,
    softplus_inv,
    unpack,
)

from conftest import make_samples, random_raw_features

TINY = (15, 4, 2)


def rel_err(a, b, floor=1e-7):
    """Largest per-parameter relative error; ``floor`` guards exact zeros."""
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def central_diff(f, x, h=1e-5):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def random_params(sizes, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return rng.normal(0, scale, n_params(sizes))


def test_zero_params_give_half():
    theta = np.zeros(n_params((15, 32, 32, 2)))
    x = np.random.default_rng(0).normal(size=(5, 15))
    np.testing.assert_array_equal(forward(theta, x), 0.5)


def test_probabilities_normalized():
    from dynlsm.meta_mlp import predict_batched

    sizes = (15, 32, 32, 2)
    p = predict_batched(random_params(sizes, 1)[None], sizes, np.random.default_rng(1).normal(size=(1, 50, 15)))
    np.testing.assert_allclose(p.sum(axis=2), 1.0, atol=1e-12)


def test_monotone_in_output_bias():
    sizes = (15, 32, 32, 2)
    theta = random_params(sizes, 2, 0.3)
    x = np.random.default_rng(2).normal(size=15)
    bias = unpack(theta[None], sizes)[-1][1]
    outs = []
    for v in np.linspace(-5, 5, 41):
        bias[0, 1] = v
        outs.append(forward(theta, x, sizes))
    assert np.all(np.diff(outs) > 0)


def test_non_finite_input_rejected():
    with pytest.raises(InvalidInputError):
        forward(np.zeros(n_params((15, 32, 32, 2))), np.full(15, np.nan))


def test_loss_limits():
    sizes = (15, 32, 32, 2)
    X = np.random.default_rng(3).normal(size=(8, 15))
    y = np.array([0, 1] * 4)
    loss, _ = loss_and_grad(np.zeros(n_params(sizes)), X, y)
    assert loss == pytest.approx(math.log(2), abs=1e-15)
    theta = np.zeros(n_params(sizes))
    bias = unpack(theta[None], sizes)[-1][1]
    bias[0, 1] = 50.0
    loss, _ = loss_and_grad(theta, X, np.ones(8, dtype=int))
    assert loss < 1e-20


@pytest.mark.parametrize("seed", range(20))
def test_gradient_matches_finite_differences(seed):
    sizes = (15, 32, 32, 2)
    rng = np.random.default_rng(seed)
    theta = random_params(sizes, seed, 0.3)
    X = rng.normal(size=(16, 15))
    y = rng.integers(0, 2, 16)
    _, g = loss_and_grad(theta, X, y, sizes)
    fd = central_diff(lambda t: loss_and_grad(t, X, y, sizes)[0], theta)
    assert rel_err(g, fd) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_hessian_vector_product(seed):
    rng = np.random.default_rng(seed)
    theta = random_params(TINY, seed, 0.5)
    X = rng.normal(size=(1, 10, 15))
    y = rng.integers(0, 2, (1, 10))
    v = rng.normal(size=(1, theta.size))
    _, _, hv = loss_grad_hvp(theta[None], TINY, X, y, v)
    h = 1e-5
    gp = loss_grad_hvp(theta[None] + h * v, TINY, X, y)[1]
    gm = loss_grad_hvp(theta[None] - h * v, TINY, X, y)[1]
    assert rel_err(hv, (gp - gm) / (2 * h)) < 1e-4


def _meta_loss_only(theta, rho, Xs, ys, Xq, yq, steps, batch):
    alpha = softplus(rho)
    thetas, _ = inner_loop(np.repeat(theta[None], Xs.shape[0], axis=0), alpha, TINY, Xs, ys, steps, batch)
    return float(loss_grad_hvp(thetas[-1], TINY, Xq, yq)[0].sum())


@pytest.mark.parametrize("seed", range(20))
def test_second_order_meta_gradient(seed):
    rng = np.random.default_rng(100 + seed)
    theta = random_params(TINY, seed, 0.5)
    rho = softplus_inv(0.3)
    Xs, ys = rng.normal(size=(3, 8, 15)), rng.integers(0, 2, (3, 8))
    Xq, yq = rng.normal(size=(3, 8, 15)), rng.integers(0, 2, (3, 8))
    loss, _, d_theta, d_rho = meta_gradient(theta, rho, TINY, Xs, ys, Xq, yq, 3, 4, np.ones(3))
    assert loss == pytest.approx(_meta_loss_only(theta, rho, Xs, ys, Xq, yq, 3, 4), rel=1e-13)
    fd = central_diff(lambda t: _meta_loss_only(t, rho, Xs, ys, Xq, yq, 3, 4), theta)
    assert rel_err(d_theta, fd) < 1e-4
    fd_rho = central_diff(lambda r: _meta_loss_only(theta, r[0], Xs, ys, Xq, yq, 3, 4), np.array([rho]))
    assert rel_err(np.array([d_rho]), fd_rho) < 1e-4


def test_first_order_drops_hessian_terms():
    rng = np.random.default_rng(9)
    theta = random_params(TINY, 9, 0.5)
    Xs, ys = rng.normal(size=(2, 8, 15)), rng.integers(0, 2, (2, 8))
    Xq, yq = rng.normal(size=(2, 8, 15)), rng.integers(0, 2, (2, 8))
    _, _, d_fo, _ = meta_gradient(theta, 0.0, TINY, Xs, ys, Xq, yq, 2, 8, np.ones(2), first_order=True)
    thetas, _ = inner_loop(np.repeat(theta[None], 2, axis=0), softplus(0.0), TINY, Xs, ys, 2, 8)
    _, gq, _ = loss_grad_hvp(thetas[-1], TINY, Xq, yq)
    np.testing.assert_allclose(d_fo, gq.sum(axis=0), rtol=1e-14)


def _state(sizes=(15, 32, 32, 2), lr=0.01):
    cfg = MetaConfig(hidden=sizes[1:-1], inner_lr=lr)
    return MetaState.initial(cfg, np.zeros(sizes[0]), np.ones(sizes[0]))


def test_inner_update_alpha_zero_is_identity(rng):
    st = _state()
    X, y = rng.normal(size=(16, 15)), rng.integers(0, 2, 16)
    np.testing.assert_array_equal(inner_update(st, X, y, steps=5, alpha=0.0), st.params)


def test_inner_update_single_step_matches_hand_update(rng):
    st = _state()
    X, y = rng.normal(size=(1, 15)), np.array([1])
    _, g = loss_and_grad(st.params, X, y)
    manual = st.params - st.inner_lr * g
    np.testing.assert_allclose(inner_update(st, X, y, steps=1), manual, rtol=0, atol=1e-12)


def test_inner_update_descends(rng):
    st = _state(lr=0.05)
    X = rng.normal(size=(16, 15))
    y = (X[:, 1] > 0).astype(int)
    before, _ = loss_and_grad(st.params, X, y)
    after, _ = loss_and_grad(inner_update(st, X, y, steps=5), X, y)
    assert after <= before


def _pool(rng, n_tasks=8, shot=8):
    tasks = []
    sid = 0
    for t in range(n_tasks):
        X = random_raw_features(rng, 2 * shot)
        y = np.array([0, 1] * shot)
        samples = make_samples(X, y, 2000, sid)
        sid += 2 * shot
        tasks.append(YearTask(2000, samples, support=tuple(range(shot)), query=tuple(range(shot, 2 * shot))))
    return TaskPool(tasks[:6], tasks[6:])


def test_zero_iterations_returns_initialization(rng):
    pool = _pool(rng)
    cfg = MetaConfig(iterations=0, seed=4)
    st = meta_train(pool, cfg)
    np.testing.assert_array_equal(st.params, init_params(cfg.sizes(), 4))
    assert st.inner_lr == pytest.approx(0.01)


def test_meta_loss_is_sum_of_query_losses(rng):
    pool = _pool(rng)
    cfg = MetaConfig(iterations=1, meta_batch=16, inner_steps=2, inner_batch=8)
    init = MetaState.initial(cfg, *fit_standardizer(np.concatenate([t.X() for t in pool.train_tasks])))
    st = meta_train(pool, cfg, state=init)
    from dynlsm.meta_mlp import _stack_tasks

    Xs, ys, Xq, yq = _stack_tasks(pool.train_tasks, init)
    _, q_loss, _, _ = meta_gradient(np.array(init.params), init.rho, init.sizes, Xs, ys, Xq, yq, 2, 8, np.ones(6))
    assert st.loss_trace[0] == pytest.approx(q_loss.mean() * 6, rel=1e-12)


def test_meta_train_deterministic(rng):
    pool = _pool(rng)
    cfg = MetaConfig(iterations=5, inner_steps=2, inner_batch=8, meta_batch=4, seed=2)
    a, b = meta_train(pool, cfg), meta_train(pool, cfg)
    assert a.loss_trace == b.loss_trace
    assert a.to_json() == b.to_json()


def test_divergence_is_reported(rng):
    from dynlsm.errors import DivergenceError

    pool = _pool(rng)
    cfg = MetaConfig(iterations=3, inner_steps=2, inner_batch=8)
    # weights large enough that the weighted meta-loss overflows
    with pytest.raises(DivergenceError), np.errstate(over="ignore", invalid="ignore"):
        meta_train(pool, cfg, weights=np.full(6, 1e308))


def test_adapt_zero_steps_and_update_count(rng):
    st = _state()
    X = random_raw_features(rng, 21)
    task = YearTask(2001, make_samples(X, [0, 1] * 10 + [1]))
    a0 = adapt(st, task, steps=0)
    np.testing.assert_array_equal(a0.params, st.params)
    a5 = adapt(st, task, steps=5, batch_size=8)
    assert a5.micro_updates == math.ceil(21 / 8) * 5
    assert a5.n_updates == 5


def test_adapt_rejects_single_class(rng):
    st = _state()
    task = YearTask(2001, make_samples(random_raw_features(rng, 4), [1, 1, 1, 1]))
    with pytest.raises(DataError):
        adapt(st, task)


def test_standardization_invariance(rng):
    X = rng.normal(size=(40, 15))
    theta = random_params((15, 32, 32, 2), 7, 0.3)
    m, s = fit_standardizer(X)
    base = forward(theta, (X - m) / s)
    X2 = X.copy()
    X2[:, 3] = X2[:, 3] * 250.0 + 1e4
    m2, s2 = fit_standardizer(X2)
    np.testing.assert_allclose(forward(theta, (X2 - m2) / s2), base, rtol=0, atol=1e-10)


def test_serialization_round_trip(rng):
    pool = _pool(rng)
    st = meta_train(pool, MetaConfig(iterations=2, inner_steps=1, inner_batch=8, meta_batch=2))
    back = MetaState.from_dict(__import__("json").loads(st.to_json()))
    assert back.to_json() == st.to_json()
    task = pool.test_tasks[0]
    ad = adapt(st, task)
    back_ad = AdaptedModel.from_dict(__import__("json").loads(ad.to_json()))
    np.testing.assert_array_equal(back_ad.predict_proba(task.X()), ad.predict_proba(task.X()))
