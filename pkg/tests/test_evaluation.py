import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dualstudent.extraction import Box, ExtractionConfig, fd_gradient, train_dfme_fd, train_dual_students
from dualstudent.evaluation import (Evaluator, FdEstimator, MetricsRow, class_distribution,
                                    fidelity_distances, grad_fidelity, histogram_stats, queries_to_accuracy)
from dualstudent.ndgrad import ContractError
from dualstudent.nets import clone, init_mlp
from dualstudent.oracle import Oracle

DIM, C = 4, 3


def xs(n=32, seed=0):
    return np.random.default_rng(seed).uniform(size=(n, DIM))


@pytest.mark.parametrize("loss", ["l1", "kl", "ce", "multi_margin"])
def test_whitebox_limit_is_zero(loss):
    t, s1 = init_mlp([DIM, 8, C], seed=0), init_mlp([DIM, 8, C], seed=1)
    rep = grad_fidelity(t, (s1, clone(t)), xs(), loss)
    assert len(rep.distances) + rep.n_excluded == 32
    assert np.all(rep.distances == 0.0)


@given(st.integers(0, 10_000), st.sampled_from(["l1", "kl"]))
def test_gradient_normalized_distances_in_range(seed, loss):
    t, s1, s2 = (init_mlp([DIM, 8, C], seed=seed + i) for i in range(3))
    rep = grad_fidelity(t, (s1, s2), xs(16, seed), loss)
    assert np.all((rep.distances >= 0) & (rep.distances <= 2 + 1e-12))


def test_quadratic_closed_form():
    a = np.diag([1.0, 2.0, 3.0, 4.0])
    x = xs(20)

    def loss(v):
        return 0.5 * np.einsum("bi,ij,bj->b", v, a, v)

    g_true = x @ a
    g_est = fd_gradient(loss, x, 1e-3, 1, np.random.default_rng(5))
    rep = fidelity_distances(g_true, g_est)
    cos = np.abs(np.sum(g_true * g_est, axis=1)) / np.linalg.norm(g_true, axis=1) / np.linalg.norm(g_est, axis=1)
    assert np.allclose(rep.distances, np.sqrt(2 - 2 * cos), atol=1e-6)


@pytest.mark.parametrize("normalize", ["gradient", "loss"])
def test_scale_invariance(normalize):
    t, s1, s2 = (init_mlp([DIM, 8, C], seed=i) for i in range(3))
    a = grad_fidelity(t, (s1, s2), xs(), normalize=normalize).distances
    b = grad_fidelity(t, (s1, s2), xs(), normalize=normalize, scale=3.7).distances
    assert np.allclose(a, b, rtol=1e-10, atol=1e-12)


def test_gradient_normalization_is_rotation_only():
    g = np.array([[3.0, 4.0], [1.0, 0.0]])
    rep = fidelity_distances(g, 10 * g)
    assert np.allclose(rep.distances, 0)
    assert np.allclose(fidelity_distances(g, -g).distances, 2)


def test_loss_normalization():
    g = np.array([[3.0, 4.0]])
    rep = fidelity_distances(g, g, "loss", np.array([2.0]), np.array([1.0]))
    # |g/2 - g/1| = |g| / 2
    assert math.isclose(rep.distances[0], 2.5)


def test_zero_gradients_are_excluded_and_counted():
    g_true = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
    g_est = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 0.0]])
    rep = fidelity_distances(g_true, g_est)
    assert rep.n_excluded == 2 and rep.distances.tolist() == [0.0]
    with pytest.raises(ValueError):
        fidelity_distances(g_true, g_est, "max")


def test_fd_estimator_approaches_whitebox_with_many_directions():
    t, s1 = init_mlp([DIM, 8, C], seed=0), init_mlp([DIM, 8, C], seed=1)
    few = grad_fidelity(t, FdEstimator(s1, 1e-4, 1, np.random.default_rng(0)), xs()).median
    many = grad_fidelity(t, FdEstimator(s1, 1e-4, 400, np.random.default_rng(0)), xs()).median
    assert many < few and many < 0.3


def test_histogram_stats():
    d = histogram_stats(np.array([0, 0, 1, 2]), 4)
    assert d.histogram.tolist() == [0.5, 0.25, 0.25, 0.0]
    assert (d.max_share, d.min_share) == (0.5, 0.0)
    assert math.isclose(d.tv_from_uniform, 0.25)
    assert histogram_stats(np.arange(8) % 4, 4).tv_from_uniform == 0.0
    assert math.isclose(histogram_stats(np.zeros(5, int), 4).tv_from_uniform, 0.75)


def test_class_distribution_recount_and_free():
    t = init_mlp([DIM, 8, C], seed=0)
    gen = init_mlp([2, 8, DIM], seed=1, head="bounded")
    o = Oracle.from_mlp(t, budget=0)
    d = class_distribution(gen, o, 500, np.random.default_rng(3))
    z = np.random.default_rng(3).uniform(0, 1, size=(500, 2))
    labels = np.argmax(t.predict(gen.predict(z)), axis=1)
    assert np.allclose(d.histogram, np.bincount(labels, minlength=C) / 500)
    assert o.ledger.total_samples == 0


def row(q, acc):
    return MetricsRow(0, q, acc, acc, acc, 0.1, 0.2, [0.5, 0.5], 0.0)


def test_queries_to_accuracy():
    hist = [row(0, 0.1), row(100, 0.6), row(200, 0.8), row(300, 0.7)]
    assert queries_to_accuracy(hist, [0.5, 0.75, 0.9]) == [(0.5, 100), (0.75, 200), (0.9, None)]
    with pytest.raises(ContractError):
        queries_to_accuracy([row(100, 0.1), row(50, 0.2)], [0.5])
    with pytest.raises(ContractError):
        queries_to_accuracy([], [0.5])


def test_metrics_row_record_round_trip():
    r = MetricsRow(3, 1280, 0.5, 0.25, 0.75, math.nan, 0.125, [0.1, 0.2, 0.7], 0.3)
    header = MetricsRow.header(3)
    assert header[:7] == ["epoch", "queries", "agreement_s1", "agreement_s2", "agreement_ensemble",
                          "grad_fidelity_ds", "grad_fidelity_fd"]
    assert header[7:] == ["class_hist_0", "class_hist_1", "class_hist_2", "tv_from_uniform"]
    back = MetricsRow.from_record(dict(zip(header, map(str, r.values()))))
    assert back.values()[:5] == r.values()[:5] and math.isnan(back.grad_fidelity_ds)
    assert back.class_histogram == r.class_histogram


def small(**kw):
    base = dict(batch=16, latent_dim=4, student_hidden=(8,), generator_hidden=(8,), query_budget=800,
                eval_fraction=0.25)
    base.update(kw)
    return ExtractionConfig(**base)


def test_evaluator_rows_during_ds_run():
    t = init_mlp([DIM, 8, C], seed=0)
    o = Oracle.from_mlp(t)
    ev = Evaluator(t, o, xs(100), n_generated=200, n_grad=16)
    res = train_dual_students(small(), o, Box.unit(DIM), monitor=ev)
    rows = res.metrics_history
    assert rows[0].queries == 0 and rows[-1].queries == o.ledger.total_samples
    assert [r.queries for r in rows] == sorted(r.queries for r in rows)
    for r in rows:
        assert 0 <= r.agreement_ensemble <= 1
        assert 0 <= r.grad_fidelity_ds <= 2 and 0 <= r.grad_fidelity_fd <= 2
        assert math.isclose(sum(r.class_histogram), 1.0)
    assert o.ledger.total_samples <= 800


def test_evaluator_fd_run_has_no_pair_estimate():
    t = init_mlp([DIM, 8, C], seed=0)
    o = Oracle.from_mlp(t)
    res = train_dfme_fd(small(method="dfme_fd"), o, Box.unit(DIM), monitor=Evaluator(t, o, xs(50), n_generated=100,
                                                                                       n_grad=8))
    r = res.metrics_history[-1]
    assert math.isnan(r.agreement_s2) and math.isnan(r.grad_fidelity_ds)
    assert r.agreement_ensemble == r.agreement_s1
