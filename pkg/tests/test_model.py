import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmfl import model
from cmfl.dataset import Partition, SampleSet, generate_synthetic
from cmfl.errors import ConfigError, DomainError

from oracles import central_difference, gradient_descent_oracle, softmax_loss_oracle


def _data(n=12, c=3, d=4, seed=0):
    rng = np.random.default_rng(seed)
    return SampleSet(np.arange(n), rng.normal(size=(n, d)), rng.integers(0, c, n))


def test_zero_params_binary_single_sample():
    spec = model.LossSpec(0.0, 2, 3)
    s = SampleSet([0], [[1.0, -2.0, 0.5]], [1])
    assert model.loss(spec.zeros(), s, spec) == pytest.approx(math.log(2), abs=1e-15)


@pytest.mark.parametrize("c", [2, 3, 7, 10])
def test_zero_params_uniform_softmax(c):
    spec = model.LossSpec(0.3, c, 4)
    assert model.loss(spec.zeros(), _data(c=c), spec) == pytest.approx(math.log(c), abs=1e-14)


def test_regularizer_adds_half_coefficient_times_norm():
    s = _data()
    p = np.random.default_rng(1).normal(size=model.LossSpec(0, 3, 4).dim)
    plain = model.loss(p, s, model.LossSpec(0.0, 3, 4))
    assert model.loss(p, s, model.LossSpec(0.1, 3, 4)) == pytest.approx(plain + 0.05 * p @ p, rel=1e-14)


def test_loss_matches_loop_oracle():
    s = _data(n=6)
    spec = model.LossSpec(0.2, 3, 4)
    p = np.random.default_rng(2).normal(size=spec.dim)
    assert model.loss(p, s, spec) == pytest.approx(softmax_loss_oracle(p, s.features, s.labels, 3, 0.2), rel=1e-12)


def test_loss_is_stable_for_large_logits():
    spec = model.LossSpec(0.0, 3, 4)
    p = np.full(spec.dim, 300.0)
    assert math.isfinite(model.loss(p, _data(), spec))


@given(seed=st.integers(0, 2**31 - 1), reg=st.sampled_from([0.0, 0.01, 0.5]))
@settings(max_examples=40, deadline=None)
def test_gradient_matches_finite_differences(seed, reg):
    rng = np.random.default_rng(seed)
    spec = model.LossSpec(reg, 3, 4)
    batch = _data(n=5, seed=seed)
    p = rng.normal(size=spec.dim)
    g = model.grad_minibatch(p, batch, spec)
    fd = central_difference(lambda q: model.loss(q, batch, spec), p)
    assert np.max(np.abs(g - fd)) < 1e-5


def test_gradient_vanishes_at_single_sample_optimum():
    # with a single sample the minimizer only exists once the penalty is on
    spec = model.LossSpec(0.1, 3, 2)
    s = SampleSet([0], [[1.0, -1.0]], [2])
    w = gradient_descent_oracle(lambda p: model.grad_minibatch(p, s, spec), spec.zeros(), 0.5, 4000)
    assert np.linalg.norm(model.grad_minibatch(w, s, spec)) < 1e-6


def test_full_batch_gradient_is_grad_full():
    s = _data()
    spec = model.LossSpec(0.05, 3, 4)
    p = np.random.default_rng(3).normal(size=spec.dim)
    assert np.array_equal(model.grad_minibatch(p, s, spec), model.grad_full(p, Partition(0, s), spec))


def test_gradient_is_linear_in_regularizer():
    s = _data()
    p = np.random.default_rng(4).normal(size=model.LossSpec(0, 3, 4).dim)
    diff = model.grad_full(p, s, model.LossSpec(0.7, 3, 4)) - model.grad_full(p, s, model.LossSpec(0.0, 3, 4))
    # the penalty covers biases as well as weights
    assert np.allclose(diff, 0.7 * p, atol=1e-14)


def test_empty_inputs_raise():
    spec = model.LossSpec(0.1, 3, 4)
    empty = SampleSet(np.zeros(0), np.zeros((0, 4)), np.zeros(0))
    for fn in (model.loss, model.grad_minibatch, model.grad_full, model.accuracy):
        with pytest.raises(DomainError):
            fn(spec.zeros(), empty, spec)


def test_wrong_parameter_shape():
    spec = model.LossSpec(0.1, 3, 4)
    with pytest.raises(DomainError):
        model.loss(np.zeros(3), _data(), spec)


@given(seed=st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_strong_convexity_witness(seed):
    rng = np.random.default_rng(seed)
    spec = model.LossSpec(0.3, 3, 4)
    s = _data(seed=seed)
    w, v = rng.normal(size=(2, spec.dim)) * 2
    lhs = model.loss(v, s, spec)
    rhs = model.loss(w, s, spec) + (v - w) @ model.grad_full(w, s, spec) + 0.15 * (v - w) @ (v - w)
    assert lhs >= rhs - 1e-10


@given(seed=st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_smoothness_bound_dominates_secants(seed):
    rng = np.random.default_rng(seed)
    spec = model.LossSpec(0.05, 3, 4)
    s = _data(seed=seed)
    L = model.smoothness_bound(s, spec.reg_coeff)
    w, v = rng.normal(size=(2, spec.dim)) * 3
    slope = np.linalg.norm(model.grad_full(v, s, spec) - model.grad_full(w, s, spec)) / np.linalg.norm(v - w)
    assert slope <= L + 1e-12


def test_smoothness_bound_without_data_is_regularizer():
    empty = SampleSet(np.zeros(0), np.zeros((0, 2)), np.zeros(0))
    assert model.smoothness_bound(empty, 0.25) == 0.25


def test_minibatch_variance_matches_enumeration():
    s = _data(n=6)
    spec = model.LossSpec(0.1, 3, 4)
    p = np.random.default_rng(5).normal(size=spec.dim)
    full = model.grad_full(p, s, spec)
    for b in (1, 2, 3, 6):
        devs = [np.sum((model.grad_minibatch(p, s.subset(list(idx)), spec) - full) ** 2)
                for idx in itertools.combinations(range(6), b)]
        assert model.minibatch_variance(p, s, b, spec) == pytest.approx(np.mean(devs), rel=1e-10, abs=1e-15)


def test_spread_closed_form_matches_per_sample_gradients():
    s = _data(n=7)
    spec = model.LossSpec(0.1, 3, 4)
    p = np.random.default_rng(6).normal(size=spec.dim)
    full = model.grad_full(p, s, spec)
    per = [model.grad_minibatch(p, s.subset([i]), spec) for i in range(7)]
    gsq, spread = model.sample_gradient_spread(p, s, spec)
    assert gsq == pytest.approx(full @ full, rel=1e-12)
    assert spread == pytest.approx(np.mean([np.sum((g - full) ** 2) for g in per]), rel=1e-10)


def test_theorem_decay_schedule():
    sch = model.TheoremDecay(mu=0.1, L=2.0)
    assert sch.gamma == pytest.approx(80.0)
    assert sch.rate(1) == pytest.approx(1 / (0.1 * 81))
    rates = [sch.rate(t) for t in range(1, 50)]
    assert all(a >= b > 0 for a, b in zip(rates, rates[1:]))
    with pytest.raises(ConfigError):
        model.TheoremDecay(mu=0.0, L=1.0)


def test_one_full_batch_step_is_gradient_descent():
    s = _data(n=8)
    spec = model.LossSpec(0.1, 3, 4)
    p = np.random.default_rng(7).normal(size=spec.dim)
    final, _ = model.local_sgd(p, Partition(0, s), 1, 8, model.Constant(0.3), 1, np.random.default_rng(0), spec)
    assert np.allclose(final, p - 0.3 * model.grad_full(p, s, spec), atol=1e-15)


def test_zero_learning_rate_is_identity():
    s = _data(n=8)
    spec = model.LossSpec(0.1, 3, 4)
    p = np.random.default_rng(8).normal(size=spec.dim)
    final, up = model.local_sgd(p, s, 3, 8, model.Constant(0.0), 1, np.random.default_rng(0), spec)
    assert np.array_equal(final, p)
    assert np.allclose(up, model.grad_full(p, s, spec), atol=1e-15)


def test_pseudo_gradient_upload():
    s = _data(n=8)
    spec = model.LossSpec(0.1, 3, 4)
    p = np.zeros(spec.dim)
    final, up = model.local_sgd(p, s, 4, 3, model.Constant(0.2), 1, np.random.default_rng(1), spec,
                                upload_mode=model.PSEUDO_GRADIENT)
    assert np.allclose(up, (p - final) / 0.2)
    with pytest.raises(ConfigError):
        model.local_sgd(p, s, 1, 3, model.Constant(0.0), 1, np.random.default_rng(1), spec,
                        upload_mode=model.PSEUDO_GRADIENT)


def test_local_sgd_decreases_loss_with_theorem_schedule():
    s = generate_synthetic(3, 4, 20, 2.0, seed=0)
    spec = model.LossSpec(0.1, 3, 4)
    sched = model.TheoremDecay(0.1, model.smoothness_bound(s, 0.1))
    start = np.random.default_rng(0).normal(size=spec.dim)
    wins = 0
    for trial in range(100):
        final, _ = model.local_sgd(start, s, 5, 8, sched, 1, np.random.default_rng(trial), spec)
        wins += model.loss(final, s, spec) <= model.loss(start, s, spec)
    assert wins >= 95


def test_local_sgd_validation():
    s = _data(n=4)
    spec = model.LossSpec(0.1, 3, 4)
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigError):
        model.local_sgd(spec.zeros(), s, 1, 5, model.Constant(0.1), 1, rng, spec)
    with pytest.raises(ConfigError):
        model.local_sgd(spec.zeros(), s, 0, 2, model.Constant(0.1), 1, rng, spec)
    with pytest.raises(DomainError):
        model.local_sgd(spec.zeros(), s, 3, 2, model.Constant(1e308), 1, rng, spec)


def test_batches_come_without_replacement():
    s = _data(n=5)
    batch = model._draw_batch(s, 5, np.random.default_rng(3))
    assert sorted(batch.ids.tolist()) == list(range(5))
