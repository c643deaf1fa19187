import csv
import io
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmfl import adversary, engine, model
from cmfl.dataset import FederatedDataset, IID, Partition, SampleSet, generate_synthetic, partition
from cmfl.engine import SimConfig, run
from cmfl.errors import ConfigError, RunAbort

from oracles import sq_dist

SMALL = SimConfig(K=10, T=8, tau=2, activation_percent=100, alpha_percent=40, omega_percent=20, batch_size=4,
                  eta=0.05, synthetic=True, num_classes=3, d_in=4, samples_per_class=20, partition="shard")


@pytest.fixture(scope="module")
def small_ds():
    return engine.build_dataset(SMALL)


def test_derived_sizes():
    c = SimConfig(synthetic=True)
    assert (c.n_active, c.C, c.n_train, c.m) == (10, 4, 6, 2)
    assert c.resolved_pool == engine.POOL_TRAINING
    assert (SMALL.n_active, SMALL.C, SMALL.n_train, SMALL.m) == (10, 2, 8, 3)
    assert SMALL.resolved_pool == engine.POOL_AGGREGATION
    fed = replace(SMALL, strategy=engine.FEDAVG)
    assert (fed.C, fed.n_train) == (0, 10)


def test_hand_replay_of_one_round():
    K = 4
    cfg = SimConfig(K=K, T=1, tau=2, activation_percent=100, alpha_percent=67, omega_percent=25, batch_size=3,
                    eta=0.1, synthetic=True, num_classes=2, d_in=3, samples_per_class=8, partition="iid", seed=5)
    assert (cfg.C, cfg.n_train, cfg.m) == (1, 3, 2)
    ds = engine.build_dataset(cfg)
    res = run(cfg, ds)
    assert len(res.records) == 1

    spec = cfg.loss_spec(ds)
    w0 = spec.zeros()
    committee = sorted(int(k) for k in engine.stream(5, engine._S_INIT).choice(K, 1, replace=False))
    training = sorted(set(range(K)) - set(committee))

    def up(k):
        return model.local_sgd(w0, ds.partitions[k], 2, 3, model.Constant(0.1), 1,
                               engine.stream(5, engine._S_BATCH, 1, k), spec)[1]

    g = {k: up(k) for k in training + committee}
    score = {k: 1.0 / sq_dist(g[k], g[committee[0]]) for k in training}
    top = sorted(training, key=lambda k: (-score[k], k))[:2]
    n = {k: ds.partitions[k].n_k for k in top}
    expected = w0 - 0.1 * sum(n[k] / sum(n.values()) * g[k] for k in top)

    assert np.allclose(res.final_params, expected, rtol=1e-13, atol=1e-15)
    rec = res.records[0]
    assert rec.training == training and rec.committee == committee
    assert rec.aggregation == top and rec.leader == top[0]


def _two_identical_clients():
    s = generate_synthetic(2, 3, 5, 1.5, seed=2)
    ds = FederatedDataset([Partition(0, s), Partition(1, s)], 2, 3)
    cfg = SimConfig(K=2, T=3, tau=1, activation_percent=100, batch_size=len(s), eta=0.2, strategy=engine.FEDAVG,
                    synthetic=True, reg_coeff=0.01)
    return s, ds, cfg


def test_fedavg_with_identical_clients_is_gradient_descent():
    s, ds, cfg = _two_identical_clients()
    res = run(replace(cfg, upload_mode=model.PSEUDO_GRADIENT), ds)
    spec = cfg.loss_spec(ds)
    w = spec.zeros()
    for _ in range(3):
        w = w - 0.2 * model.grad_full(w, s, spec)
    assert np.allclose(res.final_params, w, rtol=1e-12, atol=1e-15)


def test_last_batch_upload_is_taken_after_the_local_step():
    # with one full-batch local step the uploaded gradient is evaluated at w - eta * grad(w)
    s, ds, cfg = _two_identical_clients()
    res = run(cfg, ds)
    spec = cfg.loss_spec(ds)
    w = spec.zeros()
    for _ in range(3):
        w = w - 0.2 * model.grad_full(w - 0.2 * model.grad_full(w, s, spec), s, spec)
    assert np.allclose(res.final_params, w, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("strategy", engine.STRATEGIES)
def test_runs_are_byte_identical(strategy, small_ds):
    cfg = replace(SMALL, strategy=strategy, epsilon_percent=20, attack=adversary.SCALING, seed=3)
    assert run(cfg, small_ds).metrics_csv() == run(cfg, small_ds).metrics_csv()


def test_metrics_csv_layout(small_ds):
    text = run(SMALL, small_ds).metrics_csv()
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == engine.METRICS_HEADER
    assert [int(r[0]) for r in rows[1:]] == list(range(1, SMALL.T + 1))


@pytest.mark.parametrize("pool", [engine.POOL_AGGREGATION, engine.POOL_TRAINING])
@pytest.mark.parametrize("strategy", [engine.CMFL_I, engine.CMFL_II])
def test_role_lifecycle(pool, strategy, small_ds):
    cfg = replace(SMALL, strategy=strategy, election_pool=pool, epsilon_percent=30, attack=adversary.BACK_GRADIENT)
    res = run(cfg, small_ds)
    recs = res.records
    for prev, cur in zip(recs, recs[1:]):
        if pool == engine.POOL_AGGREGATION:
            assert set(cur.committee) <= set(prev.aggregation)
        else:
            assert set(cur.committee) <= set(prev.training)
    for r in recs:
        assert len(r.committee) == cfg.C
        assert not set(r.training) & set(r.committee)
        assert len(r.aggregation) == cfg.m and set(r.aggregation) <= set(r.training)
        assert r.N2 <= len(r.committee) and r.N3 <= r.N1 <= len(r.training)
        assert r.leader == r.aggregation[0]
        assert r.N1 == len(set(r.training) & res.malicious)


@given(seed=st.integers(0, 1000), strategy=st.sampled_from([engine.CMFL_I, engine.CMFL_II]),
       omega=st.sampled_from([10.0, 20.0, 30.0]), alpha=st.sampled_from([40.0, 60.0, 90.0]))
@settings(max_examples=15, deadline=None)
def test_no_attack_never_aborts(seed, strategy, omega, alpha, small_ds):
    cfg = replace(SMALL, T=3, seed=seed, strategy=strategy, omega_percent=omega, alpha_percent=alpha)
    try:
        cfg.validate()
    except ConfigError:
        return
    res = run(cfg, small_ds)
    assert len(res.records) == 3 and not res.aborted


def test_honest_uploads_do_not_depend_on_the_attack(small_ds):
    # baselines draw the same clients and batches whatever the attack; only malicious uploads change
    base = replace(SMALL, strategy=engine.FEDAVG, epsilon_percent=20, T=1)
    a = run(base, small_ds)
    b = run(replace(base, attack=adversary.BACK_GRADIENT), small_ds)
    assert a.records[0].training == b.records[0].training
    assert a.malicious == b.malicious
    spec = base.loss_spec(small_ds)
    n = small_ds.sizes.astype(float)
    # reconstruct: the difference of the two global steps is exactly twice the malicious contribution
    bad = sorted(a.malicious)
    grads = {k: model.local_sgd(spec.zeros(), small_ds.partitions[k], base.tau, base.batch_size,
                                model.Constant(base.eta), 1, engine.stream(base.seed, engine._S_BATCH, 1, k), spec)[1]
             for k in bad}
    expected = 2 * base.eta * sum(n[k] / n.sum() * grads[k] for k in bad)
    assert np.allclose(b.final_params - a.final_params, expected, atol=1e-14)


def test_same_value_attack_on_everyone_collapses(small_ds):
    # every upload is the zero vector, so every scoring pair coincides
    cfg = replace(SMALL, epsilon_percent=99, attack=adversary.SAME_VALUE)
    assert adversary.malicious_count(10, 99) == 10
    with pytest.raises(RunAbort) as err:
        run(cfg, small_ds)
    assert err.value.round_t == 1


def test_isolated_degenerate_pairs_are_tolerated(small_ds):
    cfg = replace(SMALL, epsilon_percent=30, attack=adversary.SAME_VALUE, T=5)
    assert len(run(cfg, small_ds).records) == 5


def test_baselines_use_all_activated_clients(small_ds):
    for strategy in (engine.FEDAVG, engine.MEDIAN, engine.TRIMMED_MEAN):
        rec = run(replace(SMALL, strategy=strategy, T=1), small_ds).records[0]
        assert rec.aggregation == rec.training and rec.committee == [] and rec.leader == -1
    rec = run(replace(SMALL, strategy=engine.KRUM, T=1), small_ds).records[0]
    assert len(rec.aggregation) == 1
    cfg = replace(SMALL, strategy=engine.MULTI_KRUM, T=1)
    assert len(run(cfg, small_ds).records[0].aggregation) == cfg.m


def test_lr_is_logged_and_theorem_schedule_decays(small_ds):
    res = run(replace(SMALL, lr="theorem", reg_coeff=0.1), small_ds)
    lrs = [r.lr for r in res.records]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))
    L = model.smoothness_bound(small_ds.all_samples(), 0.1)
    assert lrs[0] == pytest.approx(1 / (0.1 * (1 + 4 * L / 0.1)))


def test_validation_errors_name_the_key(small_ds):
    cases = {
        "epsilon_percent": dict(epsilon_percent=120),
        "alpha_percent": dict(alpha_percent=0),
        "strategy": dict(strategy="bulyan"),
        "omega_percent": dict(omega_percent=60, election_pool=engine.POOL_AGGREGATION),
        "dataset": dict(synthetic=False),
        "krum_f": dict(strategy=engine.KRUM, krum_f=8),
    }
    for key, kw in cases.items():
        with pytest.raises(ConfigError, match=f"^{key}:"):
            replace(SMALL, **kw).validate()
    with pytest.raises(ConfigError, match="^K:"):
        run(replace(SMALL, K=11), small_ds)
    with pytest.raises(ConfigError, match="^batch_size:"):
        run(replace(SMALL, batch_size=500), small_ds)


def test_config_from_mapping_coerces_and_rejects():
    c = engine.config_from_mapping({"K": "30", "eta": "0.5", "synthetic": "yes", "strategy": "krum"})
    assert (c.K, c.eta, c.synthetic, c.strategy) == (30, 0.5, True, "krum")
    with pytest.raises(ConfigError, match="^bogus:"):
        engine.config_from_mapping({"bogus": "1"})
    with pytest.raises(ConfigError, match="^K:"):
        engine.config_from_mapping({"K": "many"})


def test_echo_round_trip():
    cfg = replace(SMALL, eta=0.1 + 0.2, attack=adversary.SCALING, epsilon_percent=12.5)
    pairs = dict(line.split("=", 1) for line in cfg.to_text().splitlines())
    assert engine.config_from_mapping(pairs) == cfg


def test_evaluate_examples(small_ds):
    spec = SMALL.loss_spec(small_ds)
    loss, acc = engine.evaluate(spec.zeros(), small_ds, spec)
    assert loss == pytest.approx(math.log(3))
    test = small_ds.test
    _, acc0 = engine.evaluate(spec.zeros(), test, spec)
    # argmax of all-equal logits is class 0, so accuracy is its share of a balanced holdout
    assert acc0 == pytest.approx(1 / 3, abs=3 * math.sqrt(2 / 9 / len(test)))
    with pytest.raises(Exception):
        engine.evaluate(spec.zeros(), test.subset([]), spec)


def test_evaluate_perfect_fit():
    x = np.array([[5.0, 0.0], [-5.0, 0.0], [4.0, 1.0], [-4.0, -1.0]])
    y = np.array([0, 1, 0, 1])
    ds = partition(SampleSet(np.arange(4), x, y), 2, IID(), seed=0)
    spec = model.LossSpec(0.0, 2, 2)
    w = spec.zeros()
    for _ in range(200):
        w = w - 0.5 * model.grad_full(w, ds.all_samples(), spec)
    assert engine.evaluate(w, ds, spec)[1] == 1.0


def test_trajectory_and_snapshot(small_ds):
    res = run(SMALL, small_ds)
    assert len(res.trajectory) == SMALL.T + 1
    assert np.array_equal(res.trajectory[-1], res.final_params)
    snap = res.snapshot()
    assert snap["derived"]["C"] == 2 and len(snap["final_params"]) == SMALL.loss_spec(small_ds).dim


def test_sweep_examples(small_ds):
    base = replace(SMALL, T=3, attack=adversary.BACK_GRADIENT)
    one = engine.sweep(base, {"alpha": [40]}, [1], small_ds)
    assert len(one) == 1 and one[0]["mean_accuracy"] == run(replace(base, seed=1), small_ds).final_accuracy
    four = engine.sweep(replace(base, epsilon_percent=10), {"alpha": [10, 50], "omega": [10, 50]}, [0], small_ds)
    assert len(four) == 4
    assert {(r["alpha"], r["omega"]) for r in four} == {(10, 10), (10, 50), (50, 10), (50, 50)}
    # alpha=10 leaves m=1, which cannot host a committee elected from the aggregation set
    bad = engine.sweep(replace(base, election_pool=engine.POOL_AGGREGATION), {"alpha": [10]}, [0], small_ds)
    assert bad[0]["valid"] is False and math.isnan(bad[0]["mean_accuracy"])
    with pytest.raises(ConfigError):
        engine.sweep(base, {"alpha": [40]}, [], small_ds)
    assert engine.sweep_csv(four).splitlines()[0] == "alpha,omega,epsilon,mean_accuracy,n_seeds,valid,note"


def test_sweep_with_workers_matches_serial(small_ds):
    base = replace(SMALL, T=2)
    grid = {"epsilon": [0, 20]}
    assert engine.sweep(base, grid, [0, 1], small_ds, workers=2) == engine.sweep(base, grid, [0, 1], small_ds)
