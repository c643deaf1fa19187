"""Round-by-round simulation of committee-filtered federated training and its baselines."""

from __future__ import annotations

import csv
import io
import itertools
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import adversary, aggregation, committee, model
from .dataset import (IID, Dirichlet, FederatedDataset, LabelShard, SampleSet, generate_synthetic,
                      load_partitions, partition, train_test_split)
from .errors import ConfigError, DegenerateScore, DomainError, RunAbort

CMFL_I = "cmfl-i"
CMFL_II = "cmfl-ii"
FEDAVG = "fedavg"
MEDIAN = "median"
TRIMMED_MEAN = "trimmed-mean"
KRUM = "krum"
MULTI_KRUM = "multi-krum"
STRATEGIES = (CMFL_I, CMFL_II, FEDAVG, MEDIAN, TRIMMED_MEAN, KRUM, MULTI_KRUM)
CMFL_STRATEGIES = (CMFL_I, CMFL_II)

POOL_AUTO = "auto"
POOL_AGGREGATION = "aggregation"
POOL_TRAINING = "training"

METRICS_HEADER = ["round", "train_loss", "test_loss", "test_accuracy", "leader", "N1", "N2", "N3", "lr"]

# rng stream purposes
_S_MALICIOUS, _S_INIT, _S_ACTIVATE, _S_BATCH, _S_ATTACK = range(5)


def _pct(percent, n) -> int:
    """Round percent% of n half-up."""
    return int(math.floor(percent / 100.0 * n + 0.5))


@dataclass(frozen=True)
class SimConfig:
    K: int = 100
    T: int = 100
    tau: int = 5
    activation_percent: float = 10.0
    alpha_percent: float = 40.0
    omega_percent: float = 40.0
    epsilon_percent: float = 0.0
    batch_size: int = 16
    lr: str = "constant"
    eta: float = 0.1
    lr_mu: float = 0.0
    lr_L: float = 0.0
    strategy: str = CMFL_I
    trim_beta: float = 20.0
    krum_f: int = -1
    attack: str = adversary.NONE
    attack_scale: float = 0.5
    attack_per_element: bool = True
    attack_committee: bool = True
    upload_mode: str = model.LAST_BATCH
    election_pool: str = POOL_AUTO
    reg_coeff: float = 0.01
    seed: int = 0
    dataset: str = ""
    test_dataset: str = ""
    synthetic: bool = False
    num_classes: int = 10
    d_in: int = 10
    samples_per_class: int = 200
    class_separation: float = 3.0
    partition: str = "shard"
    shards_per_client: int = 2
    dirichlet_alpha: float = 0.5
    test_fraction: float = 0.2
    data_seed: int = 0

    # -- derived quantities -------------------------------------------------

    @property
    def is_cmfl(self) -> bool:
        return self.strategy in CMFL_STRATEGIES

    @property
    def n_active(self) -> int:
        return _pct(self.activation_percent, self.K)

    @property
    def C(self) -> int:
        return max(1, _pct(self.omega_percent, self.n_active)) if self.is_cmfl else 0

    @property
    def n_train(self) -> int:
        return self.n_active - self.C

    @property
    def m(self) -> int:
        return max(1, _pct(self.alpha_percent, self.n_train))

    @property
    def resolved_pool(self) -> str:
        if self.election_pool != POOL_AUTO:
            return self.election_pool
        return POOL_AGGREGATION if self.C < self.m else POOL_TRAINING

    @property
    def byzantine_f(self) -> int:
        if self.krum_f >= 0:
            return self.krum_f
        return int(math.ceil(self.epsilon_percent / 100.0 * self.n_train - 1e-9))

    @property
    def attack_spec(self) -> adversary.AttackSpec:
        return adversary.AttackSpec(self.attack, self.epsilon_percent, self.attack_scale,
                                    self.attack_per_element, self.attack_committee)

    def loss_spec(self, dataset: FederatedDataset) -> model.LossSpec:
        return model.LossSpec(self.reg_coeff, dataset.num_classes, dataset.d_in)

    def derived(self) -> dict:
        return {"n_active": self.n_active, "C": self.C, "n_train": self.n_train, "m": self.m,
                "election_pool": self.resolved_pool if self.is_cmfl else "",
                "krum_f": self.byzantine_f}

    def validate(self) -> "SimConfig":
        def need(ok, key, msg):
            if not ok:
                raise ConfigError(f"{key}: {msg}")

        need(self.K >= 1, "K", "must be >= 1")
        need(self.T >= 1, "T", "must be >= 1")
        need(self.tau >= 1, "tau", "must be >= 1")
        need(self.batch_size >= 1, "batch_size", "must be >= 1")
        for key in ("activation_percent", "alpha_percent", "omega_percent"):
            need(0 < getattr(self, key) <= 100, key, "must lie in (0, 100]")
        need(0 <= self.epsilon_percent < 100, "epsilon_percent", "must lie in [0, 100)")
        need(self.strategy in STRATEGIES, "strategy", f"must be one of {STRATEGIES}")
        need(self.attack in adversary.ATTACK_KINDS, "attack", f"must be one of {adversary.ATTACK_KINDS}")
        need(0 < self.attack_scale < 1, "attack_scale", "must lie in (0, 1)")
        need(self.upload_mode in model.UPLOAD_MODES, "upload_mode", f"must be one of {model.UPLOAD_MODES}")
        need(self.lr in ("constant", "theorem"), "lr", "must be 'constant' or 'theorem'")
        need(self.eta >= 0, "eta", "must be >= 0")
        need(self.lr_mu >= 0 and self.lr_L >= 0, "lr_mu", "must be >= 0")
        need(self.reg_coeff >= 0, "reg_coeff", "must be >= 0")
        need(0 <= self.trim_beta < 50, "trim_beta", "must lie in [0, 50)")
        need(self.election_pool in (POOL_AUTO, POOL_AGGREGATION, POOL_TRAINING), "election_pool",
             "must be auto, aggregation or training")
        need(self.partition in ("iid", "shard", "dirichlet"), "partition", "must be iid, shard or dirichlet")
        need(bool(self.dataset) or self.synthetic, "dataset", "a dataset path is required unless synthetic=true")
        need(self.n_active <= self.K, "activation_percent", "activates more clients than exist")
        if self.is_cmfl:
            need(self.n_active >= self.C + 1, "activation_percent",
                 f"activates {self.n_active} clients; need at least C + 1 = {self.C + 1}")
            need(self.m <= self.n_train, "alpha_percent", f"m={self.m} exceeds training clients {self.n_train}")
            if self.resolved_pool == POOL_AGGREGATION:
                need(self.C < self.m, "omega_percent",
                     f"committee size C={self.C} must be < m={self.m} when electing from the aggregation set")
            else:
                need(self.C <= self.n_train, "omega_percent",
                     f"committee size C={self.C} exceeds the training set {self.n_train}")
        else:
            need(self.n_active >= 1, "activation_percent", "activates no clients")
            if self.strategy in (KRUM, MULTI_KRUM):
                need(self.n_train >= self.byzantine_f + 3, "krum_f",
                     f"Krum needs n >= f + 3 (n={self.n_train}, f={self.byzantine_f})")
        return self

    # -- text echo ------------------------------------------------------------

    def to_text(self) -> str:
        lines = [f"{f.name}={_fmt(getattr(self, f.name))}" for f in fields(self)]
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_from_mapping(values: dict, base: SimConfig = None) -> SimConfig:
    """Build a SimConfig from string or typed values, naming the key on any error."""
    base = base or SimConfig()
    types = {f.name: f.type for f in fields(SimConfig)}
    kwargs = {}
    for key, raw in values.items():
        if key not in types:
            raise ConfigError(f"{key}: unknown configuration key")
        kwargs[key] = _coerce(key, getattr(base, key), raw)
    return replace(base, **kwargs)


def _coerce(key, default, raw):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


# -- records ------------------------------------------------------------------


@dataclass
class RoundRecord:
    round: int
    train_loss: float
    test_loss: float
    test_accuracy: float
    training: list
    committee: list
    aggregation: list
    scores: dict
    leader: int
    N1: int
    N2: int
    N3: int
    lr: float
    upload_mode: str

    def metrics_row(self) -> list:
        return [self.round, repr(self.train_loss), repr(self.test_loss), repr(self.test_accuracy),
                self.leader, self.N1, self.N2, self.N3, repr(self.lr)]


@dataclass
class RunResult:
    records: list
    final_params: np.ndarray
    config: SimConfig
    wall_time: float
    trajectory: list = field(default_factory=list)  # global model at the start of rounds 1..T+1
    malicious: frozenset = frozenset()
    aborted: str = ""

    @property
    def final_accuracy(self) -> float:
        return self.records[-1].test_accuracy if self.records else float("nan")

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in self.records:
            w.writerow(r.metrics_row())
        return buf.getvalue()

    def roles_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "role", "client"])
        for r in self.records:
            for role, ids in (("training", r.training), ("committee", r.committee),
                              ("aggregation", r.aggregation)):
                for k in ids:
                    w.writerow([r.round, role, k])
        return buf.getvalue()

    def scores_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "k", "final"])
        for r in self.records:
            for k in sorted(r.scores):
                w.writerow([r.round, k, repr(r.scores[k])])
        return buf.getvalue()

    def snapshot(self) -> dict:
        return {
            "config": self.config.to_text(),
            "derived": self.config.derived(),
            "malicious": sorted(self.malicious),
            "aborted": self.aborted,
            "initial_params": [float(v) for v in self.trajectory[0]] if self.trajectory else [],
            "final_params": [float(v) for v in self.final_params],
        }


# -- rng streams --------------------------------------------------------------


def stream(seed, purpose, *key) -> np.random.Generator:
    """Independent generator per (purpose, round, client) so streams never interact."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(purpose, *key)))


# -- dataset helpers ----------------------------------------------------------


def build_dataset(config: SimConfig) -> FederatedDataset:
    """Materialize the dataset a config refers to (synthetic or from disk)."""
    if config.dataset:
        data = load_partitions(config.dataset)
        if config.test_dataset:
            test = load_partitions(config.test_dataset)
            data.test = test.all_samples()
        return data
    samples = generate_synthetic(config.num_classes, config.d_in, config.samples_per_class,
                                 config.class_separation, config.data_seed)
    train, test = train_test_split(samples, config.test_fraction, config.data_seed + 1)
    scheme = {"iid": IID(), "shard": LabelShard(config.shards_per_client),
              "dirichlet": Dirichlet(config.dirichlet_alpha)}[config.partition]
    return partition(train, config.K, scheme, config.data_seed + 2, num_classes=config.num_classes,
                     test=test if len(test) else None)


def lr_schedule(config: SimConfig, dataset: FederatedDataset):
    if config.lr == "constant":
        return model.Constant(config.eta)
    mu = config.lr_mu or config.reg_coeff
    if mu <= 0:
        raise ConfigError("lr: theorem decay needs reg_coeff > 0 or lr_mu > 0")
    L = config.lr_L or model.smoothness_bound(dataset.all_samples(), mu)
    return model.TheoremDecay(mu, max(L, mu))


def evaluate(params, data, spec: model.LossSpec):
    """(loss, accuracy). Federated data is weighted by p_k; a plain sample set is averaged."""
    if isinstance(data, FederatedDataset):
        p = data.weights
        losses = np.array([model.loss(params, part.samples, spec) for part in data.partitions])
        accs = np.array([model.accuracy(params, part.samples, spec) for part in data.partitions])
        return float(p @ losses), float(p @ accs)
    if len(data) == 0:
        raise DomainError("evaluation set is empty")
    return model.loss(params, data, spec), model.accuracy(params, data, spec)


# -- the round loop -----------------------------------------------------------


def run(config: SimConfig, dataset: FederatedDataset, initial_params=None) -> RunResult:
    config.validate()
    if dataset.K != config.K:
        raise ConfigError(f"K: config has K={config.K} but the dataset has {dataset.K} partitions")
    small = [p.client_id for p in dataset.partitions if p.n_k < config.batch_size]
    if small:
        raise ConfigError(f"batch_size: {config.batch_size} exceeds the size of client {small[0]}")

    spec = config.loss_spec(dataset)
    schedule = lr_schedule(config, dataset)
    attack = config.attack_spec
    seed = config.seed
    sizes = dataset.sizes
    test_set = dataset.test if dataset.test is not None else dataset.all_samples()
    malicious = adversary.assign_malicious(config.K, config.epsilon_percent, stream(seed, _S_MALICIOUS))

    w = spec.zeros() if initial_params is None else np.array(initial_params, dtype=np.float64)
    committee_ids = []
    if config.is_cmfl:
        committee_ids = sorted(int(k) for k in stream(seed, _S_INIT).choice(config.K, config.C, replace=False))

    records, trajectory = [], [w.copy()]
    started = time.perf_counter()
    aborted = ""

    def upload(k, t):
        _, g = model.local_sgd(w, dataset.partitions[k], config.tau, config.batch_size, schedule, t,
                               stream(seed, _S_BATCH, t, k), spec, config.upload_mode)
        if k in malicious and attack.kind != adversary.NONE:
            g = adversary.apply_attack(g, attack, stream(seed, _S_ATTACK, t, k))
        return g

    for t in range(1, config.T + 1):
        eta = schedule.rate(t)
        try:
            if config.is_cmfl:
                pool = sorted(set(range(config.K)) - set(committee_ids))
                training = sorted(int(k) for k in
                                  stream(seed, _S_ACTIVATE, t).choice(pool, config.n_train, replace=False))
                grads = {k: upload(k, t) for k in training}
                com_grads = {}
                for c in committee_ids:
                    g = upload(c, t) if config.attack_committee else _honest_upload(
                        w, dataset, config, schedule, spec, seed, c, t)
                    com_grads[c] = g
                table = score_round_tolerant(
                    [grads[k] for k in training], [com_grads[c] for c in committee_ids], training, committee_ids, t)
                scores = table.final_by_id()
                strategy = committee.STRATEGY_I if config.strategy == CMFL_I else committee.STRATEGY_II
                agg = committee.select_aggregation(scores, strategy, config.m)
                leader = agg[0]
                wg = aggregation.WeightedGradients.from_sizes([grads[k] for k in agg], sizes[agg])
                global_grad = aggregation.fedavg(wg)
                if config.resolved_pool == POOL_AGGREGATION:
                    new_committee = committee.elect_committee(agg, config.C, strict=True)
                else:
                    new_committee = committee.elect_committee(committee.rank_by_score(scores), config.C,
                                                              strict=False)
                scoring_committee = list(committee_ids)
                committee_ids = sorted(new_committee)
            else:
                training = sorted(int(k) for k in
                                  stream(seed, _S_ACTIVATE, t).choice(config.K, config.n_active, replace=False))
                grads = [upload(k, t) for k in training]
                global_grad, used = _baseline_aggregate(config, grads, sizes[training])
                agg = [training[i] for i in used]
                leader, scores, scoring_committee = -1, {}, []

            w = w - eta * global_grad
            if not np.all(np.isfinite(w)):
                raise RunAbort(f"non-finite global model after round {t}", round_t=t)
        except DomainError as exc:
            raise RunAbort(f"round {t}: {exc}", round_t=t) from exc

        trajectory.append(w.copy())
        train_loss = evaluate(w, dataset, spec)[0]
        test_loss, test_acc = evaluate(w, test_set, spec)
        records.append(RoundRecord(
            round=t, train_loss=train_loss, test_loss=test_loss, test_accuracy=test_acc,
            training=training, committee=scoring_committee, aggregation=agg, scores=scores, leader=leader,
            N1=sum(k in malicious for k in training), N2=sum(k in malicious for k in scoring_committee),
            N3=sum(k in malicious for k in agg), lr=eta, upload_mode=config.upload_mode,
        ))

    return RunResult(records, w, config, time.perf_counter() - started, trajectory, malicious, aborted)


def _honest_upload(w, dataset, config, schedule, spec, seed, k, t):
    _, g = model.local_sgd(w, dataset.partitions[k], config.tau, config.batch_size, schedule, t,
                           stream(seed, _S_BATCH, t, k), spec, config.upload_mode)
    return g


def score_round_tolerant(training_grads, committee_grads, training_ids, committee_ids, t):
    """Score a round, tolerating isolated identical uploads.

    A coincident (training, committee) pair is scored at the degeneracy floor
    instead of aborting; only a round in which every pair coincides aborts.
    """
    try:
        return committee.score_round(training_grads, committee_grads, training_ids, committee_ids)
    except DegenerateScore:
        pass
    G_b = np.asarray(training_grads)
    G_c = np.asarray(committee_grads)
    diff = G_b[:, None, :] - G_c[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    if np.all(sq < committee.DEGENERATE_SQ_DIST):
        raise RunAbort(f"committee collapse at round {t}: every training upload equals every committee upload",
                       round_t=t)
    sq = np.maximum(sq, committee.DEGENERATE_SQ_DIST)
    final = G_c.shape[0] / np.sort(sq, axis=1).sum(axis=1)
    return committee.ScoreTable(list(training_ids), list(committee_ids), 1.0 / sq, final)


def _baseline_aggregate(config: SimConfig, grads, sizes):
    n = len(grads)
    everyone = list(range(n))
    if config.strategy == FEDAVG:
        return aggregation.fedavg(aggregation.WeightedGradients.from_sizes(grads, sizes)), everyone
    if config.strategy == MEDIAN:
        return aggregation.coordinate_median(grads), everyone
    if config.strategy == TRIMMED_MEAN:
        return aggregation.trimmed_mean(grads, config.trim_beta), everyone
    f = config.byzantine_f
    order = aggregation.krum_order(grads, f)
    if config.strategy == KRUM:
        return np.array(grads[order[0]]), [int(order[0])]
    chosen = sorted(int(i) for i in order[:config.m])
    return aggregation.multi_krum(grads, f, config.m), chosen


# -- sweeps -------------------------------------------------------------------

SWEEP_AXES = {"alpha": "alpha_percent", "omega": "omega_percent", "epsilon": "epsilon_percent"}


def _sweep_cell(args):
    config, dataset = args
    try:
        return run(config, dataset).final_accuracy, ""
    except RunAbort as exc:
        return float("nan"), f"aborted: {exc}"


def sweep(base_config: SimConfig, grid: dict, seeds, dataset: FederatedDataset, workers: int = 1) -> list:
    """Mean final test accuracy for every cell of the cartesian grid.

    ``grid`` maps any of alpha/omega/epsilon to a list of percentages. Cells whose
    derived committee sizes are inconsistent are reported with ``valid=False``.
    """
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("seeds: at least one seed is required")
    axes = [a for a in ("alpha", "omega", "epsilon") if a in grid]
    for a in axes:
        if any(not 0 <= v < 100 for v in grid[a]):
            raise ConfigError(f"{a}: grid values must lie in [0, 100)")
    cells = list(itertools.product(*[grid[a] for a in axes]))

    jobs, layout = [], []
    for cell in cells:
        cfg = replace(base_config, **{SWEEP_AXES[a]: float(v) for a, v in zip(axes, cell)})
        try:
            cfg.validate()
        except ConfigError as exc:
            layout.append((cell, None, str(exc)))
            continue
        idx = []
        for s in seeds:
            idx.append(len(jobs))
            jobs.append((replace(cfg, seed=s), dataset))
        layout.append((cell, idx, ""))

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            outcomes = list(ex.map(_sweep_cell, jobs))
    else:
        outcomes = [_sweep_cell(j) for j in jobs]

    base = asdict(base_config)
    rows = []
    for cell, idx, note in layout:
        row = {"alpha": base["alpha_percent"], "omega": base["omega_percent"], "epsilon": base["epsilon_percent"]}
        row.update({a: float(v) for a, v in zip(axes, cell)})
        if idx is None:
            row.update(mean_accuracy=float("nan"), n_seeds=0, valid=False, note=note)
        else:
            accs = [outcomes[i][0] for i in idx]
            notes = [outcomes[i][1] for i in idx if outcomes[i][1]]
            finite = [a for a in accs if not math.isnan(a)]
            row.update(mean_accuracy=float(np.mean(finite)) if finite else float("nan"),
                       n_seeds=len(finite), valid=True, note="; ".join(notes))
        rows.append(row)
    return rows


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["alpha", "omega", "epsilon", "mean_accuracy", "n_seeds", "valid", "note"])
    for r in rows:
        w.writerow([r["alpha"], r["omega"], r["epsilon"], repr(r["mean_accuracy"]), r["n_seeds"],
                    int(r["valid"]), r["note"]])
    return buf.getvalue()
