"""Desk-scale versions of the four experiment families, plus artifact writing."""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import adversary
from .engine import (CMFL_I, CMFL_II, FEDAVG, KRUM, MEDIAN, MULTI_KRUM, TRIMMED_MEAN, SimConfig,
                     build_dataset, run, sweep, sweep_csv)
from .errors import RunAbort

# Shared desk-scale instance: 20 clients, 5 classes dealt as 3 label shards each, every client active.
# With omega=20 and alpha=40 this gives C=4 < m=6, so the committee is elected from the aggregation set.
DESK_BASE = SimConfig(
    K=20, T=200, tau=5, activation_percent=100.0, alpha_percent=40.0, omega_percent=20.0,
    epsilon_percent=0.0, batch_size=8, eta=0.01, reg_coeff=0.01, synthetic=True,
    num_classes=5, d_in=10, samples_per_class=100, class_separation=4.0,
    partition="shard", shards_per_client=3, test_fraction=0.2, data_seed=0,
)

# Small instance where every theory constant can be measured (exhaustive committee search needs K <= 20).
THEORY_BASE = SimConfig(
    K=10, T=100, tau=5, activation_percent=100.0, alpha_percent=40.0, omega_percent=20.0,
    batch_size=8, lr="theorem", reg_coeff=0.1, strategy=CMFL_I, synthetic=True,
    num_classes=5, d_in=10, samples_per_class=60, class_separation=3.0,
    partition="shard", shards_per_client=2, test_fraction=0.2, data_seed=0,
)

GRID = [10.0, 20.0, 30.0, 40.0, 50.0]


@dataclass
class ExperimentPreset:
    name: str
    overrides: dict
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])

    def base(self, base: SimConfig = DESK_BASE) -> SimConfig:
        return replace(base, **self.overrides)


PRESETS = {
    "normal-training": ExperimentPreset("normal-training", dict(epsilon_percent=0.0)),
    "robustness": ExperimentPreset("robustness", dict(epsilon_percent=10.0)),
    "hyperparam-sweep": ExperimentPreset("hyperparam-sweep", dict(attack=adversary.BACK_GRADIENT,
                                                                   strategy=CMFL_I)),
    "committee-analysis": ExperimentPreset("committee-analysis", dict(omega_percent=30.0,
                                                                       attack=adversary.BACK_GRADIENT,
                                                                       strategy=CMFL_I)),
}


def write_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_run(result, out_dir, extra=None) -> None:
    """metrics.csv, roles.csv, scores.csv and snapshot.json for one run."""
    out_dir = Path(out_dir)
    write_atomic(out_dir / "metrics.csv", result.metrics_csv())
    write_atomic(out_dir / "roles.csv", result.roles_csv())
    if result.config.is_cmfl:
        write_atomic(out_dir / "scores.csv", result.scores_csv())
    snap = result.snapshot()
    if extra:
        snap.update(extra)
    write_atomic(out_dir / "snapshot.json", json.dumps(snap, indent=1) + "\n")


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _cells(name, base):
    """(label, config) pairs for the run-based presets."""
    if name == "normal-training":
        return [((s, "none", base.epsilon_percent), replace(base, strategy=s)) for s in (FEDAVG, CMFL_I, CMFL_II)]
    if name == "robustness":
        attacks = (adversary.SCALING, adversary.SAME_VALUE, adversary.BACK_GRADIENT)
        strategies = (CMFL_I, MEDIAN, TRIMMED_MEAN, KRUM, MULTI_KRUM)
        return [((s, a, base.epsilon_percent), replace(base, strategy=s, attack=a))
                for a in attacks for s in strategies]
    if name == "committee-analysis":
        return [((base.strategy, base.attack, e), replace(base, epsilon_percent=e)) for e in GRID]
    raise KeyError(name)


def run_preset(name, out_dir, seeds=None, base: SimConfig = None) -> int:
    """Execute a preset into ``out_dir``. Individual run aborts are recorded, not fatal."""
    preset = PRESETS[name]
    seeds = list(preset.seeds if seeds is None else seeds)
    cfg0 = preset.base(base or DESK_BASE)
    out = Path(out_dir) / name
    dataset = build_dataset(cfg0)

    if name == "hyperparam-sweep":
        rows = []
        subs = [("fixed-alpha", dict(alpha_percent=40.0), {"omega": GRID, "epsilon": GRID}),
                ("fixed-omega", dict(omega_percent=40.0), {"alpha": GRID, "epsilon": GRID}),
                ("fixed-epsilon", dict(epsilon_percent=10.0), {"alpha": GRID, "omega": GRID})]
        for label, fixed, grid in subs:
            cells = sweep(replace(cfg0, **fixed), grid, seeds, dataset)
            write_atomic(out / f"{label}.csv", sweep_csv(cells))
            rows.extend([label, c["alpha"], c["omega"], c["epsilon"], repr(c["mean_accuracy"]), int(c["valid"])]
                        for c in cells)
        write_atomic(out / "summary.csv",
                     _csv(["sub_experiment", "alpha", "omega", "epsilon", "mean_accuracy", "valid"], rows))
        return 0

    summary, curves, committee_rows = [], [], []
    for (strategy, attack, eps), cfg in _cells(name, cfg0):
        for s in seeds:
            run_cfg = replace(cfg, seed=s)
            tag = f"{strategy}_{attack}_eps{eps:g}_seed{s}"
            try:
                result = run(run_cfg, dataset)
            except RunAbort as exc:
                summary.append([strategy, attack, eps, s, "nan", "nan", f"aborted at round {exc.round_t}"])
                continue
            write_run(result, out / "runs" / tag)
            last = result.records[-1]
            summary.append([strategy, attack, eps, s, repr(last.test_accuracy), repr(last.test_loss), ""])
            for r in result.records:
                curves.append([strategy, attack, eps, s, r.round, "test_accuracy", repr(r.test_accuracy)])
                curves.append([strategy, attack, eps, s, r.round, "test_loss", repr(r.test_loss)])
            if name == "committee-analysis":
                N = np.array([[r.N1, r.N2, r.N3] for r in result.records], dtype=float)
                committee_rows.append([eps, s, *(repr(float(v)) for v in N.mean(axis=0))])
                for r in result.records:
                    curves.append([strategy, attack, eps, s, r.round, "N1", r.N1])
                    curves.append([strategy, attack, eps, s, r.round, "N2", r.N2])
                    curves.append([strategy, attack, eps, s, r.round, "N3", r.N3])

    write_atomic(out / "summary.csv", _csv(
        ["strategy", "attack", "epsilon", "seed", "final_accuracy", "final_test_loss", "note"], summary))
    write_atomic(out / "curves.csv", _csv(["strategy", "attack", "epsilon", "seed", "round", "metric", "value"],
                                          curves))
    if committee_rows:
        write_atomic(out / "malicious_counts.csv",
                     _csv(["epsilon", "seed", "mean_N1", "mean_N2", "mean_N3"], committee_rows))
    return 0
