"""Command-line front end: ``run``, ``preset``, ``sweep``, ``report``, ``gen-data``.

Exit codes: 0 ok, 2 configuration error, 3 run abort, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

from . import diagnostics, presets
from .dataset import save_partitions
from .engine import SimConfig, build_dataset, config_from_mapping, run, sweep, sweep_csv
from .errors import CMFLError, ConfigError, ParseError, RunAbort

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_IO = 0, 2, 3, 4

# short flag -> SimConfig field
FLAG_FIELDS = {
    "K": "K", "T": "T", "tau": "tau", "alpha": "alpha_percent", "omega": "omega_percent",
    "epsilon": "epsilon_percent", "activation": "activation_percent", "strategy": "strategy",
    "attack": "attack", "seed": "seed", "eta": "eta", "lr": "lr", "batch_size": "batch_size",
    "reg": "reg_coeff", "upload_mode": "upload_mode", "dataset": "dataset",
}


def read_config_file(path) -> dict:
    """Parse flat ``key=value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ParseError(f"expected key=value, got {line!r}", line=lineno)
            values[key.strip()] = value.strip()
    return values


def parse_config(path=None, overrides=None, base: SimConfig = None, validate=True) -> SimConfig:
    """File values first, then overrides; the result is validated unless asked otherwise."""
    values = read_config_file(path) if path else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    config = config_from_mapping(values, base)
    return config.validate() if validate else config


def _flag_overrides(args) -> dict:
    out = {}
    for flag, name in FLAG_FIELDS.items():
        v = getattr(args, flag, None)
        if v is not None:
            out[name] = v
    if getattr(args, "synthetic", False):
        out["synthetic"] = True
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _add_config_flags(p):
    p.add_argument("--config", help="flat key=value configuration file")
    for flag, name in FLAG_FIELDS.items():
        p.add_argument(f"--{flag}", dest=flag, default=None, help=f"sets {name}")
    p.add_argument("--synthetic", action="store_true", help="generate a synthetic dataset from the config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="set any configuration key")


def cmd_run(args) -> int:
    config = parse_config(args.config, _flag_overrides(args))
    dataset = build_dataset(config)
    out = Path(args.out)
    result = run(config, dataset)
    presets.write_run(result, out)
    presets.write_atomic(out / "config.txt", config.to_text())
    print(f"{config.strategy}: final test accuracy {result.final_accuracy:.4f} after {config.T} rounds")
    if args.theory:
        report = diagnostics.build_report(result, dataset, seed=config.seed)
        presets.write_atomic(out / "theory.json", report.to_json() + "\n")
        presets.write_atomic(out / "theory.csv", report.curve_csv())
        print(_theorem_verdict(report.first_violation()))
    return EXIT_OK


def cmd_preset(args) -> int:
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    base = parse_config(args.config, _flag_overrides(args), base=presets.DESK_BASE) \
        if (args.config or _flag_overrides(args)) else None
    names = list(presets.PRESETS) if args.name == "all" else [args.name]
    for name in names:
        presets.run_preset(name, args.out, seeds, base)
        print(f"preset {name} written to {Path(args.out) / name}")
    return EXIT_OK


def _grid(text):
    return [float(v) for v in text.split(",")] if text else None


def cmd_sweep(args) -> int:
    config = parse_config(args.config, _flag_overrides(args), base=presets.DESK_BASE)
    grid = {k: v for k, v in (("alpha", _grid(args.alphas)), ("omega", _grid(args.omegas)),
                              ("epsilon", _grid(args.epsilons))) if v}
    if not grid:
        raise ConfigError("sweep: give at least one of --alphas, --omegas, --epsilons")
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = sweep(config, grid, seeds, build_dataset(config), workers=args.workers)
    text = sweep_csv(rows)
    presets.write_atomic(Path(args.out) / "sweep.csv", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    # only the data fields matter here, so round-level settings are not validated
    config = parse_config(args.config, {**_flag_overrides(args), "synthetic": True}, validate=False)
    dataset = build_dataset(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_partitions(dataset, out / "train.txt")
    if dataset.test is not None:
        from .dataset import FederatedDataset, Partition
        save_partitions(FederatedDataset([Partition(0, dataset.test)], dataset.num_classes, dataset.d_in),
                        out / "test.txt")
    print(f"wrote {dataset.K} partitions ({int(dataset.sizes.sum())} samples) to {out}")
    return EXIT_OK


def _theorem_verdict(round_t) -> str:
    return "THEOREM1: OK" if round_t is None else f"THEOREM1: VIOLATED at round {round_t}"


def report(run_dir) -> str:
    """Summarize a run or preset directory. Raises FileNotFoundError when nothing is there."""
    run_dir = Path(run_dir)
    summaries = sorted(run_dir.rglob("summary.csv"))
    metrics = sorted(run_dir.rglob("metrics.csv"))
    theory = sorted(run_dir.rglob("theory.csv"))
    if not (summaries or metrics):
        raise FileNotFoundError(
            f"{run_dir}: no artifacts found; expected metrics.csv (from `run`) or summary.csv (from `preset`)")
    lines = []
    for path in summaries:
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        if rows and "strategy" in rows[0]:
            groups = {}
            for r in rows:
                key = (r["strategy"], r["attack"], r["epsilon"])
                try:
                    groups.setdefault(key, []).append(float(r["final_accuracy"]))
                except ValueError:
                    continue
            lines.append(f"[{path.parent.name}]")
            for (s, a, e), accs in sorted(groups.items()):
                finite = [x for x in accs if not math.isnan(x)]
                mean = sum(finite) / len(finite) if finite else float("nan")
                lines.append(f"  {s:<13} attack={a:<13} eps={e:<5} final accuracy {mean:.4f} "
                             f"({len(finite)} runs)")
    if not summaries:
        for path in metrics:
            with open(path) as fh:
                rows = list(csv.DictReader(fh))
            if not rows:
                lines.append(f"{path.parent}: empty metrics")
                continue
            strategy = "?"
            snap = path.parent / "snapshot.json"
            if snap.exists():
                text = json.loads(snap.read_text())["config"]
                strategy = dict(l.split("=", 1) for l in text.splitlines() if "=" in l).get("strategy", "?")
            last = rows[-1]
            lines.append(f"{path.parent.name}: {strategy} final accuracy {float(last['test_accuracy']):.4f} "
                         f"after {last['round']} rounds")
    for path in theory:
        with open(path) as fh:
            violated = next((int(r["round"]) for r in csv.DictReader(fh) if float(r["error"]) > float(r["bound"])),
                            None)
        lines.append(_theorem_verdict(violated))
    return "\n".join(lines)


def cmd_report(args) -> int:
    print(report(args.run_dir))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmfl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one simulation")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--theory", action="store_true", help="measure constants and evaluate the error bound")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("preset", help="run an experiment preset")
    p.add_argument("name", choices=[*presets.PRESETS, "all"])
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", help="comma-separated seeds")
    p.set_defaults(func=cmd_preset)

    p = sub.add_parser("sweep", help="grid over alpha / omega / epsilon")
    _add_config_flags(p)
    p.add_argument("--alphas")
    p.add_argument("--omegas")
    p.add_argument("--epsilons")
    p.add_argument("--seeds", default="0")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="summarize a run or preset directory")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gen-data", help="write synthetic partitions to disk")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParseError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RunAbort as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except CMFLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
