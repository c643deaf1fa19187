"""Measured optimality gap against the convergence bound on the small theory instance.

Pools five seeded CMFL-I runs under the decaying schedule, writes theory.json
and theory.csv, and prints the verdict.
"""

from dataclasses import replace
from pathlib import Path

from _common import parser, seeds

from cmfl import diagnostics, presets
from cmfl.cli import _theorem_verdict
from cmfl.engine import build_dataset, run


def main():
    args = parser(__doc__.splitlines()[0], "results/theorem-bound").parse_args()
    base = presets.THEORY_BASE if args.T is None else replace(presets.THEORY_BASE, T=args.T)
    dataset = build_dataset(base)
    optima = diagnostics.compute_optima(dataset, base.loss_spec(dataset))
    reports, errors = [], []
    for s in seeds(args):
        rep = diagnostics.build_report(run(replace(base, seed=s), dataset), dataset, seed=s, optima=optima)
        reports.append(rep)
        errors.append([e for _, e in rep.error_curve])
    pooled = diagnostics.pool_reports(reports, errors)
    out = Path(args.out)
    presets.write_atomic(out / "theory.json", pooled.to_json() + "\n")
    presets.write_atomic(out / "theory.csv", pooled.curve_csv())
    print(f"L_hat={pooled.L_hat:.3f} mu={pooled.mu} Gamma={pooled.Gamma:.4f} "
          f"phi_min={pooled.phi_min:.3f} phi_max={pooled.phi_max:.3f} kappa^2={pooled.kappa_sq:.4f}")
    (t0, b0), (tT, bT) = pooled.bound_curve[0], pooled.bound_curve[-1]
    print(f"round {t0}: error {pooled.error_curve[0][1]:.4f} bound {b0:.4g}")
    print(f"round {tT}: error {pooled.error_curve[-1][1]:.4f} bound {bT:.4g}")
    print(_theorem_verdict(pooled.first_violation()))


if __name__ == "__main__":
    main()
