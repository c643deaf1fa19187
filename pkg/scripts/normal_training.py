"""Accuracy of FedAvg and both CMFL selection strategies without attack.

Writes the preset's CSVs under --out and prints the per-cell summary.
"""

from dataclasses import replace

from _common import parser, seeds

from cmfl import presets
from cmfl.cli import report


def main():
    args = parser(__doc__.splitlines()[0], "results").parse_args()
    base = presets.DESK_BASE if args.T is None else replace(presets.DESK_BASE, T=args.T)
    presets.run_preset("normal-training", args.out, seeds(args), base)
    print(report(f"{args.out}/normal-training"))


if __name__ == "__main__":
    main()
