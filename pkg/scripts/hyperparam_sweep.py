"""Final accuracy over alpha, omega and epsilon grids under back-gradient attack.

Writes the preset's CSVs under --out and prints the per-cell summary.
"""

from dataclasses import replace
from pathlib import Path

from _common import parser, seeds

from cmfl import presets


def main():
    args = parser(__doc__.splitlines()[0], "results").parse_args()
    base = presets.DESK_BASE if args.T is None else replace(presets.DESK_BASE, T=args.T)
    presets.run_preset("hyperparam-sweep", args.out, seeds(args), base)
    print((Path(args.out) / "hyperparam-sweep" / "summary.csv").read_text(), end="")


if __name__ == "__main__":
    main()
