"""Shared argument handling for the experiment scripts."""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))


def parser(description, default_out):
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--out", default=default_out, help="output directory")
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seeds")
    p.add_argument("--T", type=int, default=None, help="override the number of rounds")
    return p


def seeds(args):
    return [int(s) for s in args.seeds.split(",")]
