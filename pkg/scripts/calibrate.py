"""Regenerate tests/fixtures/baseline_runs.json from the reference runs.

Usage: python scripts/calibrate.py [--runs oracle_2d,patch] [--out DIR]

Runs not listed keep their previous record. Takes roughly ten minutes on
one core for all runs (the patch teacher dominates).
"""

import argparse
import json
import os
import sys
import tempfile

HERE = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, os.path.join(HERE, "..", "tests"))

from runs import FIXTURE, RUNS, THRESHOLDS, run  # noqa: E402


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--runs", default=",".join(RUNS))
    ap.add_argument("--out", default=None, help="run directory root (default: a temporary directory)")
    args = ap.parse_args(argv)

    fixture = {"thresholds": THRESHOLDS, "runs": {}}
    if os.path.exists(FIXTURE):
        with open(FIXTURE) as fh:
            fixture["runs"] = json.load(fh).get("runs", {})
    out = args.out or tempfile.mkdtemp(prefix="dynscore-calib-")
    cache = os.path.join(out, "teacher-cache")
    for name in args.runs.split(","):
        record, _ = run(name, out, cache)
        fixture["runs"][name] = record
        print(name, json.dumps(record, sort_keys=True), flush=True)
    os.makedirs(os.path.dirname(FIXTURE), exist_ok=True)
    with open(FIXTURE, "w") as fh:
        json.dump(fixture, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print("wrote", FIXTURE)


if __name__ == "__main__":
    main()
