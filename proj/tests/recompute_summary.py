#!/usr/bin/env python3
"""Recompute summary.json from the raw metrics files of a run directory.

For every <arm>/seed_<s>/metrics.csv the final round's test accuracy is
averaged over clients; per arm the mean and sample standard deviation over
seeds must match summary.json to 1e-9. Exits non-zero on any mismatch.
"""

import csv
import json
import math
import statistics
import sys
from pathlib import Path

TOL = 1e-9


def final_mean_accuracy(path):
    with path.open() as f:
        lines = [line for line in f if not line.startswith("#")]
    rows = list(csv.DictReader(lines))
    last = max(int(r["round"]) for r in rows)
    acc = [float(r["test_accuracy"]) for r in rows if int(r["round"]) == last]
    return math.fsum(acc) / len(acc)


def main(root):
    root = Path(root)
    summary = json.loads((root / "summary.json").read_text())
    problems = []
    for arm, entry in summary["arms"].items():
        by_seed = {}
        for metrics in sorted((root / arm).glob("seed_*/metrics.csv")):
            by_seed[int(metrics.parent.name.split("_", 1)[1])] = final_mean_accuracy(metrics)
        seeds = [run["seed"] for run in entry["runs"]]
        if sorted(seeds) != sorted(by_seed):
            problems.append(f"{arm}: summary seeds {seeds} vs files {sorted(by_seed)}")
            continue
        for run in entry["runs"]:
            if abs(run["mean_final_accuracy"] - by_seed[run["seed"]]) > TOL:
                problems.append(f"{arm} seed {run['seed']}: run accuracy differs")
        values = [by_seed[s] for s in seeds]
        mean = statistics.fmean(values)
        std = statistics.stdev(values) if len(values) > 1 else 0.0
        if abs(entry["mean_accuracy"] - mean) > TOL:
            problems.append(f"{arm}: mean {entry['mean_accuracy']} vs recomputed {mean}")
        if abs(entry["std_accuracy"] - std) > TOL:
            problems.append(f"{arm}: std {entry['std_accuracy']} vs recomputed {std}")
        print(f"{arm}: mean {mean:.12f} std {std:.12f} over {len(values)} seeds")
    for p in problems:
        print("MISMATCH", p)
    return 1 if problems or not summary["arms"] else 0


if __name__ == "__main__":
    if len(sys.argv) != 2:
        sys.exit("usage: recompute_summary.py RUN_DIR")
    sys.exit(main(sys.argv[1]))
