#!/usr/bin/env python3
"""Compare evaluation reports under a work directory with the target metrics."""

import argparse
import csv
import json
import sys
from pathlib import Path

HERE = Path(__file__).resolve().parent


def load(path):
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        return None


def check(rows, label, got, want, tol):
    if got is None:
        rows.append((label, f"{want:.2f}", "-", "missing"))
        return False
    gap = got - want
    rows.append((label, f"{want:.2f}", f"{got:.2f}", f"{gap:+.2f}"))
    return abs(gap) <= tol


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--work", type=Path, default=HERE / "work")
    ap.add_argument("--tolerance", type=float, default=2.0)
    args = ap.parse_args()
    ev = args.work / "eval"

    rows, bad = [], []
    with open(HERE / "experiments.tsv", newline="") as f:
        for r in csv.reader(f, delimiter="\t"):
            if not r or r[0].startswith("#"):
                continue
            name, ndcg, recall = r[0], r[6], r[7]
            report = load(ev / f"{name}.json")
            if report is None:
                continue
            got_n = 100 * report["macro_ndcg"]["10"]
            got_r = 100 * report["macro_recall"]["10"]
            if not check(rows, f"{name} NDCG@10", got_n, float(ndcg), args.tolerance):
                bad.append(f"{name} NDCG@10")
            if recall != "-" and not check(rows, f"{name} R@10", got_r, float(recall), args.tolerance):
                bad.append(f"{name} R@10")

    fair = json.loads((HERE / "fairness.json").read_text())
    for name, want in fair["disease_sd"].items():
        report = load(ev / f"sd-{name}.json")
        if report is not None:
            # SD is on the 0-1 scale; compare in points for a uniform tolerance.
            if not check(rows, f"{name} disease SD", 100 * report["mean_sd"], 100 * want, args.tolerance):
                bad.append(f"{name} disease SD")
    for mode, targets in fair["perturb"].items():
        report = load(ev / f"perturb-{mode}.json")
        if report is None:
            continue
        got = {v["prefix"]: 100 * v["macro_ndcg"] for v in report["variants"]}
        for prefix, want in targets.items():
            label = f"perturb/{mode} '{prefix}'"
            if not check(rows, label, got.get(prefix), want, args.tolerance):
                bad.append(label)

    if not rows:
        print(f"no reports under {ev}")
        return 1
    width = max(len(r[0]) for r in rows)
    print(f"{'metric':<{width}}  {'target':>7}  {'got':>7}  {'gap':>7}")
    for label, want, got, gap in rows:
        print(f"{label:<{width}}  {want:>7}  {got:>7}  {gap:>7}")
    print(f"{len(rows) - len(bad)}/{len(rows)} within {args.tolerance} points")
    return 1 if bad else 0


if __name__ == "__main__":
    sys.exit(main())
