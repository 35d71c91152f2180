"""Recompute the unified protection score from published metric columns.

Reads the main comparison table and the joint-design ablation (bundled with the tests),
prints the traceability / deterrence / fidelity parts and the combined score.
"""
import argparse
from pathlib import Path

from splatguard.metrics import read_rows_csv, sucps, sucps_against

DATA = Path(__file__).resolve().parent.parent / "tests" / "data"


def show(title, scores):
    print(title)
    print(f"  {'method':32s} {'T':>7s} {'E':>7s} {'F':>7s} {'sUCPS':>7s}")
    for s in scores:
        print(f"  {s.method:32s} {s.T:7.4f} {s.E:7.4f} {s.F:7.4f} {s.sucps:7.4f}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--main", default=DATA / "table1_rows.csv")
    ap.add_argument("--ablation", default=DATA / "table2_rows.csv")
    args = ap.parse_args()
    rows = read_rows_csv(args.main)
    show("main table", sucps(rows))
    # ablation rows are scored one at a time against the published baselines
    baselines = [r for r in rows if r.method != "Ours"]
    show("joint-design ablation (each row scored with the baselines)",
         sucps_against(baselines, read_rows_csv(args.ablation)))


if __name__ == "__main__":
    main()
