"""Per-case wall time of the three optimizers on the N=32 synthetic city (single thread)."""

import argparse
import dataclasses
from pathlib import Path

from parkflow.experiments import WIDE, median_wall_time, optimize_all, train_profile, write_run


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--cases", type=int, default=12, help="test cases to time (greedy takes ~10 s each)")
    ap.add_argument("--out", default="runs/timing")
    args = ap.parse_args()

    run = train_profile(dataclasses.replace(WIDE, max_cases=args.cases))
    cases = optimize_all(run)
    write_run(Path(args.out), run, cases)
    med = {m: median_wall_time(cases[m]) for m in cases}
    for m, t in med.items():
        q = sorted(c.result.oracle_queries for c in cases[m])
        print(f"{m:9s} median {t:.4f}s  queries median {q[len(q) // 2]}")
    print(f"greedy / one-shot: {med['greedy'] / med['oneshot']:.0f}x")


if __name__ == "__main__":
    main()
