"""Train the desk profile (N=8, 90 days), optimize every test case with all three
methods, and write checkpoint, metrics, results, failure ratios and plots."""

import argparse
import logging
from pathlib import Path

import numpy as np

from parkflow.experiments import DESK, median_wall_time, optimize_all, train_profile, write_run
from parkflow.report import read_results_csv, write_report


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    run = train_profile(DESK)
    for name, (mse, r2) in run.metrics.items():
        print(f"{name:16s} test mse={mse:.5f} r2={r2:.3f}")
    cases = optimize_all(run)
    out = Path(args.out)
    reports = write_run(out, run, cases)
    for m, rep in reports.items():
        ratios = " ".join(f"tau={t:.2f}:{x:.4f}" for t, x in zip(rep.taus, rep.ratios))
        print(f"{m:9s} {ratios} median wall {median_wall_time(cases[m]):.4f}s")

    dev = np.concatenate(
        [np.abs(c.result.y_pred - DESK.y_star)[~c.result.clamped & ~c.result.inelastic] for c in cases["oneshot"]]
    )
    print(f"one-shot self-consistency: {np.mean(dev <= 0.02):.1%} of {dev.size} free entries within 0.02")
    write_report(read_results_csv(out / "results.csv"), out)
    print(f"outputs in {out}")


if __name__ == "__main__":
    main()
