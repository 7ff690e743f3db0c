"""Staged design over controller orders 0..3 for the four-mass rig.

Writes one gain file and one root CSV per order, and prints the design table
next to the reference values.

    python3 scripts/design_table.py --out runs/table --jobs 4
"""

import argparse
import logging
import time
from pathlib import Path

from delayfb import optimizer as O
from delayfb import spectrum as SP
from delayfb.cli import write_gains
from delayfb.model import FeedbackConfig, PlantParams, assemble_ddae, build_plant

DELAYS = (0.05, 0.1, 0.15, 0.2)
FREQS = (4.0, 8.0, 12.0, 16.0)
REFERENCE = {0: -0.5218, 1: -0.5218, 2: -0.5322, 3: -0.5347}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/table")
    ap.add_argument("--orders", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--maxit", type=int, default=500)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    plant = build_plant(PlantParams())
    opts = O.OptimizerOptions(maxit=args.maxit, seed=args.seed, n_jobs=args.jobs)
    t0 = time.perf_counter()
    recs = O.staged_design(plant, DELAYS, range(args.orders + 1), FREQS, opts)
    print(f"\n{'n_c':>3} {'alpha':>10} {"reference":>10} {'gap':>8} {'residual':>9} {'iters':>6} {'time[s]':>8}")
    for r in recs:
        sys = assemble_ddae(plant, FeedbackConfig(DELAYS, r.n_c))
        write_gains(out / f"gains_nc{r.n_c}.txt", r.K)
        SP.compute_spectrum(sys, r.K.K).to_csv(out / f"spectrum_nc{r.n_c}.csv")
        ref = REFERENCE.get(r.n_c, float("nan"))
        print(f"{r.n_c:>3} {r.alpha:>10.4f} {ref:>10.4f} {r.alpha - ref:>+8.4f} "
              f"{r.residual_max:>9.1e} {r.iterations:>6} {r.wall_time:>8.1f}")
    print(f"total {time.perf_counter() - t0:.0f} s, outputs in {out}")


if __name__ == "__main__":
    main()
