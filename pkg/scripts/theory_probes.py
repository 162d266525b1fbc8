"""Run the locality-learning sweeps (init gradient norms, parity learning, readout construction).

Writes gradnorm.csv, learn.csv and readout.csv under --out and prints a per-cell summary.
Extra ``key=value`` arguments override TheoryGrid fields, e.g. ``steps=1000 etas=0.1``.
"""

import argparse
import time

import numpy as np

from vsrt.cli import UsageError, build_configs
from vsrt.experiments import run_theory


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", required=True)
    ap.add_argument("--parts", default="gradnorm,learn,readout")
    ap.add_argument("overrides", nargs="*")
    args = ap.parse_args()
    try:
        (grid,) = build_configs("theory", None, args.overrides)
    except UsageError as e:
        ap.error(str(e))

    t0 = time.perf_counter()
    res = run_theory(args.out, grid, tuple(args.parts.split(",")))
    for st in res.get("gradnorm", []):
        mean = np.mean(st.sq_norms)
        print(f"n={st.n:<3} k={st.k:<2} q={st.q:<4} mean {mean:.3e}  median {st.median:.3e}  "
              f"bound {st.bound:.3e}  ratio {mean / st.bound:.3f}{'' if st.exact else '  (sampled)'}")
    for run in res.get("learn", []):
        hit = next((s for s, l in enumerate(run.losses) if l <= 0.05), None)
        print(f"{run.family:<6} eta={run.eta:<7g} final {run.final_loss:.4f}  avg {run.avg_loss:.4f}  "
              f"hinge<=0.05 at {hit}  rhs {run.rhs:.3g}")
    rows = res.get("readout", [])
    if rows:
        built = [us for *_, us in rows if us is not None]
        worst = max((us.residual for us in built), default=float("nan"))
        print(f"readout construction: {len(built)}/{len(rows)} built, max residual {worst:.2e}")
    print(f"{time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
