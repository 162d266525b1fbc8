"""Train the desk-scale model and its three ablations on synthetic video, then print the PSNR table.

    python3 scripts/desk_sr.py --out runs/desk
    python3 scripts/desk_sr.py --out runs/quick --iterations 200 --ablations full no_flow
"""

import argparse

from vsrt.experiments import DESK_ABLATIONS, run_desk


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", required=True)
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--ablations", nargs="+", default=list(DESK_ABLATIONS), choices=DESK_ABLATIONS)
    args = ap.parse_args()

    def progress(ablation, step, psnr):
        if step % 500 == 0:
            print(f"{ablation:<9} step {step:>5}  psnr {psnr:.3f}", flush=True)

    runs = run_desk(args.out, args.ablations, args.iterations, progress)
    base = runs.pop("bicubic").psnr
    print(f"\n{'method':<9} {'psnr':>8} {'vs bicubic':>11} {'seconds':>8}")
    print(f"{'bicubic':<9} {base:8.3f} {0.0:+11.2f}")
    for r in runs.values():
        print(f"{r.ablation:<9} {r.psnr:8.3f} {r.psnr - base:+11.2f} {r.seconds:8.0f}")


if __name__ == "__main__":
    main()
