"""Supervised pretraining of the coarse-to-fine flow network on synthetic translations.

Saves the parameters as a tensor manifest under --out and reports the endpoint
error on a held-out batch against the zero-flow predictor.
"""

import argparse

import numpy as np

from vsrt.flow import endpoint_error, spynet_lite
from vsrt.serialize import write_manifest
from vsrt.train import flow_batch, train_spynet


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    params, losses = train_spynet(args.steps, lr=args.lr, seed=args.seed,
                                  progress=lambda s, l: print(f"step {s:>5}  epe {l:.4f}", flush=True)
                                  if s % 200 == 0 else None)
    write_manifest(args.out, {k: p.data for k, p in params.items()})
    ref, src, flow = flow_batch(np.random.default_rng(123), 16)
    epe = endpoint_error(spynet_lite(ref, src, params), flow)
    print(f"held-out endpoint error {epe:.3f} px (zero flow {endpoint_error(np.zeros_like(flow), flow):.3f} px)")


if __name__ == "__main__":
    main()
