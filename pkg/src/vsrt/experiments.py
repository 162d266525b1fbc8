"""Fixed-seed experiment runners shared by scripts/ and the acceptance suite.

Every runner writes plain CSVs under its output directory and pins BLAS to one
thread, so two runs with the same arguments produce byte-identical files.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from .data import BAND, make_dataset
from .model import ModelConfig
from .theory import TheoryGrid, sweep_and_report
from .train import TrainConfig, bicubic_baseline, train

DESK_ABLATIONS = ("full", "no_stcsa", "no_boff", "no_flow")
DESK_BAND = BAND


def desk_configs(ablation: str = "full", iterations: int = 2000) -> tuple[ModelConfig, TrainConfig]:
    """T=3, C=12, 16x16 LR crops to 64x64 HR; one cosine restart halfway."""
    model = ModelConfig(global_residual="bicubic")
    half = iterations // 2
    tcfg = TrainConfig(iterations=iterations, lr0=1e-3, periods=[half, iterations - half],
                       restart_weights=[1.0, 0.5], batch=2, crop=16, eval_every=100, seed=0, ablation=ablation)
    return model, tcfg


def desk_data(band: float = DESK_BAND):
    """64 training sequences at 32x32 LR and a disjoint 16-sequence held-out set at 16x16 LR."""
    train_pairs, _ = make_dataset(64, 3, 32, 32, seed=0, band=band)
    eval_pairs, _ = make_dataset(16, 3, 16, 16, seed=1000, band=band)
    return train_pairs, eval_pairs


@dataclass
class DeskRun:
    ablation: str
    psnr: float  # held-out PSNR after the final step
    ssim: float
    seconds: float


def _final_eval(rows):
    last = [r for r in rows if r[3] != ""][-1]
    return float(last[3]), float(last[4])


def run_desk(out_dir, ablations=DESK_ABLATIONS, iterations: int = 2000, progress=None) -> dict[str, DeskRun]:
    """Train each variant from the shared seed; writes ``<ablation>/metrics.csv`` and ``summary.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_pairs, eval_pairs = desk_data()
    runs = {}
    with threadpool_limits(limits=1):
        base = bicubic_baseline(eval_pairs)
        for ablation in ablations:
            model, tcfg = desk_configs(ablation, iterations)
            t0 = time.perf_counter()
            res = train(model, tcfg, train_pairs, eval_pairs, out / ablation,
                        progress=(lambda s, l, p, a=ablation: progress(a, s, p)) if progress else None)
            psnr, ssim = _final_eval(res.log)
            runs[ablation] = DeskRun(ablation, psnr, ssim, time.perf_counter() - t0)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("method", "psnr", "ssim"))
        w.writerow(("bicubic", f"{base.avg_psnr:.4f}", f"{base.avg_ssim:.5f}"))
        for r in runs.values():
            w.writerow((r.ablation, f"{r.psnr:.4f}", f"{r.ssim:.5f}"))
    runs["bicubic"] = DeskRun("bicubic", base.avg_psnr, base.avg_ssim, 0.0)
    return runs


def run_theory(out_dir, grid: TheoryGrid | None = None, parts=("gradnorm", "learn", "readout")) -> dict:
    grid = TheoryGrid() if grid is None else replace(grid)
    with threadpool_limits(limits=1):
        return sweep_and_report(out_dir, grid, parts)


def csv_files(directory) -> dict[str, bytes]:
    """Relative path -> bytes for every CSV under ``directory``."""
    d = Path(directory)
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*.csv"))}
