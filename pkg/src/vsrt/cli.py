"""Command-line entry point: ``vsrt <subcommand> [--config FILE] [key=value ...] --out DIR``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .data import DataConfig, PPMError, build_dataset, load_dataset, read_ppm, save_dataset, write_ppm
from .model import ABLATIONS, ConfigError, ModelConfig, vsr_transformer_forward
from .serialize import FormatError, parse_value, read_kv
from .tensor import ShapeError, Tensor

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

CONFIGS = {
    "gen-data": (DataConfig,),
    "train": (ModelConfig, "TrainConfig"),
    "theory": ("TheoryGrid",),
}


class UsageError(Exception):
    pass


def _resolve(cls):
    if cls == "TrainConfig":
        from .train import TrainConfig
        return TrainConfig
    if cls == "TheoryGrid":
        from .theory import TheoryGrid
        return TheoryGrid
    return cls


def config_classes(command: str) -> list[type]:
    return [_resolve(c) for c in CONFIGS.get(command, ())]


def _defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        else:
            out[f.name] = f.default_factory()
    return out


def _show(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def keys_help(command: str) -> str:
    lines = []
    for cls in config_classes(command):
        lines.append(f"{cls.__name__} keys (key=value, defaults shown):")
        lines += [f"  {k} = {_show(v)}" for k, v in _defaults(cls).items()]
    return "\n".join(lines)


def build_configs(command: str, config_path: str | None, overrides: list[str]) -> list:
    """Instantiate the configs of ``command`` from defaults, then the config file, then overrides."""
    classes = config_classes(command)
    valid = {}
    for cls in classes:
        for name in _defaults(cls):
            valid.setdefault(name, cls)
    raw: dict[str, str] = {}
    if config_path is not None:
        try:
            file_pairs = read_kv(config_path)
        except OSError as e:
            raise UsageError(f"cannot read config {config_path}: {e.strerror}") from None
        except FormatError as e:
            raise UsageError(str(e)) from None
        raw.update(file_pairs)
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        raw[k.strip()] = v
    unknown = sorted(set(raw) - set(valid))
    if unknown:
        listing = ", ".join(sorted(valid)) if valid else "(none)"
        raise UsageError(f"unknown config key(s) {', '.join(unknown)}; valid keys: {listing}")
    out = []
    for cls in classes:
        defaults = _defaults(cls)
        kwargs = {}
        for k, v in raw.items():
            if valid[k] is not cls:
                continue
            like = defaults[k] if defaults[k] is not None else 0
            try:
                kwargs[k] = parse_value(v, like)
            except ValueError as e:
                raise UsageError(f"bad value for {k}: {e}") from None
        try:
            cfg = cls(**kwargs)
            if hasattr(cfg, "validate"):
                cfg.validate()
        except (ValueError, ConfigError) as e:
            raise UsageError(str(e)) from None
        out.append(cfg)
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    (cfg,) = build_configs("gen-data", args.config, args.overrides)
    pairs, specs = build_dataset(cfg)
    d = save_dataset(args.out, pairs, specs, packed=cfg.packed)
    print(d / "sequences.txt")
    return EXIT_OK


def _require_dir(path, what):
    if path is None or not Path(path).is_dir():
        raise FileNotFoundError(f"{what} directory not found: {path}")


def cmd_train(args) -> int:
    from .train import train

    model_cfg, train_cfg = build_configs("train", args.config, args.overrides)
    if args.ablation is not None:
        train_cfg = dataclasses.replace(train_cfg, ablation=args.ablation)
    _require_dir(args.data, "dataset")
    pairs, _ = load_dataset(args.data)
    eval_pairs = pairs
    if args.eval_data is not None:
        _require_dir(args.eval_data, "evaluation dataset")
        eval_pairs, _ = load_dataset(args.eval_data)
    if min(p.lr.shape[-1] for p in pairs) < train_cfg.crop or min(p.lr.shape[-2] for p in pairs) < train_cfg.crop:
        raise ShapeError(f"training frames are smaller than crop={train_cfg.crop}")

    def progress(step, loss, p):
        shown = "-" if loss is None else f"{loss:.5f}"
        print(f"step {step:>6}  loss {shown}  psnr {p:.3f}", flush=True)

    res = train(model_cfg, train_cfg, pairs, eval_pairs, args.out, progress=progress)
    print(f"best psnr {res.best_psnr:.3f} at step {res.best_step}; {res.seconds:.1f}s")
    return EXIT_OK


def _frame_key(path: Path):
    return [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", path.name)]


def window_starts(count: int, t: int) -> list[int]:
    """Non-overlapping windows of ``t`` frames; a short tail reuses the last ``t`` frames."""
    if count < t:
        raise ShapeError(f"{count} frames given but the checkpoint model needs windows of {t}")
    starts = list(range(0, count - t + 1, t))
    if starts[-1] + t < count:
        starts.append(count - t)
    return starts


def super_resolve_frames(frames: np.ndarray, params, cfg: ModelConfig, shift=None) -> np.ndarray:
    """[N,3,H,W] LR frames -> [N,3,sH,sW], processed in windows of ``cfg.frames``."""
    n, _, h, w = frames.shape
    if h % cfg.patch_h or w % cfg.patch_w:
        raise ShapeError(f"frame size {h}x{w} is not a multiple of the model patch {cfg.patch_h}x{cfg.patch_w}")
    t = cfg.frames
    out = np.zeros((n, 3, h * cfg.scale, w * cfg.scale), dtype=np.float32)
    done = 0
    for s in window_starts(n, t):
        win = Tensor(frames[s:s + t])
        y = vsr_transformer_forward(win, params, cfg, evaluate=True, shift=shift).data
        keep = max(done - s, 0)
        out[s + keep:s + t] = y[keep:]
        done = s + t
    return out


def _parse_shift(raw):
    if raw is None:
        return None
    try:
        dx, dy = (float(v) for v in raw.split(","))
    except ValueError:
        raise UsageError(f"--shift expects DX,DY in LR pixels per frame, got {raw!r}") from None
    return dx, dy


def cmd_super_resolve(args) -> int:
    from .train import load_checkpoint

    _require_dir(args.checkpoint, "checkpoint")
    _require_dir(args.frames, "frames")
    params, cfg = load_checkpoint(args.checkpoint)
    shift = _parse_shift(args.shift)
    if cfg.flow_estimator == "ground_truth" and shift is None:
        raise UsageError("this checkpoint uses ground-truth flows; pass --shift DX,DY")
    paths = sorted(Path(args.frames).glob("*.ppm"), key=_frame_key)
    if not paths:
        raise FileNotFoundError(f"no .ppm frames in {args.frames}")
    frames = [read_ppm(p) for p in paths]
    sizes = {f.shape for f in frames}
    if len(sizes) != 1:
        raise ShapeError(f"frames differ in size: {sorted(sizes)}")
    with threadpool_limits(limits=1):
        hr = super_resolve_frames(np.stack(frames), params, cfg, shift)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for p, frame in zip(paths, hr):
        write_ppm(out / f"{p.stem}_x{cfg.scale}.ppm", frame)
    print(f"wrote {len(paths)} frames to {out}")
    return EXIT_OK


EVAL_HEADER = ("method", "sequence", "psnr", "ssim", "infinite")


def _eval_one(job):
    from .train import score_sequence

    pred, hr, mode = job
    with threadpool_limits(limits=1):
        return score_sequence(pred, hr, mode)


def _predict_one(job):
    from .train import predict

    params, cfg, pair = job
    with threadpool_limits(limits=1):
        return predict(params, cfg, pair)


def _map(fn, jobs, workers):
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs))


def cmd_eval(args) -> int:
    from .resample import bicubic_resample
    from .train import load_checkpoint

    _require_dir(args.checkpoint, "checkpoint")
    _require_dir(args.data, "dataset")
    params, cfg = load_checkpoint(args.checkpoint)
    pairs, _ = load_dataset(args.data)
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    t0 = time.perf_counter()
    preds = {
        "model": _map(_predict_one, [(params, cfg, p) for p in pairs], args.workers),
        "bicubic": [np.clip(bicubic_resample(p.lr, p.scale), 0.0, 1.0) for p in pairs],
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"eval_{args.channels}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_HEADER)
        for method, ps in preds.items():
            scores = _map(_eval_one, [(pr, p.hr, args.channels) for pr, p in zip(ps, pairs)], args.workers)
            for i, (p, s, inf) in enumerate(scores):
                w.writerow((method, i, f"{p:.6f}", f"{s:.6f}", int(inf)))
            avg_p = float(np.mean([x[0] for x in scores]))
            avg_s = float(np.mean([x[1] for x in scores]))
            w.writerow((method, "average", f"{avg_p:.6f}", f"{avg_s:.6f}", int(any(x[2] for x in scores))))
            print(f"{method:<8} psnr {avg_p:.3f} dB  ssim {avg_s:.4f}  ({args.channels})")
    print(f"{len(pairs)} sequences in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK


def cmd_theory(args) -> int:
    from .theory import ResourceError, TheoryConfigError, sweep_and_report

    try:
        (grid,) = build_configs("theory", args.config, args.overrides)
    except TheoryConfigError as e:
        raise UsageError(str(e)) from None
    parts = tuple(p.strip() for p in args.parts.split(","))
    bad = set(parts) - {"gradnorm", "learn", "readout"}
    if bad:
        raise UsageError(f"unknown parts {sorted(bad)}; choose from gradnorm, learn, readout")
    try:
        with threadpool_limits(limits=1):
            sweep_and_report(args.out, grid, parts)
    except TheoryConfigError as e:
        raise UsageError(str(e)) from None
    except ResourceError as e:
        print(f"resource error: {e}", file=sys.stderr)
        return EXIT_USAGE
    for p in parts:
        print(Path(args.out) / f"{p}.csv")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradcheck

    t0 = time.perf_counter()
    results = gradcheck.run(args.scope, args.seed)
    lines = [gradcheck.HEADER] + [r.line() for r in results]
    text = "\n".join(lines) + "\n"
    print(text, end="")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed in {time.perf_counter() - t0:.1f}s")
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"gradcheck_{args.scope}.txt").write_text(text)
    for r in failed:
        print(f"FAILED {r.name}: max relative error {r.max_rel_error:.3e}", file=sys.stderr)
    return EXIT_NUMERIC if failed else EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="vsrt", description="Video super-resolution transformer toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, out_required=True, configurable=False):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt,
                           epilog=keys_help(name) if configurable else None)
        p.add_argument("--out", required=out_required, help="output directory (created if absent)")
        if configurable:
            p.add_argument("--config", help="flat 'key = value' config file")
            p.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides")
        p.set_defaults(fn=fn)
        return p

    add("gen-data", cmd_gen_data, "Generate a synthetic translating-video dataset.", configurable=True)

    p = add("train", cmd_train, "Train a model and write checkpoints plus metrics.csv.", configurable=True)
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--eval-data", help="held-out dataset directory (default: the training set)")
    p.add_argument("--ablation", choices=[a for a in ABLATIONS if a != "full"])

    p = add("super-resolve", cmd_super_resolve, "Upscale a directory of LR PPM frames.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames", required=True, help="directory of LR .ppm frames, processed in name order")
    p.add_argument("--shift", help="DX,DY translation in LR px per frame for ground-truth-flow checkpoints")

    p = add("eval", cmd_eval, "Score a checkpoint and the bicubic baseline on a dataset.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--channels", choices=["rgb", "y"], default="rgb")
    p.add_argument("--workers", type=int, default=1, help="processes used across sequences")

    p = add("theory", cmd_theory, "Run the locality-learning sweeps and write CSVs.", configurable=True)
    p.add_argument("--parts", default="gradnorm,learn,readout")

    p = add("gradcheck", cmd_gradcheck, "Finite-difference gradient checks.", out_required=False)
    p.add_argument("--scope", choices=["ops", "model", "all"], default="ops")
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, NotADirectoryError, PPMError, FormatError, ShapeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # numeric aborts carry their own exit code
        code = getattr(e, "exit_code", None)
        if code is None:
            raise
        print(f"aborted: {e}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
