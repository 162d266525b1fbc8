"""Loss, Adam, cosine-with-restarts schedule, PSNR/SSIM, the training loop and checkpoints."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as tt
from .data import SamplePair, augment, crop_lr_patches
from .model import ABLATIONS, ModelConfig, init_params, vsr_transformer_forward
from .resample import bicubic_resample
from .serialize import dump_config, load_config, read_manifest, write_manifest
from .tensor import ShapeError, Tensor

PSNR_CAP = 100.0
EXIT_NAN = 4


@dataclass
class TrainConfig:
    lr0: float = 2e-4
    lr_min: float = 1e-7
    betas: tuple = (0.9, 0.99)
    periods: list = field(default_factory=lambda: [1000, 1000])
    restart_weights: list = field(default_factory=lambda: [1.0, 0.5])
    iterations: int = 2000
    batch: int = 2
    charbonnier_eps: float = 1e-8
    seed: int = 0
    ablation: str = "full"
    eval_every: int = 100
    crop: int = 16
    augment: bool = True

    def validate(self):
        if len(self.periods) != len(self.restart_weights):
            raise ValueError("periods and restart_weights must have the same length")
        if not self.lr_min < self.lr0:
            raise ValueError(f"lr_min ({self.lr_min}) must be below lr0 ({self.lr0})")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.batch < 1 or self.iterations < 0:
            raise ValueError("batch must be >= 1 and iterations >= 0")
        return self


class TrainingAborted(RuntimeError):
    exit_code = EXIT_NAN


# ---------------------------------------------------------------------------
# loss, optimizer, schedule


def charbonnier_loss(pred: Tensor, target, eps: float = 1e-8) -> Tensor:
    """mean(sqrt((pred - target)^2 + eps^2))."""
    target = tt.as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"charbonnier_loss: pred dims {pred.dims} vs target dims {target.dims}")
    d = tt.sub(pred, target)
    return tt.mean_all(tt.sqrt(tt.add(tt.mul(d, d), Tensor(np.array(eps * eps)))))


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              betas=(0.9, 0.99), eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam, updating ``params`` in place. Moments kept in float64."""
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        upd = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - upd).astype(p.data.dtype)
    return state


def cosine_restart_lr(step: int, cfg: TrainConfig) -> float:
    start = 0
    for period, weight in zip(cfg.periods, cfg.restart_weights):
        if step < start + period:
            s = step - start
            return cfg.lr_min + weight * (cfg.lr0 - cfg.lr_min) * (1 + math.cos(math.pi * s / period)) / 2
        start += period
    return cfg.lr_min


# ---------------------------------------------------------------------------
# supervised flow pre-training


FLOW_PATTERNS = ("gaussian-blobs", "band-limited-noise")


def flow_batch(rng: np.random.Generator, batch: int, size: int = 32, max_shift: float = 2.0, band: float = 0.3):
    """Frame pairs (ref, src) translating by up to ``max_shift`` px, and the flow warping src onto ref.

    Content is kept well below Nyquist and free of pure stripes so that a
    2 px translation is not ambiguous modulo the pattern period.
    """
    from .data import MotionSpec, generate_sequence

    refs, srcs, flows = [], [], []
    for _ in range(batch):
        # generated at x2 so the per-frame shift limit of the generator allows max_shift LR pixels
        dx, dy = rng.uniform(-max_shift, max_shift, 2) * 2.0
        kind = FLOW_PATTERNS[int(rng.integers(len(FLOW_PATTERNS)))]
        spec = MotionSpec(float(dx), float(dy), kind, int(rng.integers(2**31)))
        pair = generate_sequence(spec, 2, size, size, scale=2, band=band)
        refs.append(pair.lr[0])
        srcs.append(pair.lr[1])
        flows.append(pair.gt_flow.backward.data[1])
    return np.stack(refs), np.stack(srcs), np.stack(flows)


def endpoint_loss(pred: Tensor, target: np.ndarray, eps: float = 1e-6) -> Tensor:
    """Mean over pixels of sqrt(|pred - target|^2 + eps^2); flows are [N,2,H,W]."""
    d = tt.sub(pred, Tensor(target))
    sq = tt.transpose(tt.mul(d, d), (1, 0, 2, 3))
    mag = tt.sqrt(tt.add(tt.add(tt.index(sq, 0), tt.index(sq, 1)), Tensor(np.array(eps * eps))))
    return tt.mean_all(mag)


def train_spynet(steps: int = 2000, batch: int = 4, lr: float = 1e-3, seed: int = 0, size: int = 32,
                 max_shift: float = 2.0, params: dict[str, Tensor] | None = None, progress=None):
    """Supervised endpoint-error training of the coarse-to-fine flow net on synthetic translations."""
    from .flow import init_spynet, spynet_lite

    rng = np.random.default_rng([seed, 5])
    if params is None:
        params = init_spynet(np.random.default_rng([seed, 2]))
    state = AdamState()
    losses = []
    with threadpool_limits(limits=1):
        for step in range(steps):
            ref, src, flow = flow_batch(rng, batch, size, max_shift)
            with tt.Tape() as tape:
                loss = endpoint_loss(spynet_lite(ref, src, params), flow)
            for p in params.values():
                p.grad = None
            tt.backward(tape, loss)
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            step_lr = lr * 0.5 * (1 + math.cos(math.pi * step / max(steps, 1)))
            adam_step(params, grads, state, step_lr)
            losses.append(loss.item())
            if progress and (step + 1) % 100 == 0:
                progress(step + 1, float(np.mean(losses[-100:])))
    return params, losses


# ---------------------------------------------------------------------------
# metrics

_Y = np.array([65.481, 128.553, 24.966]) / 255.0


def to_y(img) -> np.ndarray:
    """BT.601 luma in [16/255, 235/255] from RGB in [0,1] (channel axis -3)."""
    a = np.asarray(img, dtype=np.float64)
    if a.shape[-3] != 3:
        raise ShapeError(f"Y conversion needs 3 channels, got dims {list(a.shape)}")
    return 16 / 255.0 + np.einsum("c,...chw->...hw", _Y, a)


def _select(img, mode):
    if mode == "rgb":
        return np.asarray(img, dtype=np.float64)
    if mode == "y":
        return to_y(img)
    raise ValueError(f"channel mode must be 'rgb' or 'y', got {mode!r}")


def psnr_flagged(pred, target, mode: str = "rgb") -> tuple[float, bool]:
    """PSNR in dB (peak 1) and whether the images were identical (capped value)."""
    a, b = _select(pred, mode), _select(target, mode)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: dims {list(a.shape)} vs {list(b.shape)}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP, True
    return min(PSNR_CAP, 10 * math.log10(1.0 / mse)), False


def psnr(pred, target, mode: str = "rgb") -> float:
    return psnr_flagged(pred, target, mode)[0]


def _gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    k = len(g)
    win = np.lib.stride_tricks.sliding_window_view(img, k, axis=-1)
    out = win @ g
    win = np.lib.stride_tricks.sliding_window_view(out, k, axis=-2)
    return win @ g


def ssim(pred, target, k1=0.01, k2=0.03, size=11, sigma=1.5) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows; extra leading axes are averaged."""
    a = np.asarray(pred, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: dims {list(a.shape)} vs {list(b.shape)}")
    if a.ndim < 2 or a.shape[-1] < size or a.shape[-2] < size:
        raise ShapeError(f"ssim: frame {list(a.shape[-2:])} smaller than the {size}x{size} window")
    g = _gaussian_window(size, sigma)
    c1, c2 = k1 ** 2, k2 ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a ** 2
    sbb = _filter_valid(b * b, g) - mu_b ** 2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


@dataclass
class EvalReport:
    psnr: list
    ssim: list
    mode: str = "rgb"
    infinite: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def avg_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def avg_ssim(self) -> float:
        return float(np.mean(self.ssim))

    def rows(self):
        for i, (p, s) in enumerate(zip(self.psnr, self.ssim)):
            yield i, p, s


def score_sequence(pred, hr, mode="rgb") -> tuple[float, float, bool]:
    """Frame-averaged PSNR and SSIM of a [T,3,H,W] prediction."""
    ps, ss, inf = [], [], False
    for t in range(hr.shape[0]):
        p, flag = psnr_flagged(pred[t], hr[t], mode)
        ps.append(p)
        inf = inf or flag
        ss.append(ssim(_select(pred[t], mode), _select(hr[t], mode)))
    return float(np.mean(ps)), float(np.mean(ss)), inf


def _report(preds, pairs, mode, seconds) -> EvalReport:
    rep = EvalReport([], [], mode, [], seconds)
    for pred, pair in zip(preds, pairs):
        p, s, inf = score_sequence(pred, pair.hr, mode)
        rep.psnr.append(p)
        rep.ssim.append(s)
        rep.infinite.append(inf)
    return rep


def predict(params, cfg: ModelConfig, pair: SamplePair, ablation: str = "full") -> np.ndarray:
    flows = pair.gt_flow if cfg.flow_estimator == "ground_truth" else None
    return vsr_transformer_forward(Tensor(pair.lr), params, cfg, flows=flows, ablation=ablation, evaluate=True).data


def evaluate(params, cfg: ModelConfig, pairs: list[SamplePair], ablation: str = "full",
             mode: str = "rgb") -> EvalReport:
    t0 = time.perf_counter()
    preds = [predict(params, cfg, p, ablation) for p in pairs]
    return _report(preds, pairs, mode, time.perf_counter() - t0)


def bicubic_baseline(pairs: list[SamplePair], mode: str = "rgb") -> EvalReport:
    t0 = time.perf_counter()
    preds = [np.clip(bicubic_resample(p.lr, p.scale), 0.0, 1.0) for p in pairs]
    return _report(preds, pairs, mode, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(directory, params: dict[str, Tensor], cfg: ModelConfig,
                    train_cfg: TrainConfig | None = None, step: int = 0) -> Path:
    d = Path(directory)
    write_manifest(d, {k: p.data for k, p in params.items()})
    dump_config(cfg, d / "model.cfg")
    if train_cfg is not None:
        dump_config(train_cfg, d / "train.cfg")
    (d / "step.txt").write_text(f"{step}\n")
    return d


def load_checkpoint(directory) -> tuple[dict[str, Tensor], ModelConfig]:
    d = Path(directory)
    cfg = load_config(ModelConfig, d / "model.cfg")
    params = {k: Tensor(v, requires_grad=True) for k, v in read_manifest(d).items()}
    return params, cfg


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: dict
    log: list
    best_psnr: float
    best_step: int
    seconds: float


def _batch(pairs, cfg: TrainConfig, rng) -> list[SamplePair]:
    out = []
    for i in rng.integers(len(pairs), size=cfg.batch):
        s = crop_lr_patches(pairs[int(i)], cfg.crop, rng)
        out.append(augment(s, rng) if cfg.augment else s)
    return out


def train_step(params, model_cfg: ModelConfig, cfg: TrainConfig, batch: list[SamplePair]):
    """Mean Charbonnier loss over the batch and its parameter gradients."""
    grads: dict[str, np.ndarray] = {}
    total = 0.0
    use_gt = model_cfg.flow_estimator == "ground_truth"
    for s in batch:
        with tt.Tape() as tape:
            out = vsr_transformer_forward(Tensor(s.lr), params, model_cfg,
                                          flows=s.gt_flow if use_gt else None, ablation=cfg.ablation)
            loss = charbonnier_loss(out, s.hr, cfg.charbonnier_eps)
        for p in params.values():
            p.grad = None
        tt.backward(tape, loss)
        total += loss.item()
        for k, p in params.items():
            if p.grad is not None:
                g = p.grad.astype(np.float64) / len(batch)
                grads[k] = grads[k] + g if k in grads else g
    return total / len(batch), grads


LOG_HEADER = ("step", "lr", "loss", "psnr", "ssim")


def _write_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        w.writerows(rows)


def train(model_cfg: ModelConfig, cfg: TrainConfig, train_pairs: list[SamplePair],
          eval_pairs: list[SamplePair], out_dir, params: dict[str, Tensor] | None = None,
          progress=None) -> TrainResult:
    """Run ``cfg.iterations`` Adam steps, logging CSV and keeping best/last checkpoints.

    Deterministic for a fixed seed; BLAS is pinned to one thread. A non-finite
    loss raises ``TrainingAborted`` after saving the last finite parameters.
    """
    cfg.validate()
    model_cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    with threadpool_limits(limits=1):
        if params is None:
            params = init_params(model_cfg, cfg.seed, cfg.ablation)
        rng = np.random.default_rng([cfg.seed, 3])
        state = AdamState()
        rows = []
        best, best_step = -math.inf, 0
        good, good_step = params, 0

        def checkpoint_eval(step, lr, loss):
            nonlocal best, best_step
            rep = evaluate(params, model_cfg, eval_pairs, cfg.ablation)
            shown = "" if loss is None else f"{loss:.6f}"
            rows.append((step, f"{lr:.6e}", shown, f"{rep.avg_psnr:.4f}", f"{rep.avg_ssim:.5f}"))
            if rep.avg_psnr > best:
                best, best_step = rep.avg_psnr, step
                save_checkpoint(out / "best", params, model_cfg, cfg, step)
            if progress:
                progress(step, loss, rep.avg_psnr)

        if eval_pairs:
            checkpoint_eval(0, cosine_restart_lr(0, cfg), None)
        for step in range(1, cfg.iterations + 1):
            lr = cosine_restart_lr(step - 1, cfg)
            loss, grads = train_step(params, model_cfg, cfg, _batch(train_pairs, cfg, rng))
            if not math.isfinite(loss):
                rows.append((step, f"{lr:.6e}", "nan", "", ""))
                _write_log(out / "metrics.csv", rows)
                save_checkpoint(out / "last", good, model_cfg, cfg, good_step)
                raise TrainingAborted(f"non-finite loss at step {step}; kept parameters from step {good_step}")
            # parameters that just produced a finite loss
            good = {k: Tensor(p.data.copy()) for k, p in params.items()}
            good_step = step - 1
            adam_step(params, grads, state, lr, cfg.betas)
            if eval_pairs and (step % cfg.eval_every == 0 or step == cfg.iterations):
                checkpoint_eval(step, lr, loss)
            else:
                rows.append((step, f"{lr:.6e}", f"{loss:.6f}", "", ""))
        save_checkpoint(out / "last", params, model_cfg, cfg, cfg.iterations)
        if not eval_pairs:
            save_checkpoint(out / "best", params, model_cfg, cfg, cfg.iterations)
        _write_log(out / "metrics.csv", rows)
    return TrainResult(params, rows, best, best_step, time.perf_counter() - t0)
