"""Central-difference checks for every registered op and for the tiny end-to-end model.

Everything runs in float64 storage; each case reduces the op output to a
scalar through a fixed random projection so that all output entries matter.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tt
from .flow import FlowPair
from .model import ModelConfig, init_params, vsr_transformer_forward
from .tensor import Tensor

TOLERANCE = 1e-3
STEP = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    checked: int
    seconds: float
    frozen: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name:<40} {self.max_rel_error:.3e}  {self.checked:>5}  {self.frozen:>6}  {status}"


def _away_from_zero(rng, shape, lo=0.1):
    return rng.uniform(lo, 1.0, shape) * rng.choice([-1.0, 1.0], shape)


def _fractional_flow(rng, shape, max_int=1):
    # keep sample positions away from integer grid lines where bilinear weights kink
    ints = rng.integers(-max_int, max_int + 1, shape)
    return ints + rng.uniform(0.15, 0.85, shape)


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[Tensor]]]:
    """name -> (function of the listed tensors returning an op output, inputs)."""
    u = lambda *s: Tensor(rng.uniform(-1.0, 1.0, s), requires_grad=True)
    cases = {
        "add": (tt.add, [u(3, 4), u(4)]),
        "sub": (tt.sub, [u(2, 3, 4), u(3, 1)]),
        "mul": (tt.mul, [u(3, 4), u(1, 4)]),
        "scale": (lambda a: tt.scale(a, -1.7), [u(5)]),
        "sqrt": (tt.sqrt, [Tensor(rng.uniform(0.2, 2.0, (6,)), requires_grad=True)]),
        "sum_all": (tt.sum_all, [u(3, 5)]),
        "mean_all": (tt.mean_all, [u(4, 2)]),
        "reshape": (lambda a: tt.reshape(a, (6, 2)), [u(3, 4)]),
        "transpose": (lambda a: tt.transpose(a, (2, 0, 1)), [u(2, 3, 4)]),
        "concat": (lambda a, b: tt.concat([a, b], axis=1), [u(2, 3), u(2, 2)]),
        "stack": (lambda a, b: tt.stack([a, b], axis=0), [u(3, 2), u(3, 2)]),
        "index": (lambda a: tt.index(a, 1), [u(3, 2, 2)]),
        "matmul": (tt.matmul, [u(3, 4), u(4, 5)]),
        "softmax_columns": (tt.softmax_columns, [Tensor(rng.normal(0, 2, (5, 4)), requires_grad=True)]),
        "layer_norm": (lambda x, g, b: tt.layer_norm(x, g, b, 1e-5, axis=1), [u(2, 6, 3, 3), u(6, 1, 1), u(6, 1, 1)]),
        "relu": (tt.relu, [Tensor(_away_from_zero(rng, (4, 5)), requires_grad=True)]),
        "leaky_relu": (lambda x: tt.leaky_relu(x, 0.01), [Tensor(_away_from_zero(rng, (4, 5)), requires_grad=True)]),
        "conv2d": (lambda x, w, b: tt.conv2d(x, w, b, stride=1, padding=1), [u(2, 3, 5, 4), u(4, 3, 3, 3), u(4)]),
        "unfold": (lambda x: tt.unfold(x, (2, 2), 2), [u(2, 3, 4, 6)]),
        "fold": (lambda p: tt.fold(p, (2, 3, 4, 4), 1), [u(18, 3, 2, 2)]),
        "pixel_shuffle": (lambda x: tt.pixel_shuffle(x, 2), [u(2, 8, 3, 3)]),
        "bilinear_warp": (tt.bilinear_warp, [u(2, 3, 6, 6), Tensor(_fractional_flow(rng, (2, 2, 6, 6)), requires_grad=True)]),
    }
    return cases


def _same_pattern(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _kink_safe_differences(fn, t: Tensor, order: np.ndarray, want: int, h: float):
    """Central differences at ``want`` entries, holding relu sign patterns fixed if the stencil crosses one.

    Returns (entries, derivatives, frozen) where ``frozen`` counts entries that
    needed the base sign pattern replayed.
    """
    with tt.record_kinks() as base:
        fn()
    flat = t.data.reshape(-1)
    idx = order[:want]
    values, frozen = [], 0

    def stencil(i, replay):
        old = flat[i]
        out = []
        for step in (h, -h):
            flat[i] = old + step
            with tt.record_kinks() as seen:
                if replay:
                    with tt.replay_kinks(base):
                        f = fn().item()
                else:
                    f = fn().item()
            out.append((f, seen))
        flat[i] = old
        return out

    for i in idx:
        (fp, up), (fm, down) = stencil(i, False)
        if not (_same_pattern(base, up) and _same_pattern(base, down)):
            (fp, _), (fm, _) = stencil(i, True)
            frozen += 1
        values.append((fp - fm) / (2 * h))
    return idx, np.asarray(values), frozen


def check_function(name: str, fn: Callable[[], Tensor], inputs: list[Tensor], max_entries: int | None = None,
                   rng: np.random.Generator | None = None, h: float = STEP,
                   kink_safe: bool = False) -> CheckResult:
    """Compare reverse-mode gradients of scalar ``fn()`` with central differences.

    With ``kink_safe`` an entry whose difference stencil flips a relu sign is
    re-measured with the sign pattern of the unperturbed point held fixed.
    """
    t0 = time.perf_counter()
    for t in inputs:
        t.grad = None
    with tt.Tape() as tape:
        loss = fn()
    tt.backward(tape, loss)
    worst, count, held = 0.0, 0, 0
    for t in inputs:
        want = t.size if max_entries is None else min(max_entries, t.size)
        order = np.arange(t.size) if rng is None else rng.permutation(t.size)
        if kink_safe:
            idx, numeric, frozen = _kink_safe_differences(fn, t, order, want, h)
            held += frozen
        else:
            idx = order[:want]
            numeric = tt.numeric_grad(fn, t, idx, h)
        analytic = np.zeros(len(idx)) if t.grad is None else t.grad.reshape(-1)[idx]
        worst = max(worst, tt.relative_error(analytic, numeric))
        count += len(idx)
    return CheckResult(name, worst, count, time.perf_counter() - t0, held)


def check_ops(seed: int = 0) -> list[CheckResult]:
    out = []
    with tt.precision(np.float64):
        rng = np.random.default_rng(seed)
        cases = op_cases(rng)
        missing = set(tt.DIFFERENTIABLE_OPS) - set(cases)
        if missing:
            raise KeyError(f"no gradient check case for ops {sorted(missing)}")
        for name in sorted(tt.DIFFERENTIABLE_OPS):
            op, inputs = cases[name]
            proj_rng = np.random.default_rng([seed, len(name)])
            probe = op(*inputs)
            w = Tensor(proj_rng.uniform(-1.0, 1.0, probe.shape))
            fn = (lambda op=op, inputs=inputs, w=w: tt.sum_all(tt.mul(op(*inputs), w)))
            out.append(check_function(name, fn, inputs))
    return out


def tiny_config() -> ModelConfig:
    return ModelConfig(frames=2, channels=6, extractor_blocks=1, recon_blocks=1, prop_blocks=1, ff_hidden=8)


def check_model(seed: int = 0, ablation: str = "full", entries_per_tensor: int = 6,
                size: int = 4, only: Callable[[str], bool] | None = None) -> list[CheckResult]:
    """Charbonnier loss of the T=2, C=6, 4x4 model against every parameter tensor."""
    from .train import charbonnier_loss

    cfg = tiny_config()
    out = []
    with tt.precision(np.float64):
        rng = np.random.default_rng(seed)
        params = init_params(cfg, seed, ablation)
        # the standard init zeroes the output conv; give it weights so gradients reach every layer
        for name in ("recon.out.w", "recon.out.b"):
            params[name].data = rng.uniform(-0.3, 0.3, params[name].shape)
        frames = Tensor(rng.uniform(0.0, 1.0, (cfg.frames, 3, size, size)))
        flows = FlowPair(Tensor(_fractional_flow(rng, (cfg.frames, 2, size, size), 0) * 0.8),
                         Tensor(-_fractional_flow(rng, (cfg.frames, 2, size, size), 0) * 0.8))
        y0 = vsr_transformer_forward(frames, params, cfg, flows=flows, ablation=ablation).data
        # residuals bounded away from zero keep the loss smooth at the difference step
        offset = rng.uniform(0.1, 0.5, y0.shape) * rng.choice([-1.0, 1.0], y0.shape)
        target = Tensor(y0 + offset)

        def fn():
            y = vsr_transformer_forward(frames, params, cfg, flows=flows, ablation=ablation)
            return charbonnier_loss(y, target)

        pick = np.random.default_rng([seed, 99])
        tag = "model" if ablation == "full" else f"model[{ablation}]"
        for name in sorted(params):
            if only is not None and not only(name):
                continue
            out.append(check_function(f"{tag}:{name}", fn, [params[name]], entries_per_tensor, pick,
                                      kink_safe=True))
    return out


def model_checks(seed: int = 0) -> list[CheckResult]:
    # the token feed-forward that replaces BOFF only exists in that ablation
    return check_model(seed) + check_model(seed, "no_boff", only=lambda name: ".ff." in name)


HEADER = f"{'check':<40} {'max_rel_err':>9}  {'n':>5}  {'frozen':>6}  status"


def run(scope: str = "ops", seed: int = 0) -> list[CheckResult]:
    if scope == "ops":
        return check_ops(seed)
    if scope == "model":
        return model_checks(seed)
    if scope == "all":
        return check_ops(seed) + model_checks(seed)
    raise ValueError(f"gradcheck scope must be ops, model or all, got {scope!r}")
