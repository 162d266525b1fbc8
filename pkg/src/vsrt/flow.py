"""Bidirectional optical flow with start/end self-flow boundary conditions.

Sign convention: ``bilinear_warp(x, flow)(p)`` samples ``x`` at ``p + flow(p)``,
and an estimator call ``s(ref, src)`` returns the flow for which
``warp(src, flow) ~= ref``. Hence ``warp(V_t, backward_t) ~= V_{t-1}``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tt
from .resample import avg_pool2
from .serialize import FormatError, read_manifest, write_manifest
from .tensor import Tensor


class UnsupportedError(RuntimeError):
    pass


@dataclass
class FlowPair:
    backward: Tensor  # [T,2,H,W]
    forward: Tensor  # [T,2,H,W]

    @classmethod
    def zeros(cls, t, h, w):
        return cls(Tensor(np.zeros((t, 2, h, w))), Tensor(np.zeros((t, 2, h, w))))

    def numpy(self):
        return self.backward.data, self.forward.data

    def save(self, directory):
        """One VSRT tensor per direction, tagged ``direction=`` in the manifest."""
        tensors = {"flow_backward": self.backward.data, "flow_forward": self.forward.data}
        tags = {"flow_backward": {"direction": "backward"}, "flow_forward": {"direction": "forward"}}
        return write_manifest(directory, tensors, tags)

    @classmethod
    def load(cls, directory):
        tensors, tags = read_manifest(directory, with_tags=True)
        by_dir = {tags[name].get("direction"): arr for name, arr in tensors.items()}
        if set(by_dir) != {"backward", "forward"}:
            raise FormatError(f"flow manifest in {directory} needs direction=backward and direction=forward")
        return cls(Tensor(by_dir["backward"]), Tensor(by_dir["forward"]))


class Estimator:
    """Flow estimator ``s(ref, src)`` evaluated on index pairs of a frame sequence."""

    def flows(self, frames: Tensor, refs: Sequence[int], srcs: Sequence[int]) -> Tensor:
        raise NotImplementedError


class IdentityEstimator(Estimator):
    def flows(self, frames, refs, srcs):
        _, _, h, w = frames.shape
        return Tensor(np.zeros((len(refs), 2, h, w)))


class GroundTruthEstimator(Estimator):
    """Exact flows for synthetic sequences translating by ``shift`` (LR pixels) per frame."""

    def __init__(self, shift: tuple[float, float] | None):
        self.shift = shift

    def flows(self, frames, refs, srcs):
        if self.shift is None:
            raise UnsupportedError("ground-truth flow needs a synthetic motion spec")
        _, _, h, w = frames.shape
        out = np.zeros((len(refs), 2, h, w))
        for i, (r, s) in enumerate(zip(refs, srcs)):
            out[i, 0] = (s - r) * self.shift[0]
            out[i, 1] = (s - r) * self.shift[1]
        return Tensor(out)


def estimate_bidirectional(frames: Tensor, estimator: Estimator) -> FlowPair:
    """backward_t = s(V_{t-1}, V_t), backward_1 = s(V_1, V_1);
    forward_t = s(V_{t+1}, V_t), forward_T = s(V_T, V_T)."""
    t = frames.shape[0]
    if t < 1:
        raise ValueError("need at least one frame")
    src = list(range(t))
    ref_b = [max(i - 1, 0) for i in src]
    ref_f = [min(i + 1, t - 1) for i in src]
    both = estimator.flows(frames, ref_b + ref_f, src + src)
    return FlowPair(_rows(both, 0, t), _rows(both, t, 2 * t))


def _rows(x: Tensor, a: int, b: int) -> Tensor:
    if a == 0 and b == x.shape[0]:
        return x
    return tt.stack([tt.index(x, i) for i in range(a, b)], axis=0)


# ---------------------------------------------------------------------------
# reduced coarse-to-fine flow network

SPY_LEVELS = 3
SPY_WIDTH = 16
SPY_LAYERS = 5
INPUT_GAIN = 4.0


def init_spynet(rng: np.random.Generator, levels: int = SPY_LEVELS, width: int = SPY_WIDTH,
                prefix: str = "spynet") -> dict[str, Tensor]:
    params = {}
    for lvl in range(levels):
        chans = [8] + [width] * (SPY_LAYERS - 1) + [2]
        for j in range(SPY_LAYERS):
            cin, cout = chans[j], chans[j + 1]
            bound = np.sqrt(1.0 / (cin * 9))
            w = rng.uniform(-bound, bound, (cout, cin, 3, 3))
            if j == SPY_LAYERS - 1:
                w = np.zeros_like(w)
            params[f"{prefix}.{lvl}.{j}.w"] = Tensor(w, requires_grad=True)
            params[f"{prefix}.{lvl}.{j}.b"] = Tensor(np.zeros(cout), requires_grad=True)
    return params


def _upsample2_kernel(c: int) -> np.ndarray:
    # Bilinear x2 (half-pixel centres) as a 3x3 conv emitting the 4 sub-pixel phases,
    # followed by pixel_shuffle. Channel layout c*4 + i*2 + j.
    taps = {0: {-1: 0.25, 0: 0.75}, 1: {0: 0.75, 1: 0.25}}
    k = np.zeros((c * 4, c, 3, 3))
    for ch in range(c):
        for i in (0, 1):
            for j in (0, 1):
                for dy, wy in taps[i].items():
                    for dx, wx in taps[j].items():
                        k[ch * 4 + i * 2 + j, ch, dy + 1, dx + 1] = wy * wx
    return k


def upsample2(x: Tensor) -> Tensor:
    """Differentiable bilinear x2 upsampling of [N,C,H,W] with renormalised borders."""
    n, c, h, w = x.shape
    k = Tensor(_upsample2_kernel(c))
    up = tt.pixel_shuffle(tt.conv2d(x, k, padding=1), 2)
    ones = np.ones((1, c, h, w))
    norm = tt.pixel_shuffle(tt.conv2d(Tensor(ones), k, padding=1), 2).data
    return tt.mul(up, Tensor(1.0 / norm))


def spynet_lite(ref, src, params: dict[str, Tensor], levels: int = SPY_LEVELS,
                slope: float = 0.1, prefix: str = "spynet") -> Tensor:
    """Flow [N,2,H,W] such that warp(src, flow) ~= ref; ``ref``/``src`` are [N,3,H,W].

    Accepts unbatched [3,H,W] inputs as well and then returns [2,H,W].
    """
    ref = ref.data if isinstance(ref, Tensor) else np.asarray(ref)
    src = src.data if isinstance(src, Tensor) else np.asarray(src)
    # centred, roughly unit-variance inputs train far faster than raw [0,1] intensities
    ref, src = (ref - 0.5) * INPUT_GAIN, (src - 0.5) * INPUT_GAIN
    squeeze = ref.ndim == 3
    if squeeze:
        ref, src = ref[None], src[None]
    n, _, h, w = ref.shape
    div = 2 ** (levels - 1)
    if h % div or w % div:
        raise tt.ShapeError(f"spynet_lite: {h}x{w} not divisible by {div}")
    pyr = [(ref, src)]
    for _ in range(levels - 1):
        r, s = pyr[-1]
        pyr.append((avg_pool2(r), avg_pool2(s)))
    flow = None
    for lvl in reversed(range(levels)):
        r, s = pyr[lvl]
        lh, lw = r.shape[-2:]
        if flow is None:
            flow = Tensor(np.zeros((n, 2, lh, lw)))
        else:
            flow = tt.scale(upsample2(flow), 2.0)
        warped = tt.bilinear_warp(Tensor(s), flow)
        z = tt.concat([Tensor(r), warped, flow], axis=1)
        for j in range(SPY_LAYERS):
            z = tt.conv2d(z, params[f"{prefix}.{lvl}.{j}.w"], params[f"{prefix}.{lvl}.{j}.b"], padding=1)
            if j < SPY_LAYERS - 1:
                z = tt.leaky_relu(z, slope)
        flow = tt.add(flow, z)
    return tt.index(flow, 0) if squeeze else flow


class SpyNetEstimator(Estimator):
    def __init__(self, params: dict[str, Tensor], prefix: str = "spynet"):
        self.params = params
        self.prefix = prefix

    def flows(self, frames, refs, srcs):
        fd = frames.data
        return spynet_lite(fd[list(refs)], fd[list(srcs)], self.params, prefix=self.prefix)


def endpoint_error(pred, true) -> float:
    p = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    t = true.data if isinstance(true, Tensor) else np.asarray(true)
    d = p.astype(np.float64) - t
    return float(np.mean(np.sqrt((d ** 2).sum(axis=-3))))


def make_estimator(kind: str, params: dict[str, Tensor] | None = None, shift=None) -> Estimator:
    if kind == "identity":
        return IdentityEstimator()
    if kind == "ground_truth":
        return GroundTruthEstimator(shift)
    if kind == "spynet":
        if params is None:
            raise ValueError("spynet estimator needs parameters")
        return SpyNetEstimator(params)
    raise ValueError(f"unknown flow estimator {kind!r}")
