"""VSR-Transformer layers and the assembled super-resolution model.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names, e.g.
``blocks.0.stcsa.q.0.w``. Every function here is a pure function of its inputs
and that dict, so the same code serves training, inference and the oracles in
the test-suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .flow import FlowPair, estimate_bidirectional, init_spynet, make_estimator
from .resample import bicubic_resample, bilinear_upsample
from .tensor import Tensor

ABLATIONS = ("full", "no_stcsa", "no_boff", "no_flow")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    frames: int = 3
    channels: int = 12
    scale: int = 4
    patch_w: int = 2
    patch_h: int = 2
    stride: int = 2
    heads: int = 1
    extractor_blocks: int = 2
    recon_blocks: int = 4
    prop_blocks: int = 4
    num_transformer_blocks: int | None = None
    leaky_slope: float = 0.01
    ln_eps: float = 1e-5
    ff_hidden: int = 24
    use_pe: bool = True
    pe_every_block: bool = False
    boff_concat: str = "frames"
    boff_align: str = "neighbour"
    global_residual: str = "bilinear"
    flow_estimator: str = "ground_truth"

    def __post_init__(self):
        if self.num_transformer_blocks is None:
            self.num_transformer_blocks = self.frames
        self.validate()

    def validate(self):
        if self.use_pe and self.channels % 6:
            raise ConfigError(f"channels={self.channels} must be divisible by 6 for the positional encoding")
        if self.scale < 1 or self.scale & (self.scale - 1):
            raise ConfigError(f"scale={self.scale} must be a power of 2")
        if self.frames < 1 or self.heads < 1:
            raise ConfigError("frames and heads must be positive")
        if self.boff_concat not in ("frames", "value"):
            raise ConfigError(f"boff_concat must be frames|value, got {self.boff_concat!r}")
        if self.boff_align not in ("neighbour", "self"):
            raise ConfigError(f"boff_align must be neighbour|self, got {self.boff_align!r}")
        if self.global_residual not in ("bilinear", "bicubic"):
            raise ConfigError(f"global_residual must be bilinear|bicubic, got {self.global_residual!r}")
        if self.flow_estimator not in ("identity", "ground_truth", "spynet"):
            raise ConfigError(f"unknown flow_estimator {self.flow_estimator!r}")


def full_size_config(frames: int = 5) -> ModelConfig:
    """Full-size architecture: 64 channels, 5 extractor / 30 reconstruction / 30 propagation blocks.

    64 is not a multiple of 6, so this config carries no positional encoding;
    the encoding has no parameters and the parameter count is unaffected.
    """
    return ModelConfig(frames=frames, channels=64, extractor_blocks=5, recon_blocks=30,
                       prop_blocks=30, ff_hidden=128, use_pe=False)


# ---------------------------------------------------------------------------
# initialisation


RES_INIT = 0.1
ATTN_OUT_INIT = 1.0
ZERO_OUT = True


def _conv(params, rng, name, cin, cout, k=3, zero=False, gain=1.0):
    bound = math.sqrt(1.0 / (cin * k * k))
    w = rng.uniform(-bound, bound, (cout, cin, k, k)) * gain
    if zero:
        w = np.zeros_like(w)
    params[f"{name}.w"] = Tensor(w, requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True)


def _linear(params, rng, name, din, dout, bias=True):
    bound = math.sqrt(1.0 / din)
    params[f"{name}.w"] = Tensor(rng.uniform(-bound, bound, (dout, din)), requires_grad=True)
    if bias:
        params[f"{name}.b"] = Tensor(np.zeros(dout), requires_grad=True)


def _norm(params, name, c):
    params[f"{name}.gain"] = Tensor(np.ones(c), requires_grad=True)
    params[f"{name}.shift"] = Tensor(np.zeros(c), requires_grad=True)


def _resblock(params, rng, name, c):
    # small branch init keeps deep residual stacks close to identity at the start
    _conv(params, rng, f"{name}.conv1", c, c, gain=RES_INIT)
    _conv(params, rng, f"{name}.conv2", c, c, gain=RES_INIT)


def init_stcsa(params, rng, name, cfg: ModelConfig):
    c = cfg.channels
    for h in range(cfg.heads):
        for part in ("q", "k", "v"):
            _conv(params, rng, f"{name}.{part}.{h}", c, c)
        _conv(params, rng, f"{name}.o.{h}", c, c, gain=ATTN_OUT_INIT)
    _norm(params, f"{name}.norm", c)


def init_boff(params, rng, name, cfg: ModelConfig):
    c = cfg.channels
    cin = c + 3 if cfg.boff_concat == "frames" else 2 * c
    for direction in ("bwd", "fwd"):
        _conv(params, rng, f"{name}.{direction}.head", cin, c)
        for j in range(cfg.prop_blocks):
            _resblock(params, rng, f"{name}.{direction}.res.{j}", c)
    _conv(params, rng, f"{name}.fuse", 2 * c, c, k=1)
    _norm(params, f"{name}.norm", c)


def init_token_ff(params, rng, name, d, r):
    _linear(params, rng, f"{name}.fc1", d, r)
    _linear(params, rng, f"{name}.fc2", r, d)
    _norm(params, f"{name}.norm", d)


def init_fcsa(params, rng, name, d, m, heads=1):
    for h in range(heads):
        for part in ("q", "k", "v"):
            _linear(params, rng, f"{name}.{part}.{h}", d, m, bias=False)
        _linear(params, rng, f"{name}.o.{h}", m, d, bias=False)
    _norm(params, f"{name}.norm", d)


def init_params(cfg: ModelConfig, seed: int = 0, ablation: str = "full") -> dict[str, Tensor]:
    """Uniform +-sqrt(1/fan_in) weights, zero biases, unit norm gains.

    The main parameter stream does not depend on ``ablation``, so paired
    ablation runs share the initial values of every parameter they have in common.
    """
    if ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation {ablation!r}")
    rng = np.random.default_rng(seed)
    p: dict[str, Tensor] = {}
    c = cfg.channels
    _conv(p, rng, "extractor.stem", 3, c)
    for j in range(cfg.extractor_blocks):
        _resblock(p, rng, f"extractor.res.{j}", c)
    for b in range(cfg.num_transformer_blocks):
        init_stcsa(p, rng, f"blocks.{b}.stcsa", cfg)
        init_boff(p, rng, f"blocks.{b}.boff", cfg)
    for j in range(cfg.recon_blocks):
        _resblock(p, rng, f"recon.res.{j}", c)
    for s in range(int(math.log2(cfg.scale))):
        _conv(p, rng, f"recon.up.{s}", c, 4 * c)
    _conv(p, rng, "recon.out", c, 3, zero=ZERO_OUT)

    if ablation == "no_stcsa":
        p = {k: v for k, v in p.items() if ".stcsa." not in k}
    if ablation == "no_boff":
        p = {k: v for k, v in p.items() if ".boff." not in k}
        ff_rng = np.random.default_rng([seed, 1])
        for b in range(cfg.num_transformer_blocks):
            init_token_ff(p, ff_rng, f"blocks.{b}.ff", c, cfg.ff_hidden)
    if cfg.flow_estimator == "spynet" and ablation != "no_flow":
        p.update(init_spynet(np.random.default_rng([seed, 2])))
    return p


def zero_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(np.zeros(v.shape), requires_grad=True) for k, v in params.items()}


def count_params(params: dict[str, Tensor]) -> int:
    return sum(v.size for v in params.values())


# ---------------------------------------------------------------------------
# building blocks


def conv(x, params, name, padding=1):
    return tt.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], padding=padding)


def norm(x, params, name, eps, axis=1):
    return tt.layer_norm(x, params[f"{name}.gain"], params[f"{name}.shift"], eps, axis=axis)


def resblock(x, params, name, slope):
    y = tt.leaky_relu(conv(x, params, f"{name}.conv1"), slope)
    return tt.add(x, conv(y, params, f"{name}.conv2"))


def positional_encoding(t: int, c: int, h: int, w: int) -> np.ndarray:
    """Fixed 3-D sinusoidal encoding [T,C,H,W]: channel thirds for (time, row, column)."""
    if c % 6:
        raise ConfigError(f"positional encoding needs channels divisible by 6, got {c}")
    g = c // 3
    alpha = 1.0 / 10000 ** (2 * np.arange(g // 2) / g)

    def enc(n):
        pos = np.arange(n)[:, None] * alpha[None, :]
        out = np.empty((n, g))
        out[:, 0::2] = np.sin(pos)
        out[:, 1::2] = np.cos(pos)
        return out

    pe = np.zeros((t, c, h, w))
    pe[:, :g] = enc(t)[:, :, None, None]
    pe[:, g:2 * g] = enc(h).T[None, :, :, None]
    pe[:, 2 * g:] = enc(w).T[None, :, None, :]
    return pe.astype(np.float32)


def _patch_matrix(x: Tensor, cfg: ModelConfig) -> Tensor:
    """[T,C,H,W] -> [d, N] with one column per patch, element order (channel, row, column)."""
    p = tt.unfold(x, (cfg.patch_w, cfg.patch_h), cfg.stride)
    n = p.shape[0]
    return tt.transpose(tt.reshape(p, (n, -1)), (1, 0))


def stcsa_forward(x: Tensor, params, cfg: ModelConfig, name="stcsa", return_value=False):
    """Convolutional self-attention over unfolded spatio-temporal patches.

    Q, K, V come from 3x3 convolutions; attention weights are the column softmax
    of K^T Q over all T*N_t patches, applied to the value patches, folded back,
    passed through the output conv, added to the input and layer-normalised.
    """
    t, c, h, w = x.shape
    total = None
    value = None
    for head in range(cfg.heads):
        q = _patch_matrix(conv(x, params, f"{name}.q.{head}"), cfg)
        k = _patch_matrix(conv(x, params, f"{name}.k.{head}"), cfg)
        vmap = conv(x, params, f"{name}.v.{head}")
        if value is None:
            value = vmap
        v = _patch_matrix(vmap, cfg)
        attn = tt.softmax_columns(tt.matmul(tt.transpose(k, (1, 0)), q))
        mixed = tt.matmul(v, attn)
        n = mixed.shape[1]
        patches = tt.reshape(tt.transpose(mixed, (1, 0)), (n, c, cfg.patch_h, cfg.patch_w))
        folded = tt.fold(patches, (t, c, h, w), cfg.stride)
        y = conv(folded, params, f"{name}.o.{head}")
        total = y if total is None else tt.add(total, y)
    out = norm(tt.add(x, total), params, f"{name}.norm", cfg.ln_eps)
    return (out, value) if return_value else out


def fcsa_forward(x: Tensor, params, name="fcsa", heads=1, eps=1e-5):
    """Fully connected self-attention on token matrix [d, n] (baseline)."""
    total = None
    for h in range(heads):
        q = tt.matmul(params[f"{name}.q.{h}.w"], x)
        k = tt.matmul(params[f"{name}.k.{h}.w"], x)
        v = tt.matmul(params[f"{name}.v.{h}.w"], x)
        attn = tt.softmax_columns(tt.matmul(tt.transpose(k, (1, 0)), q))
        y = tt.matmul(params[f"{name}.o.{h}.w"], tt.matmul(v, attn))
        total = y if total is None else tt.add(total, y)
    return norm(tt.add(x, total), params, f"{name}.norm", eps, axis=0)


def token_feedforward(x: Tensor, params, name="ff", eps=1e-5):
    """Token-wise two-layer MLP with skip and layer norm on [d, n]; columns are independent."""
    d = x.shape[0]
    r = params[f"{name}.fc1.w"].shape[0]
    hdn = tt.add(tt.matmul(params[f"{name}.fc1.w"], x), tt.reshape(params[f"{name}.fc1.b"], (r, 1)))
    y = tt.add(tt.matmul(params[f"{name}.fc2.w"], tt.relu(hdn)), tt.reshape(params[f"{name}.fc2.b"], (d, 1)))
    return norm(tt.add(x, y), params, f"{name}.norm", eps, axis=0)


def video_tokens(x: Tensor) -> Tensor:
    t, c, h, w = x.shape
    return tt.reshape(tt.transpose(x, (1, 0, 2, 3)), (c, t * h * w))


def untokens(z: Tensor, shape) -> Tensor:
    t, c, h, w = shape
    return tt.transpose(tt.reshape(z, (c, t, h, w)), (1, 0, 2, 3))


def propagation(z: Tensor, params, name, cfg: ModelConfig) -> Tensor:
    y = tt.leaky_relu(conv(z, params, f"{name}.head"), cfg.leaky_slope)
    for j in range(cfg.prop_blocks):
        y = resblock(y, params, f"{name}.res.{j}", cfg.leaky_slope)
    return y


def aligned_streams(x: Tensor, flows: FlowPair, align: str = "neighbour") -> tuple[Tensor, Tensor]:
    """Backward and forward feature streams for the propagation stacks.

    ``neighbour``: stream_b[t] = warp(x[t+1], backward[t+1]) and
    stream_f[t] = warp(x[t-1], forward[t-1]), i.e. the adjacent frame's features
    resampled onto frame t. The end frames have no such neighbour and warp their
    own features by the self-flow (forward[T-1] resp. backward[0]).
    ``self``: each frame's features warped by its own flow entry.
    """
    if align == "self":
        return tt.bilinear_warp(x, flows.backward), tt.bilinear_warp(x, flows.forward)
    t = x.shape[0]
    frames = [tt.index(x, i) for i in range(t)]
    bwd = [tt.index(flows.backward, i) for i in range(t)]
    fwd = [tt.index(flows.forward, i) for i in range(t)]
    src_b = tt.stack(frames[1:] + frames[-1:], axis=0)
    flow_b = tt.stack(bwd[1:] + fwd[-1:], axis=0)
    src_f = tt.stack(frames[:1] + frames[:-1], axis=0)
    flow_f = tt.stack(bwd[:1] + fwd[:-1], axis=0)
    return tt.bilinear_warp(src_b, flow_b), tt.bilinear_warp(src_f, flow_f)


def boff_forward(x_attn: Tensor, frames: Tensor, flows: FlowPair, params, cfg: ModelConfig,
                 name="boff", value: Tensor | None = None) -> Tensor:
    """Flow-warped bidirectional propagation feed-forward with fusion, skip and norm."""
    t, c, h, w = x_attn.shape
    for f in (flows.backward, flows.forward):
        if f.shape != (t, 2, h, w):
            raise tt.ShapeError(f"flow dims {f.dims} do not match features {x_attn.dims}")
    xb, xf = aligned_streams(x_attn, flows, cfg.boff_align)
    side = frames if cfg.boff_concat == "frames" else value
    if side is None:
        raise ConfigError("boff_concat=value needs the attention value tensor")
    rb = propagation(tt.concat([side, xb], axis=1), params, f"{name}.bwd", cfg)
    rf = propagation(tt.concat([side, xf], axis=1), params, f"{name}.fwd", cfg)
    fused = tt.leaky_relu(conv(tt.concat([rb, rf], axis=1), params, f"{name}.fuse", padding=0),
                          cfg.leaky_slope)
    return norm(tt.add(x_attn, fused), params, f"{name}.norm", cfg.ln_eps)


def feature_extractor(frames: Tensor, params, cfg: ModelConfig) -> Tensor:
    x = conv(frames, params, "extractor.stem")
    for j in range(cfg.extractor_blocks):
        x = resblock(x, params, f"extractor.res.{j}", cfg.leaky_slope)
    return x


def upsample_frames(frames: np.ndarray, scale: int, mode: str = "bilinear") -> np.ndarray:
    if mode == "bicubic":
        return bicubic_resample(frames, scale)
    return bilinear_upsample(frames, scale)


def reconstruct(features: Tensor, frames: Tensor, params, cfg: ModelConfig) -> Tensor:
    x = features
    for j in range(cfg.recon_blocks):
        x = resblock(x, params, f"recon.res.{j}", cfg.leaky_slope)
    for s in range(int(math.log2(cfg.scale))):
        x = tt.leaky_relu(tt.pixel_shuffle(conv(x, params, f"recon.up.{s}"), 2), cfg.leaky_slope)
    x = conv(x, params, "recon.out")
    base = upsample_frames(frames.data, cfg.scale, cfg.global_residual)
    return tt.add(x, Tensor(base))


def compute_flows(frames: Tensor, params, cfg: ModelConfig, ablation="full", shift=None) -> FlowPair:
    t, _, h, w = frames.shape
    if ablation == "no_flow" or cfg.flow_estimator == "identity":
        return FlowPair.zeros(t, h, w)
    return estimate_bidirectional(frames, make_estimator(cfg.flow_estimator, params, shift))


def vsr_transformer_forward(frames, params, cfg: ModelConfig, flows: FlowPair | None = None,
                            ablation: str = "full", evaluate: bool = False, shift=None) -> Tensor:
    """LR frames [T,3,H,W] -> HR frames [T,3,sH,sW].

    Flows are estimated once from the LR frames and shared by all blocks. With
    ``evaluate`` the output is clamped to [0, 1] (no gradient).
    """
    frames = tt.as_tensor(frames)
    t, _, h, w = frames.shape
    x = feature_extractor(frames, params, cfg)
    pe = Tensor(positional_encoding(t, cfg.channels, h, w)) if cfg.use_pe else None
    if pe is not None:
        x = tt.add(x, pe)
    if ablation == "no_flow":
        flows = FlowPair.zeros(t, h, w)
    elif flows is None:
        flows = compute_flows(frames, params, cfg, ablation, shift)
    for b in range(cfg.num_transformer_blocks):
        if b and pe is not None and cfg.pe_every_block:
            x = tt.add(x, pe)
        value = None
        if ablation != "no_stcsa":
            x, value = stcsa_forward(x, params, cfg, f"blocks.{b}.stcsa", return_value=True)
        if ablation == "no_boff":
            x = untokens(token_feedforward(video_tokens(x), params, f"blocks.{b}.ff", cfg.ln_eps), x.shape)
        else:
            x = boff_forward(x, frames, flows, params, cfg, f"blocks.{b}.boff", value=value)
    out = reconstruct(x, frames, params, cfg)
    if evaluate:
        return Tensor(np.clip(out.data, 0.0, 1.0))
    return out
