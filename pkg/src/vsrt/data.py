"""Synthetic translating videos with exact flows, PPM frame I/O, crops and augmentation.

Patterns are evaluated analytically at continuous coordinates, so a frame
shifted by a sub-pixel amount is an exact sample of the moved pattern rather
than an interpolation. Every pattern keeps its spectrum below the Nyquist
frequency of the LR grid, which makes the HR frames recoverable from the LR
ones in principle.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .flow import FlowPair, GroundTruthEstimator, estimate_bidirectional
from .resample import bicubic_resample
from .serialize import read_manifest, write_manifest
from .tensor import ShapeError, Tensor

PATTERNS = ("gaussian-blobs", "stripes", "checker", "band-limited-noise")
MAX_SHIFT = 4.0
BAND = 0.9


@dataclass(frozen=True)
class MotionSpec:
    dx: float = 0.0  # HR pixels per frame, positive = content moves right
    dy: float = 0.0
    pattern: str = "band-limited-noise"
    seed: int = 0

    def __post_init__(self):
        if abs(self.dx) > MAX_SHIFT or abs(self.dy) > MAX_SHIFT:
            raise ValueError(f"per-frame shift ({self.dx}, {self.dy}) exceeds {MAX_SHIFT} px")
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown pattern {self.pattern!r}; expected one of {PATTERNS}")


@dataclass
class SamplePair:
    hr: np.ndarray  # [T,3,sH,sW]
    lr: np.ndarray  # [T,3,H,W]
    gt_flow: FlowPair | None = None  # LR pixels

    @property
    def scale(self) -> int:
        return self.hr.shape[-1] // self.lr.shape[-1]


# ---------------------------------------------------------------------------
# patterns


def _pattern_fn(kind: str, rng: np.random.Generator, extent: float, fmax: float):
    """Return f(x, y) -> [3, ...] with values inside [0.08, 0.92]."""
    if kind == "band-limited-noise":
        k = 24
        mag = rng.uniform(0.2, 1.0, k) * fmax
        ang = rng.uniform(0, 2 * np.pi, k)
        fx, fy = mag * np.cos(ang), mag * np.sin(ang)
        phase = rng.uniform(0, 2 * np.pi, k)
        amp = rng.normal(size=(3, k))
        amp *= 0.42 / np.abs(amp).sum(axis=1, keepdims=True)

        def f(x, y):
            waves = np.cos(2 * np.pi * (fx[:, None, None] * x + fy[:, None, None] * y) + phase[:, None, None])
            return 0.5 + np.einsum("ck,k...->c...", amp, waves)
        return f

    if kind == "stripes":
        k = int(rng.integers(1, 3))
        mag = rng.uniform(0.35, 0.95, k) * fmax
        ang = rng.uniform(0, np.pi, k)
        phase = rng.uniform(0, 2 * np.pi, k)
        amp = rng.uniform(0.3, 1.0, (3, k)) * rng.choice([-1, 1], (3, k))
        amp *= 0.42 / np.abs(amp).sum(axis=1, keepdims=True)

        def f(x, y):
            arg = mag[:, None, None] * (np.cos(ang)[:, None, None] * x + np.sin(ang)[:, None, None] * y)
            return 0.5 + np.einsum("ck,k...->c...", amp, np.sin(2 * np.pi * arg + phase[:, None, None]))
        return f

    if kind == "checker":
        # sin*sin has its energy at sqrt(2)*freq, kept under fmax
        freq = rng.uniform(0.35, 0.68) * fmax
        ang = rng.uniform(0, np.pi / 2)
        ph = rng.uniform(0, 2 * np.pi, 2)
        color = rng.uniform(0.5, 1.0, 3) * rng.choice([-1, 1], 3) * 0.42
        c, s = np.cos(ang), np.sin(ang)

        def f(x, y):
            u, v = c * x + s * y, -s * x + c * y
            pat = np.sin(2 * np.pi * freq * u + ph[0]) * np.sin(2 * np.pi * freq * v + ph[1])
            return 0.5 + color[:, None, None] * pat
        return f

    if kind == "gaussian-blobs":
        margin = 2 * MAX_SHIFT * 8
        span = extent + 2 * margin
        m = int(span * span / 300) + int(rng.integers(8))
        cx = rng.uniform(-margin, extent + margin, m)
        cy = rng.uniform(-margin, extent + margin, m)
        sig = rng.uniform(3.0, 6.0, m)
        col = rng.normal(size=(3, m))

        def f(x, y):
            d2 = (x[None] - cx[:, None, None]) ** 2 + (y[None] - cy[:, None, None]) ** 2
            g = np.exp(-0.5 * d2 / sig[:, None, None] ** 2)
            return 0.5 + 0.42 * np.tanh(np.einsum("ck,k...->c...", col, g))
        return f

    raise ValueError(f"unknown pattern {kind!r}")


def generate_sequence(spec: MotionSpec, frames: int, height: int, width: int, scale: int = 4,
                      band: float = BAND) -> SamplePair:
    """LR size ``height x width``; HR frame t is the pattern translated by t*(dx, dy).

    ``band`` is the highest pattern frequency as a fraction of the LR Nyquist rate.
    """
    if frames < 1 or height < 1 or width < 1:
        raise ShapeError(f"bad sequence size T={frames}, {height}x{width}")
    rng = np.random.default_rng(spec.seed)
    fmax = band * 0.5 / scale  # cycles per HR pixel
    f = _pattern_fn(spec.pattern, rng, max(height, width) * scale, fmax)
    hh, ww = height * scale, width * scale
    ys, xs = np.meshgrid(np.arange(hh, dtype=np.float64), np.arange(ww, dtype=np.float64), indexing="ij")
    hr = np.stack([f(xs - t * spec.dx, ys - t * spec.dy) for t in range(frames)]).astype(np.float32)
    hr = np.clip(hr, 0.0, 1.0)
    lr = np.clip(bicubic_resample(hr, 1.0 / scale), 0.0, 1.0)
    shift = (spec.dx / scale, spec.dy / scale)
    flows = estimate_bidirectional(Tensor(lr), GroundTruthEstimator(shift))
    return SamplePair(hr, lr, flows)


def make_dataset(count: int, frames: int, height: int, width: int, scale: int = 4, seed: int = 0,
                 max_shift: float = MAX_SHIFT, band: float = BAND) -> tuple[list[SamplePair], list[MotionSpec]]:
    """``count`` sequences cycling through the pattern kinds, random sub-pixel motion."""
    pairs, specs = [], []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        dx, dy = (float(v) for v in np.round(rng.uniform(-max_shift, max_shift, 2), 3))
        spec = MotionSpec(dx, dy, PATTERNS[i % len(PATTERNS)], int(rng.integers(2**31)))
        specs.append(spec)
        pairs.append(generate_sequence(spec, frames, height, width, scale, band))
    return pairs, specs


@dataclass
class DataConfig:
    count: int = 16
    frames: int = 3
    height: int = 16  # LR size
    width: int = 16
    scale: int = 4
    seed: int = 0
    max_shift: float = MAX_SHIFT
    band: float = BAND
    packed: bool = False

    def validate(self):
        for key in ("count", "frames", "height", "width", "scale"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be >= 1, got {getattr(self, key)}")
        if not 0.0 <= self.max_shift <= MAX_SHIFT:
            raise ValueError(f"max_shift must lie in [0, {MAX_SHIFT}], got {self.max_shift}")
        if self.band <= 0:
            raise ValueError(f"band must be positive, got {self.band}")
        return self


def build_dataset(cfg: DataConfig) -> tuple[list[SamplePair], list[MotionSpec]]:
    cfg.validate()
    return make_dataset(cfg.count, cfg.frames, cfg.height, cfg.width, cfg.scale, cfg.seed, cfg.max_shift, cfg.band)


# ---------------------------------------------------------------------------
# crops and augmentation


def _map_flows(flows: FlowPair | None, fn) -> FlowPair | None:
    if flows is None:
        return None
    return FlowPair(Tensor(fn(flows.backward.data)), Tensor(fn(flows.forward.data)))


def crop_lr_patches(pair: SamplePair, size: int, rng: np.random.Generator | None = None,
                    origin: tuple[int, int] | None = None) -> SamplePair:
    """Same LR window in every frame; the HR window is ``scale`` times larger."""
    h, w = pair.lr.shape[-2:]
    if size < 1 or size > h or size > w:
        raise ShapeError(f"crop size {size} does not fit LR frames {h}x{w}")
    if origin is None:
        origin = (0, 0) if rng is None else (int(rng.integers(h - size + 1)), int(rng.integers(w - size + 1)))
    top, left = origin
    if top < 0 or left < 0 or top + size > h or left + size > w:
        raise ShapeError(f"crop at {origin} of size {size} leaves the {h}x{w} frame")
    s = pair.scale
    lr = pair.lr[..., top:top + size, left:left + size].copy()
    hr = pair.hr[..., s * top:s * (top + size), s * left:s * (left + size)].copy()
    flows = _map_flows(pair.gt_flow, lambda a: a[..., top:top + size, left:left + size].copy())
    return SamplePair(hr, lr, flows)


def _hflip(a):
    return a[..., ::-1].copy()


def _rot(a):
    # clockwise quarter turn: displacement (dx, dy) becomes (-dy, dx)
    return np.rot90(a, k=-1, axes=(-2, -1)).copy()


def _hflip_flow(f):
    f = _hflip(f)
    f[:, 0] = -f[:, 0]
    return f


def _rot_flow(f):
    f = _rot(f)
    return np.stack([-f[:, 1], f[:, 0]], axis=1)


def augment(pair: SamplePair, rng: np.random.Generator | None = None,
            hflip: bool | None = None, rotate: bool | None = None) -> SamplePair:
    """Random horizontal flip and clockwise 90 degree rotation, each with probability 1/2.

    Explicit ``hflip``/``rotate`` override the draw. Flow vectors are remapped
    along with the pixels.
    """
    if hflip is None:
        hflip = bool(rng.integers(2)) if rng is not None else False
    if rotate is None:
        rotate = bool(rng.integers(2)) if rng is not None else False
    hr, lr, flows = pair.hr, pair.lr, pair.gt_flow
    if rotate and lr.shape[-1] != lr.shape[-2]:
        raise ShapeError(f"rotation needs square frames, got {lr.shape[-2]}x{lr.shape[-1]}")
    if hflip:
        hr, lr, flows = _hflip(hr), _hflip(lr), _map_flows(flows, _hflip_flow)
    if rotate:
        hr, lr, flows = _rot(hr), _rot(lr), _map_flows(flows, _rot_flow)
    return SamplePair(hr, lr, flows)


# ---------------------------------------------------------------------------
# PPM


class PPMError(ValueError):
    pass


def write_ppm(path, frame) -> None:
    """``frame`` is [3,H,W] in [0,1] (floats) or uint8."""
    a = np.asarray(frame)
    if a.ndim != 3 or a.shape[0] != 3:
        raise ShapeError(f"write_ppm expects [3,H,W], got dims {list(a.shape)}")
    if a.dtype != np.uint8:
        a = np.round(np.clip(a.astype(np.float64), 0.0, 1.0) * 255).astype(np.uint8)
    _, h, w = a.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + a.transpose(1, 2, 0).tobytes())


def _tokens(buf: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens; returns them and the payload offset."""
    out, i = [], 0
    while len(out) < count:
        while i < len(buf) and (buf[i:i + 1].isspace() or buf[i:i + 1] == b"#"):
            if buf[i:i + 1] == b"#":
                while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                    i += 1
            else:
                i += 1
        if i >= len(buf):
            raise PPMError(f"unexpected end of header at byte {i}")
        start = i
        while i < len(buf) and not buf[i:i + 1].isspace() and buf[i:i + 1] != b"#":
            i += 1
        out.append((buf[start:i], start))
    if i >= len(buf) or not buf[i:i + 1].isspace():
        raise PPMError(f"expected whitespace after header at byte {i}")
    return out, i + 1


def decode_ppm(buf: bytes) -> np.ndarray:
    toks, off = _tokens(buf, 4)
    magic, pos = toks[0]
    if magic != b"P6":
        raise PPMError(f"bad magic {magic!r} at byte {pos}, expected P6")
    vals = []
    for tok, pos in toks[1:]:
        if not tok.isdigit():
            raise PPMError(f"expected a decimal integer at byte {pos}, got {tok!r}")
        vals.append(int(tok))
    w, h, maxval = vals
    if w < 1 or h < 1:
        raise PPMError(f"empty image {w}x{h} at byte {toks[1][1]}")
    if maxval != 255:
        raise PPMError(f"unsupported maxval {maxval} at byte {toks[3][1]}, expected 255")
    want = 3 * w * h
    got = len(buf) - off
    if got != want:
        raise PPMError(f"payload at byte {off}: expected {want} bytes, got {got}")
    a = np.frombuffer(buf, dtype=np.uint8, offset=off).reshape(h, w, 3)
    return a.transpose(2, 0, 1).astype(np.float32) / np.float32(255)


def read_ppm(path) -> np.ndarray:
    """[3,H,W] float32 in [0,1]."""
    return decode_ppm(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# dataset directories

_FIELDS = ("dx", "dy", "pattern", "seed")


def save_dataset(directory, pairs: list[SamplePair], specs: list[MotionSpec], packed: bool = False) -> Path:
    """Frame PPMs ``seq{i}_t{j}_{hr|lr}.ppm`` plus ``sequences.txt``, or packed VSRT tensors."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (pair, spec) in enumerate(zip(pairs, specs)):
        fields = [f"seq{i}", f"frames={pair.lr.shape[0]}", f"scale={pair.scale}"]
        fields += [f"{k}={getattr(spec, k)}" for k in _FIELDS]
        lines.append("\t".join(fields))
        if not packed:
            for j in range(pair.lr.shape[0]):
                write_ppm(d / f"seq{i}_t{j}_hr.ppm", pair.hr[j])
                write_ppm(d / f"seq{i}_t{j}_lr.ppm", pair.lr[j])
    if packed:
        tensors = {}
        for i, pair in enumerate(pairs):
            tensors[f"seq{i}_hr"] = pair.hr
            tensors[f"seq{i}_lr"] = pair.lr
        write_manifest(d, tensors)
    (d / "sequences.txt").write_text("\n".join(lines) + "\n")
    return d


def load_dataset(directory) -> tuple[list[SamplePair], list[MotionSpec]]:
    d = Path(directory)
    index = d / "sequences.txt"
    if not index.exists():
        raise FileNotFoundError(f"no sequences.txt in {d}")
    packed = read_manifest(d) if (d / "manifest.txt").exists() else None
    pairs, specs = [], []
    for line in index.read_text().splitlines():
        if not line.strip():
            continue
        name, *kv = line.split("\t")
        meta = dict(f.split("=", 1) for f in kv)
        spec = MotionSpec(float(meta["dx"]), float(meta["dy"]), meta["pattern"], int(meta["seed"]))
        scale = int(meta["scale"])
        if packed is not None:
            hr, lr = packed[f"{name}_hr"], packed[f"{name}_lr"]
        else:
            t = int(meta["frames"])
            hr = np.stack([read_ppm(d / f"{name}_t{j}_hr.ppm") for j in range(t)])
            lr = np.stack([read_ppm(d / f"{name}_t{j}_lr.ppm") for j in range(t)])
        flows = estimate_bidirectional(Tensor(lr), GroundTruthEstimator((spec.dx / scale, spec.dy / scale)))
        pairs.append(SamplePair(hr, lr, flows))
        specs.append(spec)
    return pairs, specs
