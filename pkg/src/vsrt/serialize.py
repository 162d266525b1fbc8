"""VSRT tensor files, manifests and flat ``key = value`` config files.

VSRT layout: ``b"VSRT"``, u32 version (=1), u8 rank, rank x u64 extents, then
the little-endian float32 payload with no padding.
"""

from __future__ import annotations

import dataclasses
import os
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"VSRT"
VERSION = 1


class FormatError(ValueError):
    pass


def encode_tensor(arr) -> bytes:
    a = np.asarray(arr, dtype="<f4")
    if a.ndim == 0:
        a = a.reshape(1)
    head = MAGIC + struct.pack("<IB", VERSION, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + np.ascontiguousarray(a).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 9 or buf[:4] != MAGIC:
        raise FormatError("not a VSRT tensor (bad magic)")
    version, rank = struct.unpack_from("<IB", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported VSRT version {version}")
    off = 9
    if len(buf) < off + 8 * rank:
        raise FormatError(f"truncated header: need {off + 8 * rank} bytes, got {len(buf)}")
    dims = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    n = int(np.prod(dims)) if rank else 1
    if len(buf) - off != 4 * n:
        raise FormatError(f"payload size mismatch: expected {4 * n} bytes, got {len(buf) - off}")
    return np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(dims).astype(np.float32)


def write_tensor(path, arr) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# manifest: one line per tensor, "name<TAB>AxBxC<TAB>file[<TAB>key=value ...]"


def write_manifest(directory, tensors: Mapping[str, Any], tags: Mapping[str, Mapping[str, str]] | None = None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        fname = f"{name}.vsrt"
        write_tensor(d / fname, arr)
        fields = [name, "x".join(str(s) for s in arr.shape), fname]
        for k, v in (tags or {}).get(name, {}).items():
            fields.append(f"{k}={v}")
        lines.append("\t".join(fields))
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")
    return d / "manifest.txt"


def read_manifest(directory, with_tags: bool = False):
    d = Path(directory)
    path = d / "manifest.txt"
    if not path.exists():
        raise FileNotFoundError(f"no manifest in {d}")
    tensors: dict[str, np.ndarray] = {}
    tags: dict[str, dict[str, str]] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) < 3:
            raise FormatError(f"{path}:{lineno}: expected name, shape, file")
        name, shape, fname = fields[:3]
        arr = read_tensor(d / fname)
        want = tuple(int(s) for s in shape.split("x"))
        if arr.shape != want:
            raise FormatError(f"{path}:{lineno}: {name} has shape {arr.shape}, manifest says {want}")
        tensors[name] = arr
        tags[name] = dict(f.split("=", 1) for f in fields[3:])
    return (tensors, tags) if with_tags else tensors


# flat config files


def _format_value(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(_format_value(x) for x in v)
    return str(v)


def dump_config(cfg, path=None) -> str:
    text = "".join(f"{f.name} = {_format_value(getattr(cfg, f.name))}\n" for f in dataclasses.fields(cfg))
    if path is not None:
        Path(path).write_text(text)
    return text


def parse_value(raw: str, like):
    raw = raw.strip()
    if isinstance(like, bool):
        if raw.lower() not in ("true", "false", "1", "0"):
            raise ValueError(f"expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, tuple):
        return tuple(parse_value(x, like[0]) for x in raw.split(",")) if like else tuple()
    if isinstance(like, list):
        if not raw:
            return []
        elem = like[0] if like else 0.0
        return [parse_value(x, elem) for x in raw.split(",")]
    if like is None:
        if raw in ("None", ""):
            return None
        return int(raw)
    return raw


def read_kv(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def apply_overrides(cfg, pairs: Mapping[str, str]):
    """Return a copy of dataclass ``cfg`` with string overrides parsed by field type."""
    fields = {f.name: f for f in dataclasses.fields(cfg)}
    changes = {}
    for k, v in pairs.items():
        if k not in fields:
            raise KeyError(k)
        current = getattr(cfg, k)
        if current is None and fields[k].default is not dataclasses.MISSING:
            current = fields[k].default
        changes[k] = parse_value(v, current)
    return dataclasses.replace(cfg, **changes)


def load_config(cls, path, **extra):
    """Build ``cls`` from a flat config file, ignoring keys that belong to other configs."""
    pairs = read_kv(path)
    names = {f.name for f in dataclasses.fields(cls)}
    cfg = cls(**extra)
    return apply_overrides(cfg, {k: v for k, v in pairs.items() if k in names})


def tree_hash(directory) -> str:
    import hashlib

    h = hashlib.sha256()
    root = Path(directory)
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(os.fsencode(str(p.relative_to(root))))
            h.update(p.read_bytes())
    return h.hexdigest()
