"""Rank-4 tensor helpers.

Tensors are plain ``numpy.ndarray`` values laid out as (batch, channel,
height, width), C-contiguous with width fastest. The functions here never
mutate their inputs.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import NumericalError, ShapeError

DTYPES = {"f32": np.float32, "f64": np.float64}

# NaN/Inf checks are a debug assertion, off by default.
DEBUG = os.environ.get("POSEKIT_DEBUG", "") not in ("", "0")

_MAGIC = b"TNS1"
_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; same seed gives the same stream on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def check_finite(x: np.ndarray, where: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in {where}")
    return x


def debug_check(x: np.ndarray, where: str) -> np.ndarray:
    if DEBUG:
        check_finite(x, where)
    return x


def as_tensor(x, dtype=None) -> np.ndarray:
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected a rank-4 (n, c, h, w) tensor, got shape {arr.shape}")
    if arr.dtype not in _DTYPE_CODES:
        arr = arr.astype(np.float64)
    return arr


_OPS = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def elementwise(op: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``op(a, b)`` where ``b`` may have size 1 along any axis that differs."""
    if op not in _OPS:
        raise ValueError(f"unknown elementwise op {op!r}")
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != b.ndim or any(db not in (1, da) for da, db in zip(a.shape, b.shape)):
        raise ShapeError(f"cannot broadcast {b.shape} onto {a.shape}")
    return debug_check(_OPS[op](a, b), f"elementwise {op}")


def split_channels(x: np.ndarray, s: int) -> list[np.ndarray]:
    c = x.shape[1]
    if s < 1 or c % s:
        raise ShapeError(f"{c} channels cannot be split into {s} equal groups")
    step = c // s
    return [x[:, i * step:(i + 1) * step] for i in range(s)]


def concat_channels(parts: Sequence[np.ndarray]) -> np.ndarray:
    if not parts:
        raise ShapeError("nothing to concatenate")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != 4 or (p.shape[0], p.shape[2], p.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"cannot concatenate {p.shape} with {ref}: batch/spatial mismatch")
    return np.concatenate(parts, axis=1)


def depth_to_space(x: np.ndarray, f: int) -> np.ndarray:
    """Rearrange (n, c·f², h, w) into (n, c, h·f, w·f).

    Input channel ``j·f² + dy·f + dx`` lands in output channel ``j`` at
    offset (dy, dx) of each f×f cell.
    """
    n, c, h, w = x.shape
    if f < 1 or c % (f * f):
        raise ShapeError(f"{c} channels not divisible by f²={f * f}")
    oc = c // (f * f)
    y = x.reshape(n, oc, f, f, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(y.reshape(n, oc, h * f, w * f))


def space_to_depth(x: np.ndarray, f: int) -> np.ndarray:
    """Exact inverse of :func:`depth_to_space`."""
    n, c, hf, wf = x.shape
    if f < 1 or hf % f or wf % f:
        raise ShapeError(f"spatial size {(hf, wf)} not divisible by f={f}")
    h, w = hf // f, wf // f
    y = x.reshape(n, c, h, f, w, f).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(y.reshape(n, c * f * f, h, w))


def fan_in(shape: Sequence[int]) -> int:
    if len(shape) == 1:
        return int(shape[0])
    return int(np.prod(shape[1:]))


def random_init(shape, scheme: str = "uniform-fan-in", rng: np.random.Generator | None = None,
                value: float = 0.0, fan: int | None = None, dtype=np.float64) -> np.ndarray:
    """Deterministic parameter initialisation.

    ``uniform-fan-in`` draws from U(-sqrt(1/fan_in), +sqrt(1/fan_in)), the fan
    being the product of all but the leading axis unless given. ``constant``
    fills with ``value``.
    """
    shape = tuple(int(s) for s in shape)
    if scheme == "constant":
        return np.full(shape, value, dtype=dtype)
    if scheme != "uniform-fan-in":
        raise ValueError(f"unknown init scheme {scheme!r}")
    if rng is None:
        raise ValueError("uniform-fan-in needs an rng")
    bound = np.sqrt(1.0 / (fan if fan is not None else fan_in(shape)))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# -- blob files -------------------------------------------------------------

def to_bytes(x: np.ndarray) -> bytes:
    x = np.asarray(x)
    if x.dtype not in _DTYPE_CODES:
        raise ShapeError(f"unsupported dtype {x.dtype}")
    if x.ndim > 4:
        raise ShapeError(f"blob rank is at most 4, got {x.ndim}")
    dims = list(x.shape) + [1] * (4 - x.ndim)
    header = _MAGIC + struct.pack("<III", _DTYPE_CODES[x.dtype], x.ndim, 0)
    payload = np.ascontiguousarray(x, dtype=x.dtype.newbyteorder("<")).tobytes()
    return header + struct.pack("<4I", *dims) + payload


def from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 32 or buf[:4] != _MAGIC:
        raise ShapeError("not a TNS1 tensor blob")
    code, rank, _ = struct.unpack("<III", buf[4:16])
    dims = struct.unpack("<4I", buf[16:32])
    if code not in _CODE_DTYPES or rank > 4:
        raise ShapeError(f"bad blob header (dtype code {code}, rank {rank})")
    dtype = _CODE_DTYPES[code].newbyteorder("<")
    shape = dims[:rank]
    count = int(np.prod(shape)) if rank else 1
    payload = buf[32:]
    if len(payload) != count * dtype.itemsize:
        raise ShapeError(f"blob payload is {len(payload)} bytes, header implies {count * dtype.itemsize}")
    return np.frombuffer(payload, dtype=dtype).astype(_CODE_DTYPES[code]).reshape(shape)


def save_blob(path, x: np.ndarray) -> None:
    Path(path).write_bytes(to_bytes(x))


def load_blob(path) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())
