"""Dense tensor helpers and the CAVT binary format.

Tensors are plain numpy arrays laid out row-major as (C, H, W) for feature
maps and (3, H, W) for images.  Reductions accumulate in float64 and walk the
data in flat index order so results are reproducible bit for bit.
"""

import struct
from pathlib import Path

import numpy as np

from .errors import SchemaError, ShapeMismatch, ZeroVector

MAGIC = b"CAVT"

POOL_MODES = ("sum", "mean", "max")


def _flat_sum(x):
    # cumsum is a strictly sequential left-to-right reduction
    x = np.ravel(x)
    if x.size == 0:
        return 0.0
    return float(np.cumsum(x, dtype=np.float64)[-1])


def dot(a, b) -> float:
    """Sum of elementwise products of two equally shaped tensors."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"dot: shapes {a.shape} and {b.shape} differ")
    return _flat_sum(a.astype(np.float64) * b.astype(np.float64))


def norm(v) -> float:
    v = np.asarray(v, dtype=np.float64)
    return float(np.sqrt(_flat_sum(v * v)))


def normalize(v, b=0.0):
    """Scale ``(v, b)`` by ``1/||v||``; the hyperplane ``v.z + b = 0`` is unchanged."""
    v = np.asarray(v, dtype=np.float64)
    n = norm(v)
    if not n > 0.0 or not np.isfinite(n):
        raise ZeroVector("cannot normalize a zero-norm vector")
    return v / n, float(b) / n


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = norm(a), norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine of a zero vector")
    return dot(a, b) / (na * nb)


def pool(z, mode="sum"):
    """Spatially reduce a (C, H, W) map, or a batch (N, C, H, W), to channels."""
    z = np.asarray(z)
    if z.ndim not in (3, 4):
        raise ShapeMismatch(f"pool expects rank 3 (or batched rank 4), got {z.shape}")
    if mode not in POOL_MODES:
        raise ValueError(f"unknown pooling mode {mode!r}")
    z = z.astype(np.float64)
    flat = z.reshape(z.shape[:-2] + (-1,))
    if mode == "max":
        return flat.max(axis=-1)
    s = np.cumsum(flat, axis=-1)[..., -1]
    if mode == "mean":
        s = s / flat.shape[-1]
    return s


def expand(alpha, spatial):
    """Outer product of channel weights with an all-ones (H, W) map."""
    alpha = np.asarray(alpha, dtype=np.float64)
    h, w = spatial
    return np.repeat(alpha[:, None, None], h, axis=1).repeat(w, axis=2)


# --- binary format -------------------------------------------------------------


def encode_tensor(t) -> bytes:
    t = np.ascontiguousarray(t, dtype="<f4")
    if t.ndim > 255:
        raise ValueError("rank too large for CAVT")
    header = MAGIC + struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    return header + t.tobytes(order="C")


def decode_tensor(buf, source="<bytes>"):
    """Parse one tensor; returns ``(array, bytes_consumed)``."""
    buf = memoryview(buf)
    if len(buf) < 5 or bytes(buf[:4]) != MAGIC:
        raise SchemaError("missing CAVT magic bytes", source)
    rank = buf[4]
    off = 5 + 4 * rank
    if len(buf) < off:
        raise SchemaError("truncated CAVT header", source)
    shape = struct.unpack(f"<{rank}I", bytes(buf[5:off]))
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    end = off + 4 * count
    if len(buf) < end:
        raise SchemaError("truncated CAVT payload", source)
    data = np.frombuffer(bytes(buf[off:end]), dtype="<f4").astype(np.float32)
    return data.reshape(shape), end


def write_tensor(path, t):
    Path(path).write_bytes(encode_tensor(t))


def read_tensor(path):
    raw = Path(path).read_bytes()
    t, used = decode_tensor(raw, path)
    if used != len(raw):
        raise SchemaError("trailing bytes after CAVT payload", path)
    return t
