"""Dense tensor primitives and the raw ``.vten`` container format.

Tensors are plain numpy arrays in row-major (C) order, float32 by default
with float64 available for gradient checking.  There is deliberately no
broadcasting in the operations below: every shape mismatch is a hard
:class:`~cube3d.errors.ShapeError` so that hand-written backprop code
cannot silently mis-align.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError, ShapeError

MAX_RANK = 5

VTEN_MAGIC = b"VTN1"


def validate_shape(shape):
    """Check extents are positive integers and rank is within 1..5."""
    dims = tuple(int(d) for d in shape)
    if not 1 <= len(dims) <= MAX_RANK:
        raise ShapeError(f"rank {len(dims)} outside supported range 1..{MAX_RANK}")
    for d in dims:
        if d < 1:
            raise ShapeError(f"extent {d} is not positive in shape {dims}")
    return dims


def tensor_new(shape, fill=0.0, dtype=np.float32):
    """Allocate a row-major tensor with every element set to ``fill``."""
    dims = validate_shape(shape)
    return np.full(dims, fill, dtype=dtype)


def as_tensor(values, dtype=np.float32):
    """Coerce nested sequences or arrays to a contiguous row-major tensor."""
    arr = np.ascontiguousarray(values, dtype=dtype)
    validate_shape(arr.shape)
    return arr


def flip(t, axis):
    """Reverse element order along ``axis``, leaving all other axes intact."""
    if not -t.ndim <= axis < t.ndim:
        raise ShapeError(f"axis {axis} out of range for rank-{t.ndim} tensor")
    return np.ascontiguousarray(np.flip(t, axis=axis))


def pad(t, before_after, value=0.0):
    """Grow each axis by (before, after) elements filled with ``value``.

    ``before_after`` is one (before, after) pair per axis; amounts must be
    non-negative.
    """
    if len(before_after) != t.ndim:
        raise ShapeError(
            f"got {len(before_after)} pad pairs for rank-{t.ndim} tensor"
        )
    pairs = []
    for axis, (b, a) in enumerate(before_after):
        if b < 0 or a < 0:
            raise ShapeError(f"negative pad ({b},{a}) on axis {axis}")
        pairs.append((int(b), int(a)))
    return np.pad(t, pairs, mode="constant", constant_values=value)


def matmul(a, b):
    """Rank-2 matrix product ``c[i,j] = sum_p a[i,p] * b[p,j]``."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} x {b.shape}")
    return a @ b


def save_vten(path, t):
    """Write ``t`` to the raw container: magic, rank byte, u32 LE extents,
    then float32 LE payload in row-major order."""
    dims = validate_shape(t.shape)
    payload = np.ascontiguousarray(t, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(VTEN_MAGIC)
        fh.write(struct.pack("<B", len(dims)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        fh.write(payload.tobytes(order="C"))


def load_vten(path):
    """Read a tensor written by :func:`save_vten`. Round trip is bit exact."""
    with open(path, "rb") as fh:
        raw = fh.read()
    return _decode_vten(raw, name=str(path))


def peek_vten_shape(path):
    """Read only the header of a container and return its shape."""
    with open(path, "rb") as fh:
        head = fh.read(4 + 1 + 4 * MAX_RANK)
    if head[:4] != VTEN_MAGIC:
        raise FormatError(f"{path}: bad magic {head[:4]!r}")
    rank = head[4]
    if not 1 <= rank <= MAX_RANK:
        raise FormatError(f"{path}: rank byte {rank} outside 1..{MAX_RANK}")
    if len(head) < 5 + 4 * rank:
        raise FormatError(f"{path}: truncated header")
    return struct.unpack(f"<{rank}I", head[5 : 5 + 4 * rank])


def _decode_vten(raw, name="<bytes>"):
    if len(raw) < 5:
        raise FormatError(f"{name}: truncated before rank byte")
    if raw[:4] != VTEN_MAGIC:
        raise FormatError(f"{name}: bad magic {raw[:4]!r}")
    rank = raw[4]
    if not 1 <= rank <= MAX_RANK:
        raise FormatError(f"{name}: rank byte {rank} outside 1..{MAX_RANK}")
    header_end = 5 + 4 * rank
    if len(raw) < header_end:
        raise FormatError(f"{name}: truncated extent list")
    dims = struct.unpack(f"<{rank}I", raw[5:header_end])
    if any(d < 1 for d in dims):
        raise FormatError(f"{name}: zero extent in {dims}")
    count = int(np.prod(dims, dtype=np.int64))
    expected = header_end + 4 * count
    if len(raw) != expected:
        raise FormatError(
            f"{name}: payload holds {len(raw) - header_end} bytes, "
            f"expected {4 * count}"
        )
    data = np.frombuffer(raw[header_end:], dtype="<f4", count=count)
    return data.reshape(dims).copy()
