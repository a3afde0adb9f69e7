"""Named parameter sets, task-vector arithmetic and the ``MHJ1`` checkpoint format.

A :class:`ParamSet` is an immutable, lexicographically ordered mapping from
tensor name to a float64 array. Whole-vector operations (ranking, cosine)
flatten in that name order, row-major within each tensor.

Checkpoint layout::

    b"MHJ1" | u32 little-endian header length | UTF-8 JSON header | payload

with header ``{"dtype": "f64le", "params": [{"name": ..., "shape": [...]}, ...]}``
and payload the row-major little-endian float64 values of each tensor in
header order.
"""

from __future__ import annotations

import json
import os
import struct
from collections.abc import Mapping
from typing import Iterator

import numpy as np

from .errors import FormatError, NonFiniteResult, ShapeMismatch, ZeroVector

MAGIC = b"MHJ1"
DTYPE_TAG = "f64le"
_LE_F64 = np.dtype("<f8")


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


class ParamSet(Mapping):
    """Immutable ordered map ``name -> float64 ndarray``."""

    __slots__ = ("_entries",)

    def __init__(self, entries: Mapping[str, object], *, check_finite: bool = True):
        frozen = {}
        for name in sorted(entries):
            arr = _frozen(entries[name])
            if check_finite and not np.all(np.isfinite(arr)):
                raise NonFiniteResult(f"tensor {name!r} has non-finite values")
            frozen[str(name)] = arr
        self._entries = frozen

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}:{tuple(v.shape)}" for k, v in self._entries.items())
        return f"{type(self).__name__}({shapes})"

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self._entries.items()}

    @property
    def size(self) -> int:
        """Total scalar count."""
        return int(sum(v.size for v in self._entries.values()))

    def flatten(self) -> np.ndarray:
        if not self._entries:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._entries.values()])

    def unflatten(self, flat: np.ndarray) -> "ParamSet":
        """Build a ParamSet of the same type and layout from a flat vector."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ShapeMismatch(f"expected flat length {self.size}, got {flat.shape}")
        out, pos = {}, 0
        for name, arr in self._entries.items():
            out[name] = flat[pos:pos + arr.size].reshape(arr.shape)
            pos += arr.size
        return type(self)(out)

    def map(self, fn) -> "ParamSet":
        return type(self)({k: fn(k, v) for k, v in self._entries.items()})

    def with_entries(self, updates: Mapping[str, object]) -> "ParamSet":
        entries = dict(self._entries)
        for name, value in updates.items():
            if name not in entries:
                raise KeyError(name)
            entries[name] = value
        return type(self)(entries)

    def compatible(self, other: "ParamSet") -> bool:
        return self.shapes == other.shapes

    def equals(self, other: "ParamSet") -> bool:
        """Bit-exact equality (signed zeros distinguished)."""
        if not self.compatible(other):
            return False
        return all(
            self[k].tobytes() == other[k].tobytes() for k in self._entries
        )

    def zeros_like(self) -> "ParamSet":
        return self.map(lambda _, v: np.zeros_like(v))


class TaskVector(ParamSet):
    """A ParamSet interpreted as a difference from some base model."""

    __slots__ = ()

    def __add__(self, other: "TaskVector") -> "TaskVector":
        _require_compatible(self, other)
        return TaskVector({k: self[k] + other[k] for k in self})

    def __neg__(self) -> "TaskVector":
        return TaskVector({k: -v for k, v in self.items()})

    def scale(self, factor: float) -> "TaskVector":
        return TaskVector({k: factor * v for k, v in self.items()})

    def norm(self) -> float:
        return float(np.linalg.norm(self.flatten()))


def _require_compatible(a: ParamSet, b: ParamSet) -> None:
    if set(a) != set(b):
        raise ShapeMismatch(f"name sets differ: {sorted(set(a) ^ set(b))}")
    for name in a:
        if a[name].shape != b[name].shape:
            raise ShapeMismatch(
                f"shape of {name!r} differs: {a[name].shape} vs {b[name].shape}"
            )


def task_vector(finetuned: ParamSet, base: ParamSet) -> TaskVector:
    _require_compatible(finetuned, base)
    return TaskVector({k: finetuned[k] - base[k] for k in base})


def apply_delta(base: ParamSet, delta: ParamSet, scale: float = 1.0) -> ParamSet:
    """Return ``base + scale * delta``."""
    _require_compatible(base, delta)
    with np.errstate(over="ignore", invalid="ignore"):
        if scale == 1.0:
            out = {k: base[k] + delta[k] for k in base}
        else:
            out = {k: base[k] + scale * delta[k] for k in base}
    for k, v in out.items():
        if not np.all(np.isfinite(v)):
            raise NonFiniteResult(f"apply_delta overflowed in {k!r}")
    return ParamSet(out)


def cosine_similarity(a: ParamSet, b: ParamSet) -> float:
    _require_compatible(a, b)
    fa, fb = a.flatten(), b.flatten()
    na, nb = np.linalg.norm(fa), np.linalg.norm(fb)
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine similarity of a zero vector is undefined")
    # dot first so exact cancellations (orthogonal axes) stay exactly 0
    cos = float(np.dot(fa, fb) / na / nb)
    return max(-1.0, min(1.0, cos))


def save_checkpoint(p: ParamSet, path) -> None:
    if len(p) == 0 or p.size == 0:
        raise FormatError("refusing to save an empty ParamSet")
    header = {
        "dtype": DTYPE_TAG,
        "params": [{"name": k, "shape": list(v.shape)} for k, v in p.items()],
    }
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for v in p.values():
            fh.write(np.ascontiguousarray(v, dtype=_LE_F64).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> ParamSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic bytes")
    (hlen,) = struct.unpack("<I", blob[4:8])
    if 8 + hlen > len(blob):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[8:8 + hlen].decode("utf-8"))
        params = header["params"]
        dtype = header["dtype"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from exc
    if dtype != DTYPE_TAG:
        raise FormatError(f"{path}: unsupported dtype {dtype!r}")
    if not params:
        raise FormatError(f"{path}: no tensors")

    payload = memoryview(blob)[8 + hlen:]
    entries, pos = {}, 0
    for item in params:
        try:
            name, shape = str(item["name"]), tuple(int(s) for s in item["shape"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: malformed tensor entry {item!r}") from exc
        if any(s < 0 for s in shape) or name in entries:
            raise FormatError(f"{path}: invalid entry for {name!r}")
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = 8 * count
        if pos + nbytes > len(payload):
            raise FormatError(f"{path}: truncated payload at {name!r}")
        arr = np.frombuffer(payload[pos:pos + nbytes], dtype=_LE_F64).reshape(shape)
        entries[name] = arr.astype(np.float64)
        pos += nbytes
    if pos != len(payload):
        raise FormatError(f"{path}: {len(payload) - pos} trailing payload bytes")
    if [p["name"] for p in params] != sorted(entries):
        raise FormatError(f"{path}: tensors not in canonical order")
    try:
        return ParamSet(entries)
    except NonFiniteResult as exc:
        raise FormatError(f"{path}: {exc}") from exc
