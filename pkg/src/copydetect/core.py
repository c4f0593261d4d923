"""Descriptor type, norm/ratio/cosine primitives and the descriptor file codecs.

Binary layout (little-endian)::

    b"ASLD" | u32 version=1 | u32 dim | u64 count | count x (u64 id, dim x f32)

Components are stored as float32, so a write/read round trip is bit-exact for
values already representable in float32 (and for anything previously read).
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"ASLD"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")
_U64_MAX = 2**64 - 1


class CopyDetectError(Exception):
    """Base class for all package errors."""


class ZeroNormDenominator(CopyDetectError, ValueError):
    """A descriptor used as a denominator has zero norm."""


class InvalidDescriptor(CopyDetectError, ValueError):
    pass


class DescriptorFormatError(CopyDetectError):
    """Malformed descriptor file. ``offset`` is the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class BadMagic(DescriptorFormatError):
    pass


class VersionMismatch(DescriptorFormatError):
    pass


class DimensionMismatch(DescriptorFormatError):
    pass


class TruncatedFile(DescriptorFormatError):
    pass


@dataclass(frozen=True, eq=False)
class Descriptor:
    id: int
    vec: np.ndarray

    def __post_init__(self):
        if not isinstance(self.id, (int, np.integer)) or not 0 <= int(self.id) <= _U64_MAX:
            raise InvalidDescriptor(f"image id must be an unsigned 64-bit integer, got {self.id!r}")
        vec = np.array(self.vec, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(vec)):
            raise InvalidDescriptor(f"descriptor {self.id} has non-finite components")
        vec.setflags(write=False)
        object.__setattr__(self, "id", int(self.id))
        object.__setattr__(self, "vec", vec)

    @property
    def dim(self) -> int:
        return self.vec.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Descriptor):
            return NotImplemented
        return self.id == other.id and np.array_equal(self.vec, other.vec)

    def __repr__(self):
        return f"Descriptor(id={self.id}, dim={self.dim}, norm={norm(self):.6g})"


def _as_vec(x) -> np.ndarray:
    return x.vec if isinstance(x, Descriptor) else np.asarray(x, dtype=np.float64)


def norm(x) -> float:
    """Euclidean norm of a descriptor (or raw vector)."""
    v = _as_vec(x)
    return float(math.sqrt(np.dot(v, v)))


def norm_ratio(x_i, x_j) -> float:
    """Asymmetric similarity ``|x_i| / |x_j|``.

    A value above 1 means ``x_i`` carries the larger norm, i.e. the image
    behind it is expected to hold more content than the one behind ``x_j``.
    """
    denom = norm(x_j)
    if denom == 0.0:
        raise ZeroNormDenominator("norm_ratio: denominator descriptor has zero norm")
    return norm(x_i) / denom


def cosine_similarity(a, b) -> float:
    va, vb = _as_vec(a), _as_vec(b)
    na, nb = norm(va), norm(vb)
    if na == 0.0 or nb == 0.0:
        raise ZeroNormDenominator("cosine_similarity: zero-norm argument")
    # dot and the product of norms are both commutative in IEEE arithmetic,
    # so the result is exactly symmetric.
    return float(np.dot(va, vb)) / (na * nb)


def stack(descriptors: Sequence[Descriptor]) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(ids, matrix)`` for a uniform-dimension descriptor list."""
    if not descriptors:
        return np.zeros(0, dtype=np.uint64), np.zeros((0, 0))
    dims = {d.dim for d in descriptors}
    if len(dims) != 1:
        raise InvalidDescriptor(f"mixed descriptor dimensions: {sorted(dims)}")
    ids = np.array([d.id for d in descriptors], dtype=np.uint64)
    return ids, np.stack([d.vec for d in descriptors])


# -- binary codec ------------------------------------------------------------

def write_descriptors(path, descriptors: Sequence[Descriptor], dim: int | None = None) -> None:
    descriptors = list(descriptors)
    if dim is None:
        if not descriptors:
            raise ValueError("dim is required when writing an empty descriptor list")
        dim = descriptors[0].dim
    for d in descriptors:
        if d.dim != dim:
            raise InvalidDescriptor(f"descriptor {d.id} has dim {d.dim}, expected {dim}")
    record = np.dtype([("id", "<u8"), ("vec", "<f4", (dim,))])
    body = np.zeros(len(descriptors), dtype=record)
    for k, d in enumerate(descriptors):
        body[k]["id"] = d.id
        body[k]["vec"] = d.vec
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, dim, len(descriptors)))
        f.write(body.tobytes())


def read_descriptor_header(path) -> tuple[int, int, int]:
    """Validate and return ``(version, dim, count)`` of a descriptor file."""
    with open(path, "rb") as f:
        raw = f.read(_HEADER.size)
    return _parse_header(raw)


def _parse_header(raw: bytes) -> tuple[int, int, int]:
    if len(raw) < 4:
        raise TruncatedFile("file shorter than the magic", len(raw))
    if raw[:4] != MAGIC:
        raise BadMagic(f"expected magic {MAGIC!r}, found {raw[:4]!r}", 0)
    if len(raw) < _HEADER.size:
        raise TruncatedFile("incomplete header", len(raw))
    _, version, dim, count = _HEADER.unpack(raw[: _HEADER.size])
    if version != VERSION:
        raise VersionMismatch(f"unsupported version {version}, expected {VERSION}", 4)
    return version, dim, count


def read_descriptors(path, expected_dim: int | None = None) -> list[Descriptor]:
    data = Path(path).read_bytes()
    _, dim, count = _parse_header(data)
    if expected_dim is not None and dim != expected_dim:
        raise DimensionMismatch(f"file dim {dim} != expected {expected_dim}", 8)
    record = np.dtype([("id", "<u8"), ("vec", "<f4", (dim,))])
    need = _HEADER.size + count * record.itemsize
    if len(data) < need:
        complete = (len(data) - _HEADER.size) // record.itemsize
        raise TruncatedFile(
            f"expected {count} records, file holds {complete}",
            _HEADER.size + complete * record.itemsize,
        )
    body = np.frombuffer(data, dtype=record, count=count, offset=_HEADER.size)
    return [Descriptor(int(r["id"]), r["vec"].astype(np.float64)) for r in body]


# -- CSV fallback ------------------------------------------------------------

def write_descriptors_csv(path, descriptors: Iterable[Descriptor], dim: int | None = None) -> None:
    descriptors = list(descriptors)
    if dim is None:
        if not descriptors:
            raise ValueError("dim is required when writing an empty descriptor list")
        dim = descriptors[0].dim
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id"] + [f"v{k}" for k in range(dim)])
        for d in descriptors:
            if d.dim != dim:
                raise InvalidDescriptor(f"descriptor {d.id} has dim {d.dim}, expected {dim}")
            w.writerow([d.id] + [repr(float(v)) for v in d.vec])


def read_descriptors_csv(path) -> list[Descriptor]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0][:1] != ["id"]:
        raise DescriptorFormatError("CSV header must start with 'id'", 0)
    dim = len(rows[0]) - 1
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != dim + 1:
            raise DimensionMismatch(f"line {lineno}: {len(row) - 1} components, expected {dim}", lineno)
        out.append(Descriptor(int(row[0]), [float(v) for v in row[1:]]))
    return out
