"""Two-layer embedding network with hand-written reverse-mode gradients.

``descriptor = W2 @ relu(W1 @ features(img) + b1) + b2``; the output is not
normalized because its norm carries the content signal.

Two fixed input representations are available:

``raw``
    ``flatten(img)``.
``edges`` (default)
    ``[pool(img - 0.5), pool(|laplacian(img)|)]`` with ``pool`` a 4x4 block
    average. The nonnegative edge-magnitude half lets a single linear layer
    sum local detail, which is what the norm has to track; on raw pixels the
    ordering does not generalize to unseen images. Block averages keep that
    sum exact while making the direction tolerant to small shifts.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import rng as _rng
from .core import CopyDetectError, Descriptor

CKPT_MAGIC = b"ASLP"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIIIIII")
FEATURES = ("raw", "edges")
# Block size of the average pooling applied to both halves of the edges input.
POOL = 4
_LAPLACIAN = np.array([[0.0, -1.0, 0.0], [-1.0, 4.0, -1.0], [0.0, -1.0, 0.0]])


class ShapeMismatch(CopyDetectError, ValueError):
    pass


class TapeMismatch(CopyDetectError, ValueError):
    pass


class CheckpointError(CopyDetectError):
    pass


@dataclass(eq=False)
class EncoderParams:
    W1: np.ndarray  # (hidden, input width)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (dim, hidden)
    b2: np.ndarray  # (dim,)
    class_proxies: np.ndarray  # (classes, dim)
    features: str = "edges"

    ARRAYS = ("W1", "b1", "W2", "b2", "class_proxies")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        """(input width, hidden, descriptor dim, classes)."""
        return self.W1.shape[1], self.W1.shape[0], self.W2.shape[0], self.class_proxies.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.ARRAYS}

    def copy(self) -> "EncoderParams":
        return EncoderParams(**{k: v.copy() for k, v in self.arrays().items()}, features=self.features)

    def zeros_like(self) -> "EncoderParams":
        return EncoderParams(**{k: np.zeros_like(v) for k, v in self.arrays().items()}, features=self.features)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays().values())

    def equals(self, other: "EncoderParams") -> bool:
        return self.features == other.features and all(
            np.array_equal(a, b) for a, b in zip(self.arrays().values(), other.arrays().values()))


def input_width(pixels: int, features: str) -> int:
    if features not in FEATURES:
        raise ValueError(f"unknown feature mode {features!r}; expected one of {FEATURES}")
    return pixels if features == "raw" else 2 * pixels // POOL**2


def init_params(seed: int, pixels: int = 64 * 64, hidden: int = 128, dim: int = 32,
                classes: int = 1, features: str = "edges") -> EncoderParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, unit-norm proxies."""
    if min(pixels, hidden, dim, classes) < 1:
        raise ValueError("all encoder dimensions must be positive")
    fan_in = input_width(pixels, features)
    r = _rng.stream(seed, "init")
    a1, a2 = 1 / np.sqrt(fan_in), 1 / np.sqrt(hidden)
    W1 = r.uniform(-a1, a1, (hidden, fan_in))
    W2 = r.uniform(-a2, a2, (dim, hidden))
    proxies = r.standard_normal((classes, dim))
    proxies /= np.linalg.norm(proxies, axis=1, keepdims=True)
    return EncoderParams(W1, np.zeros(hidden), W2, np.zeros(dim), proxies, features)


@dataclass(eq=False)
class Tape:
    params: EncoderParams
    inputs: np.ndarray  # (n, input width)
    hidden_pre: np.ndarray  # (n, hidden)


def image_features(images, features: str = "edges") -> np.ndarray:
    """Stack the network inputs for a sequence of images (ToyImage or 2-D arrays)."""
    grids = np.stack([np.asarray(getattr(im, "pixels", im), dtype=np.float64) for im in images])
    if grids.ndim != 3:
        raise ShapeMismatch("images must be 2-D pixel grids")
    n = grids.shape[0]
    if features == "raw":
        return grids.reshape(n, -1)
    if features != "edges":
        raise ValueError(f"unknown feature mode {features!r}")
    edges = np.abs(ndimage.convolve(grids, _LAPLACIAN[None], mode="reflect"))
    return np.concatenate([_pool(grids - 0.5), _pool(edges)], axis=1)


def _pool(grids: np.ndarray, k: int = POOL) -> np.ndarray:
    n, h, w = grids.shape
    if h % k or w % k:
        raise ShapeMismatch(f"image side must be a multiple of {k} for pooled features")
    return grids.reshape(n, h // k, k, w // k, k).mean(axis=(2, 4)).reshape(n, -1)


def forward_batch(params: EncoderParams, images) -> tuple[np.ndarray, Tape]:
    """Embed a sequence of images; returns ``(n, dim)`` outputs and the tape."""
    X = image_features(images, params.features)
    if X.shape[1] != params.W1.shape[1]:
        raise ShapeMismatch(f"input width {X.shape[1]} does not match encoder width {params.W1.shape[1]}")
    pre = X @ params.W1.T + params.b1
    Y = np.maximum(pre, 0.0) @ params.W2.T + params.b2
    return Y, Tape(params, X, pre)


def forward(params: EncoderParams, img) -> tuple[Descriptor, Tape]:
    Y, tape = forward_batch(params, [img])
    return Descriptor(getattr(img, "id", 0), Y[0]), tape


def backward(tape: Tape, grad_output) -> EncoderParams:
    """Gradients of ``sum_n <grad_output[n], y[n]>`` w.r.t. every weight.

    The returned ``class_proxies`` entry is zero; proxy gradients come from
    the loss, not from the network.
    """
    p = tape.params
    G = np.asarray(grad_output, dtype=np.float64)
    if G.ndim == 1:
        G = G[None, :]
    if G.shape != (tape.inputs.shape[0], p.W2.shape[0]):
        raise TapeMismatch(f"grad_output shape {G.shape} does not match tape "
                           f"({tape.inputs.shape[0]}, {p.W2.shape[0]})")
    H = np.maximum(tape.hidden_pre, 0.0)
    dH = (G @ p.W2) * (tape.hidden_pre > 0)
    return EncoderParams(
        W1=dH.T @ tape.inputs,
        b1=dH.sum(axis=0),
        W2=G.T @ H,
        b2=G.sum(axis=0),
        class_proxies=np.zeros_like(p.class_proxies),
        features=p.features,
    )


def embed(params: EncoderParams, images, batch: int = 256) -> list[Descriptor]:
    out = []
    for k in range(0, len(images), batch):
        chunk = images[k:k + batch]
        Y, _ = forward_batch(params, chunk)
        out += [Descriptor(im.id, y) for im, y in zip(chunk, Y)]
    return out


# -- checkpoint --------------------------------------------------------------

def save_params(path, params: EncoderParams) -> None:
    """Layout: magic, u32 version, u32 feature mode (index into FEATURES),
    u32 input width, u32 hidden, u32 dim, u32 classes, then W1, b1, W2, b2 and
    the proxies as little-endian float64 in row-major order."""
    width, hidden, dim, classes = params.dims
    mode = FEATURES.index(params.features)
    with open(path, "wb") as f:
        f.write(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, mode, width, hidden, dim, classes))
        for arr in params.arrays().values():
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_params(path) -> EncoderParams:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEADER.size or raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    _, version, mode, width, hidden, dim, classes = _CKPT_HEADER.unpack_from(raw)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if mode >= len(FEATURES):
        raise CheckpointError(f"{path}: unknown feature mode {mode}")
    shapes = [(hidden, width), (hidden,), (dim, hidden), (dim,), (classes, dim)]
    need = _CKPT_HEADER.size + 8 * sum(int(np.prod(s)) for s in shapes)
    if len(raw) != need:
        raise CheckpointError(f"{path}: expected {need} bytes, found {len(raw)}")
    arrays, off = [], _CKPT_HEADER.size
    for s in shapes:
        n = int(np.prod(s))
        arrays.append(np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(s).copy())
        off += 8 * n
    return EncoderParams(*arrays, features=FEATURES[mode])
