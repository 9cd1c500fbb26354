"""Appearance-potential sources: file-backed unaries and a tiny conv net.

The built-in net is deliberately small (two 3^3 conv layers, 1 -> 8 -> 8
channels with ReLU, then a 1^3 classification layer to K) so that exact
gradient checks and end-to-end desk-scale training stay fast. Any external
segmenter can supply unaries instead via a VOL1 probability volume.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MissingFileError, ShapeError
from .volume import ProbVolume, ScalarVolume, read_vol1

LOG_FLOOR = 1e-12

HIDDEN = 8


class TinyNetParams:
    """Weights of the built-in classifier, exposable as one flat vector."""

    FIELDS = ("w1", "b1", "w2", "b2", "w3", "b3")

    def __init__(self, w1, b1, w2, b2, w3, b3):
        self.w1 = np.ascontiguousarray(w1, dtype=np.float64)
        self.b1 = np.ascontiguousarray(b1, dtype=np.float64)
        self.w2 = np.ascontiguousarray(w2, dtype=np.float64)
        self.b2 = np.ascontiguousarray(b2, dtype=np.float64)
        self.w3 = np.ascontiguousarray(w3, dtype=np.float64)
        self.b3 = np.ascontiguousarray(b3, dtype=np.float64)
        k = self.w3.shape[0]
        expected = {
            "w1": (HIDDEN, 1, 3, 3, 3),
            "b1": (HIDDEN,),
            "w2": (HIDDEN, HIDDEN, 3, 3, 3),
            "b2": (HIDDEN,),
            "w3": (k, HIDDEN),
            "b3": (k,),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ShapeError(f"tiny net {name} must have shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ShapeError(f"tiny net {name} has non-finite entries")

    @property
    def k(self) -> int:
        return self.w3.shape[0]

    @classmethod
    def init(cls, k: int, rng: np.random.Generator) -> "TinyNetParams":
        """He-style initialization; biases start at zero."""
        w1 = rng.normal(0.0, np.sqrt(2.0 / 27.0), size=(HIDDEN, 1, 3, 3, 3))
        w2 = rng.normal(0.0, np.sqrt(2.0 / (27.0 * HIDDEN)), size=(HIDDEN, HIDDEN, 3, 3, 3))
        w3 = rng.normal(0.0, np.sqrt(2.0 / HIDDEN), size=(k, HIDDEN))
        return cls(w1, np.zeros(HIDDEN), w2, np.zeros(HIDDEN), w3, np.zeros(k))

    @classmethod
    def zeros(cls, k: int) -> "TinyNetParams":
        return cls(
            np.zeros((HIDDEN, 1, 3, 3, 3)),
            np.zeros(HIDDEN),
            np.zeros((HIDDEN, HIDDEN, 3, 3, 3)),
            np.zeros(HIDDEN),
            np.zeros((k, HIDDEN)),
            np.zeros(k),
        )

    def to_flat(self) -> np.ndarray:
        return np.concatenate([getattr(self, f).ravel() for f in self.FIELDS])

    @classmethod
    def from_flat(cls, flat: np.ndarray, k: int) -> "TinyNetParams":
        shapes = [
            (HIDDEN, 1, 3, 3, 3),
            (HIDDEN,),
            (HIDDEN, HIDDEN, 3, 3, 3),
            (HIDDEN,),
            (k, HIDDEN),
            (k,),
        ]
        sizes = [int(np.prod(s)) for s in shapes]
        if flat.shape != (sum(sizes),):
            raise ShapeError(
                f"flat tiny net vector must have length {sum(sizes)}, got {flat.shape}"
            )
        parts, start = [], 0
        for shape, size in zip(shapes, sizes):
            parts.append(flat[start : start + size].reshape(shape))
            start += size
        return cls(*parts)

    def copy(self) -> "TinyNetParams":
        return TinyNetParams(*(getattr(self, f).copy() for f in self.FIELDS))


def conv3d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3^3 convolution with zero padding 1; x is (Cin, D, H, W)."""
    cin, d, h, wd = x.shape
    co = w.shape[0]
    xp = np.zeros((cin, d + 2, h + 2, wd + 2))
    xp[:, 1:-1, 1:-1, 1:-1] = x
    out = np.broadcast_to(b[:, None, None, None], (co, d, h, wd)).copy()
    for a in range(3):
        for bb in range(3):
            for c in range(3):
                out += np.tensordot(w[:, :, a, bb, c], xp[:, a : a + d, bb : bb + h, c : c + wd], axes=(1, 0))
    return out


def conv3d_backward(x, w, dout):
    """Gradients of conv3d wrt (x, w, b)."""
    cin, d, h, wd = x.shape
    xp = np.zeros((cin, d + 2, h + 2, wd + 2))
    xp[:, 1:-1, 1:-1, 1:-1] = x
    dxp = np.zeros_like(xp)
    dw = np.empty_like(w)
    for a in range(3):
        for bb in range(3):
            for c in range(3):
                win = xp[:, a : a + d, bb : bb + h, c : c + wd]
                dw[:, :, a, bb, c] = np.tensordot(dout, win, axes=([1, 2, 3], [1, 2, 3]))
                dxp[:, a : a + d, bb : bb + h, c : c + wd] += np.tensordot(
                    w[:, :, a, bb, c].T, dout, axes=(1, 0)
                )
    db = dout.sum(axis=(1, 2, 3))
    return dxp[:, 1:-1, 1:-1, 1:-1], dw, db


def conv1x1(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.tensordot(w, x, axes=(1, 0)) + b[:, None, None, None]


def conv1x1_backward(x, w, dout):
    dw = np.tensordot(dout, x, axes=([1, 2, 3], [1, 2, 3]))
    dx = np.tensordot(w.T, dout, axes=(1, 0))
    db = dout.sum(axis=(1, 2, 3))
    return dx, dw, db


def tinynet_forward(params: TinyNetParams, target: np.ndarray, save: dict | None = None):
    """Logits of the built-in net; ``save`` collects intermediates for backward."""
    x = target[None]
    z1 = conv3d(x, params.w1, params.b1)
    a1 = np.maximum(z1, 0.0)
    z2 = conv3d(a1, params.w2, params.b2)
    a2 = np.maximum(z2, 0.0)
    logits = conv1x1(a2, params.w3, params.b3)
    if save is not None:
        save.update(x=x, z1=z1, a1=a1, z2=z2, a2=a2)
    return logits


def tinynet_backward(params: TinyNetParams, saved: dict, dlogits: np.ndarray) -> "TinyNetParams":
    """Exact gradients wrt every layer; returned in a params-shaped container."""
    da2, dw3, db3 = conv1x1_backward(saved["a2"], params.w3, dlogits)
    dz2 = da2 * (saved["z2"] > 0.0)
    da1, dw2, db2 = conv3d_backward(saved["a1"], params.w2, dz2)
    dz1 = da1 * (saved["z1"] > 0.0)
    _, dw1, db1 = conv3d_backward(saved["x"], params.w1, dz1)
    return TinyNetParams(dw1, db1, dw2, db2, dw3, db3)


@dataclass(frozen=True)
class FileBacked:
    """Unary source loaded from a VOL1 probability volume."""

    path: str


@dataclass(frozen=True)
class TinyNet:
    """Unary source computed by the built-in classifier."""

    params: TinyNetParams


def unary_logits(source, target: ScalarVolume, k: int) -> np.ndarray:
    """Raw K-channel logits for the target scan.

    File-backed volumes flagged normalized are converted with
    log(p + 1e-12) so that softmax(logits) reproduces the stored
    distribution; raw score files pass through unchanged.
    """
    if isinstance(source, FileBacked):
        try:
            vol = read_vol1(source.path)
        except FileNotFoundError:
            raise MissingFileError(f"unary file not found: {source.path}")
        if not isinstance(vol, ProbVolume):
            raise ShapeError(f"unary file {source.path} is not a probability volume")
        if vol.k != k:
            raise ShapeError(f"unary file has K={vol.k}, expected K={k}")
        if vol.dims != target.dims:
            raise ShapeError(f"unary dims {vol.dims} != target dims {target.dims}")
        data = vol.data.astype(np.float64)
        if vol.normalized:
            return np.log(data + LOG_FLOOR)
        return data
    if isinstance(source, TinyNet):
        if source.params.k != k:
            raise ShapeError(f"tiny net emits K={source.params.k}, expected K={k}")
        return tinynet_forward(source.params, target.data.astype(np.float64))
    raise ShapeError(f"unknown unary source type: {type(source).__name__}")
