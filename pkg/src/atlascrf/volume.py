"""Core 3D volume containers, label encodings, channel softmax, and VOL1 I/O.

Conventions fixed here and relied on everywhere else:

* voxel storage is C order over (d, h, w); probability volumes are
  channel-major (k, d, h, w) so each class is a contiguous plane;
* scalar/probability payloads are float32, label payloads uint16;
* accumulations that sum over many voxels are done in float64.

Volumes are immutable after construction: the backing arrays are marked
read-only and every operation returns a new object.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagicError,
    DimOverflowError,
    FormatError,
    InvalidParamError,
    NonFiniteError,
    ShapeError,
    TruncatedPayloadError,
)

MAGIC = b"VOL1"
_HEADER = struct.Struct("<4sBBHIIII")

KIND_SCALAR = 0
KIND_PROB = 1
KIND_LABEL = 2

# declared payload larger than this is rejected before any allocation
_MAX_PAYLOAD_BYTES = 1 << 32

NORMALIZED_ATOL = 1e-6


def _first_nonfinite(data: np.ndarray) -> tuple:
    bad = ~np.isfinite(data)
    flat = int(np.argmax(bad))
    return np.unravel_index(flat, data.shape)


def _check_finite(data: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(data)):
        idx = _first_nonfinite(data)
        raise NonFiniteError(f"{what} contains a non-finite value at index {idx}")


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


class ScalarVolume:
    """One-channel 3D grid of intensities, shape (D, H, W), float32."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim != 3:
            raise ShapeError(f"scalar volume must be 3-D, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"scalar volume dims must be positive, got {arr.shape}")
        _check_finite(arr, "scalar volume")
        self.data = _freeze(arr)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def __eq__(self, other):
        return isinstance(other, ScalarVolume) and np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"ScalarVolume(dims={self.dims})"


class ProbVolume:
    """K-channel per-voxel distribution (or raw scores), shape (K, D, H, W).

    ``normalized`` flags whether every voxel's channels sum to 1 within
    ``NORMALIZED_ATOL``; raw score volumes carry ``normalized=False``.
    """

    __slots__ = ("data", "normalized")

    def __init__(self, data, normalized: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim != 4:
            raise ShapeError(f"probability volume must be 4-D, got shape {arr.shape}")
        if arr.shape[0] < 2:
            raise ShapeError(f"probability volume needs K >= 2 channels, got K={arr.shape[0]}")
        if min(arr.shape[1:]) < 1:
            raise ShapeError(f"probability volume dims must be positive, got {arr.shape}")
        _check_finite(arr, "probability volume")
        if normalized:
            sums = arr.astype(np.float64).sum(axis=0)
            if np.any(arr < -NORMALIZED_ATOL) or np.any(np.abs(sums - 1.0) > NORMALIZED_ATOL):
                raise InvalidParamError(
                    "volume flagged normalized but channels do not sum to 1 within "
                    f"{NORMALIZED_ATOL:g}"
                )
        self.data = _freeze(arr)
        self.normalized = bool(normalized)

    @property
    def k(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[1:]

    def __eq__(self, other):
        return isinstance(other, ProbVolume) and np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"ProbVolume(k={self.k}, dims={self.dims}, normalized={self.normalized})"


class LabelMap:
    """Per-voxel class index in [0, num_classes), shape (D, H, W), uint16."""

    __slots__ = ("data", "num_classes")

    def __init__(self, data, num_classes: int):
        arr = np.asarray(data)
        if arr.ndim != 3:
            raise ShapeError(f"label map must be 3-D, got shape {arr.shape}")
        if num_classes < 1 or num_classes > 0xFFFF:
            raise InvalidParamError(f"num_classes out of range: {num_classes}")
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            bad = np.flatnonzero((arr < 0) | (arr >= num_classes))[0]
            idx = np.unravel_index(bad, arr.shape)
            raise InvalidParamError(
                f"label {arr[idx]} at voxel {idx} out of range for num_classes={num_classes}"
            )
        self.data = _freeze(arr.astype(np.uint16))
        self.num_classes = int(num_classes)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def __eq__(self, other):
        return (
            isinstance(other, LabelMap)
            and self.num_classes == other.num_classes
            and np.array_equal(self.data, other.data)
        )

    def __repr__(self):
        return f"LabelMap(dims={self.dims}, num_classes={self.num_classes})"


@dataclass(frozen=True)
class AtlasPair:
    """Atlas scan plus its probabilistic label map, spatially aligned."""

    scan: ScalarVolume
    labels: ProbVolume

    def __post_init__(self):
        if self.scan.dims != self.labels.dims:
            raise ShapeError(
                f"atlas scan dims {self.scan.dims} != label dims {self.labels.dims}"
            )
        if not self.labels.normalized:
            raise InvalidParamError("atlas labels must be a normalized probability volume")

    @property
    def k(self) -> int:
        return self.labels.k

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.scan.dims


def softmax_channels(logits) -> ProbVolume:
    """Per-voxel softmax over channels with max-subtraction for stability."""
    if isinstance(logits, ProbVolume):
        raw = logits.data
    else:
        raw = np.asarray(logits)
        if raw.ndim != 4:
            raise ShapeError(f"expected (K, D, H, W) scores, got shape {raw.shape}")
    if not np.all(np.isfinite(raw)):
        idx = _first_nonfinite(raw)
        raise NonFiniteError(
            f"softmax input non-finite at voxel {idx[1:]} channel {idx[0]}"
        )
    return ProbVolume(softmax_channels_raw(raw.astype(np.float64)), normalized=True)


def softmax_channels_raw(scores: np.ndarray) -> np.ndarray:
    """float64 softmax over axis 0; shared by inference and training internals."""
    shifted = scores - scores.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def one_hot(labels: LabelMap, k: int) -> ProbVolume:
    """Encode a label map as a one-hot probability volume with K=k channels."""
    if k < 2:
        raise InvalidParamError(f"one_hot needs k >= 2, got {k}")
    arr = labels.data
    if arr.size and arr.max() >= k:
        bad = np.flatnonzero(arr >= k)[0]
        idx = np.unravel_index(bad, arr.shape)
        raise InvalidParamError(f"label {arr[idx]} at voxel {idx} out of range for k={k}")
    out = np.zeros((k,) + arr.shape, dtype=np.float32)
    d, h, w = np.indices(arr.shape, sparse=True)
    out[arr.astype(np.int64), d, h, w] = 1.0
    return ProbVolume(out, normalized=True)


def argmax_labels(q: ProbVolume) -> LabelMap:
    """MAP readout: per-voxel index of the maximal channel, ties to lowest index."""
    return LabelMap(np.argmax(q.data, axis=0).astype(np.uint16), num_classes=q.k)


def _kind_of(volume) -> int:
    if isinstance(volume, ScalarVolume):
        return KIND_SCALAR
    if isinstance(volume, ProbVolume):
        return KIND_PROB
    if isinstance(volume, LabelMap):
        return KIND_LABEL
    raise InvalidParamError(f"not a writable volume type: {type(volume).__name__}")


def write_vol1(path, volume) -> None:
    """Serialize a volume to the VOL1 container (lossless round trip)."""
    kind = _kind_of(volume)
    if kind == KIND_SCALAR:
        k, (d, h, w) = 1, volume.dims
        payload = volume.data.astype("<f4", copy=False).tobytes()
        dtype_code = 0
    elif kind == KIND_PROB:
        k, (d, h, w) = volume.k, volume.dims
        payload = volume.data.astype("<f4", copy=False).tobytes()
        dtype_code = 0
    else:
        k, (d, h, w) = volume.num_classes, volume.dims
        payload = volume.data.astype("<u2", copy=False).tobytes()
        dtype_code = 1
    for n in (k, d, h, w):
        if n > 0xFFFFFFFF:
            raise DimOverflowError(f"dimension {n} does not fit the u32 header field")
    header = _HEADER.pack(MAGIC, kind, dtype_code, 0, k, d, h, w)
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def read_vol1(path):
    """Read a VOL1 file back into the matching volume type."""
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) < 4:
            raise TruncatedPayloadError(f"{path}: file shorter than the magic field")
        if head[:4] != MAGIC:
            raise BadMagicError(f"{path}: bad magic {head[:4]!r}")
        if len(head) < _HEADER.size:
            raise TruncatedPayloadError(f"{path}: truncated header")
        _, kind, dtype_code, reserved, k, d, h, w = _HEADER.unpack(head)
        if reserved != 0:
            raise FormatError(f"{path}: reserved field must be 0, got {reserved}")
        if kind not in (KIND_SCALAR, KIND_PROB, KIND_LABEL):
            raise FormatError(f"{path}: unknown kind {kind}")
        expected_dtype = 1 if kind == KIND_LABEL else 0
        if dtype_code != expected_dtype:
            raise FormatError(f"{path}: dtype {dtype_code} invalid for kind {kind}")
        if min(d, h, w) < 1 or k < 1:
            raise FormatError(f"{path}: non-positive dims (K={k}, D={d}, H={h}, W={w})")
        channels = k if kind == KIND_PROB else 1
        itemsize = 2 if kind == KIND_LABEL else 4
        nbytes = channels * d * h * w * itemsize
        if nbytes > _MAX_PAYLOAD_BYTES:
            raise DimOverflowError(
                f"{path}: declared payload {nbytes} bytes exceeds the 4 GiB limit"
            )
        payload = f.read(nbytes)
        if len(payload) < nbytes:
            raise TruncatedPayloadError(
                f"{path}: payload has {len(payload)} of {nbytes} declared bytes"
            )
    if kind == KIND_SCALAR:
        data = np.frombuffer(payload, dtype="<f4").reshape(d, h, w)
        return ScalarVolume(data)
    if kind == KIND_PROB:
        data = np.frombuffer(payload, dtype="<f4").reshape(k, d, h, w)
        sums = data.astype(np.float64).sum(axis=0)
        normalized = bool(
            np.all(data >= -NORMALIZED_ATOL) and np.all(np.abs(sums - 1.0) <= NORMALIZED_ATOL)
        )
        return ProbVolume(data, normalized=normalized)
    data = np.frombuffer(payload, dtype="<u2").reshape(d, h, w)
    if data.size and data.max() >= k:
        raise FormatError(f"{path}: label payload contains values >= K={k}")
    return LabelMap(data, num_classes=k)
