"""Probabilistic atlas construction and coarse target alignment.

The atlas pair is the voxelwise mean of co-registered scans and the mean of
their one-hot label maps. Alignment at inference is reduced to an integer
translation found by exhaustive normalized cross-correlation; the CRF's
dilated connectivity tolerates the residual local deviations.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidParamError, ShapeError
from .volume import AtlasPair, LabelMap, ProbVolume, ScalarVolume, one_hot


def build_atlas(pairs: list[tuple[ScalarVolume, LabelMap]], k: int) -> AtlasPair:
    """Average aligned scans and one-hot labels into an atlas pair.

    The label average of one-hot maps is normalized by construction.
    """
    if not pairs:
        raise InvalidParamError("atlas construction needs at least one scan/label pair")
    dims = pairs[0][0].dims
    scan_acc = np.zeros(dims, dtype=np.float64)
    label_acc = np.zeros((k,) + dims, dtype=np.float64)
    for scan, labels in pairs:
        if scan.dims != dims or labels.dims != dims:
            raise ShapeError(f"pair dims {scan.dims}/{labels.dims} != reference dims {dims}")
        scan_acc += scan.data
        label_acc += one_hot(labels, k).data
    n = len(pairs)
    return AtlasPair(
        ScalarVolume(scan_acc / n),
        ProbVolume(label_acc / n, normalized=True),
    )


def _shift_volume(data: np.ndarray, shift, fill) -> np.ndarray:
    """Translate content by ``shift`` voxels, padding exposed space with fill."""
    out = np.full_like(data, fill)
    src = []
    dst = []
    for axis, s in enumerate(shift):
        n = data.shape[axis]
        if abs(s) >= n:
            return out
        if s >= 0:
            dst.append(slice(s, n))
            src.append(slice(0, n - s))
        else:
            dst.append(slice(0, n + s))
            src.append(slice(-s, n))
    out[tuple(dst)] = data[tuple(src)]
    return out


def shift_atlas(atlas: AtlasPair, shift) -> AtlasPair:
    """Translate both atlas volumes; labels are padded with uniform 1/K."""
    k = atlas.k
    scan = _shift_volume(atlas.scan.data.astype(np.float64), shift, 0.0)
    labels = np.stack(
        [_shift_volume(atlas.labels.data[l].astype(np.float64), shift, 1.0 / k) for l in range(k)]
    )
    return AtlasPair(ScalarVolume(scan), ProbVolume(labels, normalized=True))


def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    am = a - a.mean()
    bm = b - b.mean()
    denom = np.sqrt((am * am).sum() * (bm * bm).sum())
    if denom == 0.0:
        return -np.inf
    return float((am * bm).sum() / denom)


def align_translation(atlas: AtlasPair, target: ScalarVolume, max_shift: int) -> tuple[AtlasPair, tuple[int, int, int]]:
    """Best integer translation of the atlas onto the target by exhaustive NCC.

    Scores are computed over the overlap region of each candidate shift; ties
    break to the lexicographically smallest (dz, dy, dx). Returns the shifted
    atlas and the chosen shift; max_shift=0 is the identity.
    """
    if max_shift < 0:
        raise InvalidParamError(f"max_shift must be >= 0, got {max_shift}")
    if atlas.dims != target.dims:
        raise ShapeError(f"atlas dims {atlas.dims} != target dims {target.dims}")
    if max_shift == 0:
        return atlas, (0, 0, 0)
    a = atlas.scan.data.astype(np.float64)
    t = target.data.astype(np.float64)
    dims = t.shape
    best_score = -np.inf
    best_shift = None
    for dz in range(-max_shift, max_shift + 1):
        for dy in range(-max_shift, max_shift + 1):
            for dx in range(-max_shift, max_shift + 1):
                shift = (dz, dy, dx)
                if any(abs(s) >= n for s, n in zip(shift, dims)):
                    continue
                src = []
                dst = []
                for s, n in zip(shift, dims):
                    if s >= 0:
                        dst.append(slice(s, n))
                        src.append(slice(0, n - s))
                    else:
                        dst.append(slice(0, n + s))
                        src.append(slice(-s, n))
                score = _ncc(a[tuple(src)], t[tuple(dst)])
                if score > best_score:
                    best_score = score
                    best_shift = shift
    if best_shift is None:
        return atlas, (0, 0, 0)
    return shift_atlas(atlas, best_shift), best_shift


def intensity_standardize(v: ScalarVolume) -> ScalarVolume:
    """Zero-mean unit-variance rescaling; constant volumes map to all zeros."""
    data = v.data.astype(np.float64)
    mean = data.mean()
    std = data.std()
    if std == 0.0:
        return ScalarVolume(np.zeros_like(data))
    return ScalarVolume((data - mean) / std)
