"""Label compatibility, intensity-similarity kernels, and message passing.

The prior potential couples a target voxel to the S^3 atlas voxels at
dilated offsets around its corresponding location; the smoothness potential
couples it to its own S^3 neighborhood (self-connection excluded). Both
messages are computed as spatially-varying convolutions with Gaussian
intensity kernels and zero padding at the volume boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from ._threads import num_threads
from .errors import InvalidParamError, ShapeError
from .volume import ProbVolume, ScalarVolume


@dataclass(frozen=True)
class Connectivity:
    """S^3 neighborhood (``size`` per axis, odd) with dilation ``dilation``."""

    size: int = 5
    dilation: int = 1

    def __post_init__(self):
        if self.size < 1 or self.size % 2 == 0:
            raise InvalidParamError(f"neighborhood size must be odd and positive, got {self.size}")
        if self.dilation < 1:
            raise InvalidParamError(f"dilation must be >= 1, got {self.dilation}")

    @property
    def s3(self) -> int:
        return self.size**3

    @property
    def extent(self) -> int:
        """Effective field per axis: dilation * (size - 1) + 1."""
        return self.dilation * (self.size - 1) + 1

    def offsets(self) -> np.ndarray:
        """(S^3, 3) unscaled offsets in C order over (dz, dy, dx)."""
        h = (self.size - 1) // 2
        rng = np.arange(-h, h + 1, dtype=np.int64)
        grid = np.meshgrid(rng, rng, rng, indexing="ij")
        return np.ascontiguousarray(np.stack([g.ravel() for g in grid], axis=1))


class Compatibility:
    """K x K label compatibility matrix; penalties for differing labels."""

    __slots__ = ("mu",)

    def __init__(self, mu):
        arr = np.ascontiguousarray(mu, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ShapeError(f"compatibility matrix must be square, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidParamError("compatibility matrix has non-finite entries")
        self.mu = arr

    @classmethod
    def potts(cls, k: int) -> "Compatibility":
        """Untrained initialization: 0 on the diagonal, 1 off-diagonal."""
        return cls(np.ones((k, k)) - np.eye(k))

    @property
    def k(self) -> int:
        return self.mu.shape[0]


class PriorWeights:
    """Per-voxel spatial weight field and bandwidth for the prior potential."""

    __slots__ = ("omega_p", "theta_p")

    def __init__(self, omega_p, theta_p: float):
        if isinstance(omega_p, ScalarVolume):
            omega_p = omega_p.data
        arr = np.ascontiguousarray(omega_p, dtype=np.float64)
        if arr.ndim != 3:
            raise ShapeError(f"omega_p must be a 3-D field, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidParamError("omega_p has non-finite entries")
        if not theta_p > 0:
            raise InvalidParamError(f"theta_p must be positive, got {theta_p}")
        self.omega_p = arr
        self.theta_p = float(theta_p)


class SmoothWeights:
    """Class-wise weights and bandwidth for the smoothness potential."""

    __slots__ = ("omega_s", "theta_s")

    def __init__(self, omega_s, theta_s: float):
        arr = np.ascontiguousarray(omega_s, dtype=np.float64)
        if arr.ndim != 1:
            raise ShapeError(f"omega_s must be a length-K vector, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidParamError("omega_s has non-finite entries")
        if not theta_s > 0:
            raise InvalidParamError(f"theta_s must be positive, got {theta_s}")
        self.omega_s = arr
        self.theta_s = float(theta_s)


@dataclass(frozen=True)
class KernelField:
    """Per-voxel S^3 connection weights, shape (S^3, D, H, W)."""

    weights: np.ndarray
    conn: Connectivity

    def __post_init__(self):
        if self.weights.ndim != 4 or self.weights.shape[0] != self.conn.s3:
            raise ShapeError(
                f"kernel field shape {self.weights.shape} inconsistent with S={self.conn.size}"
            )
        self.weights.flags.writeable = False

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.weights.shape[1:]


def _as_f64(volume) -> np.ndarray:
    data = volume.data if hasattr(volume, "data") else volume
    return np.ascontiguousarray(data, dtype=np.float64)


def exp_kernel_field(
    ref: np.ndarray,
    src: np.ndarray,
    theta: float,
    conn: Connectivity,
    exclude_center: bool,
    threads: int = 1,
) -> np.ndarray:
    """Raw Gaussian intensity kernel exp(-(ref_i - src_{i+r*d})^2 / (2 theta^2)).

    Shared by the public kernel builders and the training tape (which needs
    the field before any omega scaling).
    """
    if not theta > 0:
        raise InvalidParamError(f"bandwidth must be positive, got {theta}")
    out = np.empty((conn.s3,) + ref.shape, dtype=np.float64)
    inv2t2 = 1.0 / (2.0 * theta * theta)
    with num_threads(threads):
        _kernels.fill_exp_field(
            out, ref, src, conn.offsets(), conn.dilation, inv2t2, exclude_center
        )
    return out


def apply_kernel_field(
    kern: np.ndarray, probs: np.ndarray, conn: Connectivity, threads: int = 1
) -> np.ndarray:
    """out[l, i] = sum_d kern[d, i] * probs[l, i + r*d] with zero padding."""
    if kern.shape[1:] != probs.shape[1:]:
        raise ShapeError(f"kernel dims {kern.shape[1:]} != field dims {probs.shape[1:]}")
    out = np.empty_like(probs)
    with num_threads(threads):
        _kernels.apply_field(out, kern, probs, conn.offsets(), conn.dilation)
    return out


def prior_kernel(
    target: ScalarVolume,
    atlas_scan: ScalarVolume,
    w: PriorWeights,
    c: Connectivity,
    threads: int = 1,
) -> KernelField:
    """Dilated kernel K[i, r*d] = omega_p[i] * exp(-(T_i - A_{i+r*d})^2 / (2 theta_p^2))."""
    if target.dims != atlas_scan.dims:
        raise ShapeError(f"target dims {target.dims} != atlas dims {atlas_scan.dims}")
    if w.omega_p.shape != target.dims:
        raise ShapeError(f"omega_p dims {w.omega_p.shape} != target dims {target.dims}")
    kern = exp_kernel_field(
        _as_f64(target), _as_f64(atlas_scan), w.theta_p, c, exclude_center=False, threads=threads
    )
    kern *= w.omega_p[None]
    return KernelField(kern, c)


def prior_message(
    atlas_labels: ProbVolume,
    kernel: KernelField,
    c: Connectivity | None = None,
    threads: int = 1,
) -> np.ndarray:
    """M_p[i, l] = sum_d K[i, r*d] * S_A[i + r*d, l].

    The atlas labels are observed, so this message is constant across
    mean-field iterations and is computed once per scan.
    """
    if c is not None and c != kernel.conn:
        raise InvalidParamError("connectivity disagrees with the kernel field's")
    if atlas_labels.dims != kernel.dims:
        raise ShapeError(f"atlas label dims {atlas_labels.dims} != kernel dims {kernel.dims}")
    if not atlas_labels.normalized:
        raise InvalidParamError("prior message requires normalized atlas labels")
    return apply_kernel_field(kernel.weights, _as_f64(atlas_labels), kernel.conn, threads)


def smoothness_kernel(
    target: ScalarVolume, w: SmoothWeights, c: Connectivity, threads: int = 1
) -> KernelField:
    """K[i, d] = exp(-(T_i - T_{i+d})^2 / (2 theta_s^2)); self-connection excluded.

    The class-wise omega_s is applied in smoothness_message, not here.
    """
    t = _as_f64(target)
    kern = exp_kernel_field(t, t, w.theta_s, c, exclude_center=True, threads=threads)
    return KernelField(kern, c)


def smoothness_message(
    q,
    kernel: KernelField,
    w: SmoothWeights,
    c: Connectivity | None = None,
    threads: int = 1,
) -> np.ndarray:
    """M_s[i, l] = omega_s[l] * sum_d K[i, d] * Q[i + d, l]."""
    if c is not None and c != kernel.conn:
        raise InvalidParamError("connectivity disagrees with the kernel field's")
    probs = _as_f64(q)
    if probs.ndim != 4:
        raise ShapeError(f"expected (K, D, H, W) distribution, got shape {probs.shape}")
    if probs.shape[1:] != kernel.dims:
        raise ShapeError(f"distribution dims {probs.shape[1:]} != kernel dims {kernel.dims}")
    if w.omega_s.shape[0] != probs.shape[0]:
        raise ShapeError(f"omega_s has {w.omega_s.shape[0]} classes, field has {probs.shape[0]}")
    raw = apply_kernel_field(kernel.weights, probs, kernel.conn, threads)
    raw *= w.omega_s[:, None, None, None]
    return raw


def compatibility_transform(message: np.ndarray, mu) -> np.ndarray:
    """out[i, l] = sum_l' mu[l, l'] * message[i, l']."""
    m = mu.mu if isinstance(mu, Compatibility) else np.asarray(mu, dtype=np.float64)
    msg = np.asarray(message, dtype=np.float64)
    if msg.ndim != 4:
        raise ShapeError(f"expected (K, D, H, W) message, got shape {msg.shape}")
    if m.shape != (msg.shape[0], msg.shape[0]):
        raise ShapeError(f"compatibility shape {m.shape} incompatible with K={msg.shape[0]}")
    k = msg.shape[0]
    return (m @ msg.reshape(k, -1)).reshape(msg.shape)


def fused_prior_message(
    target: ScalarVolume,
    atlas_scan: ScalarVolume,
    atlas_labels: ProbVolume,
    w: PriorWeights,
    c: Connectivity,
    threads: int = 1,
) -> np.ndarray:
    """prior_message(atlas_labels, prior_kernel(...)) without materializing
    the kernel field; bit-identical to the two-step path."""
    if target.dims != atlas_scan.dims or target.dims != atlas_labels.dims:
        raise ShapeError(
            f"dims mismatch: target {target.dims}, atlas {atlas_scan.dims}, "
            f"labels {atlas_labels.dims}"
        )
    if w.omega_p.shape != target.dims:
        raise ShapeError(f"omega_p dims {w.omega_p.shape} != target dims {target.dims}")
    if not atlas_labels.normalized:
        raise InvalidParamError("prior message requires normalized atlas labels")
    probs = _as_f64(atlas_labels)
    out = np.empty_like(probs)
    inv2t2 = 1.0 / (2.0 * w.theta_p * w.theta_p)
    with num_threads(threads):
        _kernels.fused_gauss_message(
            out,
            _as_f64(target),
            _as_f64(atlas_scan),
            w.omega_p,
            probs,
            c.offsets(),
            c.dilation,
            inv2t2,
            False,
        )
    return out
