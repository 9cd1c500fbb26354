"""Unrolled mean-field inference fusing unary, prior, and smoothness terms.

Update schedule per iteration: message passing -> compatibility transform ->
subtract from unary logits -> per-voxel softmax. The prior message is
computed once per scan (the atlas labels are observed); only the smoothness
message depends on the evolving distribution Q.

``brute_force_infer`` is an independent oracle: the same schedule with every
connection enumerated in pure Python, sharing no convolution machinery with
the fast path. It is guarded to tiny volumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import math

import numpy as np

from . import _kernels
from ._threads import num_threads
from .errors import InvalidParamError, NonFiniteError, ShapeError, SizeGuardError
from .potentials import (
    Compatibility,
    Connectivity,
    PriorWeights,
    SmoothWeights,
    compatibility_transform,
    fused_prior_message,
)
from .volume import AtlasPair, ProbVolume, ScalarVolume, softmax_channels_raw

BRUTE_FORCE_MAX_DIM = 8


@dataclass
class CamParams:
    """All learnable CRF parameters plus structural constants."""

    mu: Compatibility
    prior: PriorWeights
    smooth: SmoothWeights
    conn_p: Connectivity = Connectivity(5, 2)
    conn_s: Connectivity = Connectivity(5, 1)
    iters: int = 5
    enable_prior: bool = True
    enable_smooth: bool = True
    # optional separate compatibility for the smoothness term; shared when None
    mu_smooth: Compatibility | None = None

    def __post_init__(self):
        if self.iters < 1:
            raise InvalidParamError(f"iteration count must be >= 1, got {self.iters}")
        if self.mu.k != self.smooth.omega_s.shape[0]:
            raise ShapeError(
                f"mu is {self.mu.k}x{self.mu.k} but omega_s has "
                f"{self.smooth.omega_s.shape[0]} classes"
            )
        if self.mu_smooth is not None and self.mu_smooth.k != self.mu.k:
            raise ShapeError("mu_smooth class count differs from mu")

    @property
    def k(self) -> int:
        return self.mu.k


def default_params(
    k: int,
    dims: tuple[int, int, int],
    theta_p: float = 0.5,
    theta_s: float = 0.5,
    omega_p_init: float = 0.05,
    omega_s_init: float = 0.02,
    **kwargs,
) -> CamParams:
    """Untrained parameter set: Potts compatibility, uniform weight fields."""
    return CamParams(
        mu=Compatibility.potts(k),
        prior=PriorWeights(np.full(dims, omega_p_init), theta_p),
        smooth=SmoothWeights(np.full(k, omega_s_init), theta_s),
        **kwargs,
    )


@dataclass
class CamInput:
    """Target scan, unary logits (-phi_a), and the aligned atlas pair."""

    target: ScalarVolume
    unary: np.ndarray
    atlas: AtlasPair

    def __post_init__(self):
        if isinstance(self.unary, ProbVolume):
            self.unary = self.unary.data
        self.unary = np.ascontiguousarray(self.unary, dtype=np.float64)
        if self.unary.ndim != 4:
            raise ShapeError(f"unary must be (K, D, H, W), got shape {self.unary.shape}")
        if self.unary.shape[1:] != self.target.dims:
            raise ShapeError(
                f"unary dims {self.unary.shape[1:]} != target dims {self.target.dims}"
            )
        if self.atlas.dims != self.target.dims:
            raise ShapeError(f"atlas dims {self.atlas.dims} != target dims {self.target.dims}")
        if self.atlas.k != self.unary.shape[0]:
            raise ShapeError(f"atlas has K={self.atlas.k}, unary has K={self.unary.shape[0]}")

    @property
    def k(self) -> int:
        return self.unary.shape[0]


def _check_cam_shapes(inp: CamInput, params: CamParams) -> None:
    if params.k != inp.k:
        raise ShapeError(f"params are for K={params.k}, input has K={inp.k}")
    if params.prior.omega_p.shape != inp.target.dims:
        raise ShapeError(
            f"omega_p dims {params.prior.omega_p.shape} != target dims {inp.target.dims}"
        )


def _fused_smooth_raw(target_f64, ones, q, conn: Connectivity, theta_s: float, threads: int):
    out = np.empty_like(q)
    inv2t2 = 1.0 / (2.0 * theta_s * theta_s)
    with num_threads(threads):
        _kernels.fused_gauss_message(
            out, target_f64, target_f64, ones, q, conn.offsets(), conn.dilation, inv2t2, True
        )
    return out


def mean_field_infer_raw(inp: CamInput, params: CamParams, threads: int = 1) -> np.ndarray:
    """float64 Q after ``params.iters`` mean-field updates."""
    _check_cam_shapes(inp, params)
    u = inp.unary
    q = softmax_channels_raw(u)
    if not (params.enable_prior or params.enable_smooth):
        return q
    m_p = None
    if params.enable_prior:
        m_p = fused_prior_message(
            inp.target, inp.atlas.scan, inp.atlas.labels, params.prior, params.conn_p, threads
        )
    target_f64 = np.ascontiguousarray(inp.target.data, dtype=np.float64)
    ones = np.ones(inp.target.dims, dtype=np.float64)
    omega_s = params.smooth.omega_s[:, None, None, None]
    for it in range(params.iters):
        m_s = None
        if params.enable_smooth:
            m_s = _fused_smooth_raw(
                target_f64, ones, q, params.conn_s, params.smooth.theta_s, threads
            )
            m_s *= omega_s
        if params.mu_smooth is None:
            msg = m_p if m_s is None else (m_s if m_p is None else m_p + m_s)
            pairwise = compatibility_transform(msg, params.mu)
        else:
            pairwise = 0.0
            if m_p is not None:
                pairwise = compatibility_transform(m_p, params.mu)
            if m_s is not None:
                pairwise = pairwise + compatibility_transform(m_s, params.mu_smooth)
        q = softmax_channels_raw(u - pairwise)
        if not np.all(np.isfinite(q)):
            bad = np.unravel_index(int(np.argmax(~np.isfinite(q))), q.shape)
            raise NonFiniteError(
                f"non-finite Q at iteration {it + 1}, voxel {bad[1:]}, channel {bad[0]}"
            )
    return q


def mean_field_infer(inp: CamInput, params: CamParams, threads: int = 1) -> ProbVolume:
    """CAM forward pass; returns the normalized labeling distribution Q."""
    return ProbVolume(mean_field_infer_raw(inp, params, threads), normalized=True)


def ablate(params: CamParams, drop: str) -> CamParams:
    """Clear enable flags for inference-time potential removal; learned
    values are untouched."""
    if drop == "prior":
        return replace(params, enable_prior=False)
    if drop == "smooth":
        return replace(params, enable_smooth=False)
    if drop == "both":
        return replace(params, enable_prior=False, enable_smooth=False)
    raise InvalidParamError(f"drop must be one of prior|smooth|both, got {drop!r}")


def _softmax_row(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def brute_force_infer(inp: CamInput, params: CamParams) -> np.ndarray:
    """Oracle mean-field pass with every connection enumerated explicitly.

    Pure Python over flat lists; guarded to volumes of at most
    ``BRUTE_FORCE_MAX_DIM`` per axis.
    """
    _check_cam_shapes(inp, params)
    d_dim, h_dim, w_dim = inp.target.dims
    if max(d_dim, h_dim, w_dim) > BRUTE_FORCE_MAX_DIM:
        raise SizeGuardError(
            f"brute force limited to {BRUTE_FORCE_MAX_DIM}^3 volumes, got {inp.target.dims}"
        )
    k = inp.k
    n = d_dim * h_dim * w_dim
    t = [float(v) for v in inp.target.data.ravel()]
    a = [float(v) for v in inp.atlas.scan.data.ravel()]
    sa = [[float(v) for v in inp.atlas.labels.data[l].ravel()] for l in range(k)]
    u = [[float(v) for v in inp.unary[l].ravel()] for l in range(k)]
    omega_p = [float(v) for v in params.prior.omega_p.ravel()]
    omega_s = [float(v) for v in params.smooth.omega_s]
    mu = [[float(params.mu.mu[i, j]) for j in range(k)] for i in range(k)]
    mu_s = mu if params.mu_smooth is None else [
        [float(params.mu_smooth.mu[i, j]) for j in range(k)] for i in range(k)
    ]

    def coords(i):
        z, rem = divmod(i, h_dim * w_dim)
        y, x = divmod(rem, w_dim)
        return z, y, x

    def neighbors(conn: Connectivity, include_center: bool):
        half = (conn.size - 1) // 2
        r = conn.dilation
        table = []
        for i in range(n):
            z, y, x = coords(i)
            js = []
            for dz in range(-half, half + 1):
                for dy in range(-half, half + 1):
                    for dx in range(-half, half + 1):
                        if not include_center and dz == 0 and dy == 0 and dx == 0:
                            continue
                        zz, yy, xx = z + r * dz, y + r * dy, x + r * dx
                        if 0 <= zz < d_dim and 0 <= yy < h_dim and 0 <= xx < w_dim:
                            js.append((zz * h_dim + yy) * w_dim + xx)
            table.append(js)
        return table

    q = [_softmax_row([u[l][i] for l in range(k)]) for i in range(n)]
    if not (params.enable_prior or params.enable_smooth):
        out = np.empty((k, n))
        for i in range(n):
            for l in range(k):
                out[l, i] = q[i][l]
        return out.reshape(k, d_dim, h_dim, w_dim)

    m_p = None
    if params.enable_prior:
        inv2 = 1.0 / (2.0 * params.prior.theta_p**2)
        conns = neighbors(params.conn_p, include_center=True)
        m_p = [[0.0] * k for _ in range(n)]
        for i in range(n):
            for j in conns[i]:
                w = omega_p[i] * math.exp(-((t[i] - a[j]) ** 2) * inv2)
                for l in range(k):
                    m_p[i][l] += w * sa[l][j]
    smooth_conns = None
    if params.enable_smooth:
        inv2s = 1.0 / (2.0 * params.smooth.theta_s**2)
        smooth_conns = neighbors(params.conn_s, include_center=False)

    for _ in range(params.iters):
        pair_p = None
        if m_p is not None:
            pair_p = [[sum(mu[l][lp] * m_p[i][lp] for lp in range(k)) for l in range(k)]
                      for i in range(n)]
        pair_s = None
        if params.enable_smooth:
            m_s = [[0.0] * k for _ in range(n)]
            for i in range(n):
                for j in smooth_conns[i]:
                    w = math.exp(-((t[i] - t[j]) ** 2) * inv2s)
                    for l in range(k):
                        m_s[i][l] += w * q[j][l]
            for i in range(n):
                for l in range(k):
                    m_s[i][l] *= omega_s[l]
            pair_s = [[sum(mu_s[l][lp] * m_s[i][lp] for lp in range(k)) for l in range(k)]
                      for i in range(n)]
        new_q = []
        for i in range(n):
            row = []
            for l in range(k):
                p = 0.0
                if pair_p is not None:
                    p += pair_p[i][l]
                if pair_s is not None:
                    p += pair_s[i][l]
                row.append(u[l][i] - p)
            new_q.append(_softmax_row(row))
        q = new_q

    out = np.empty((k, n))
    for i in range(n):
        for l in range(k):
            out[l, i] = q[i][l]
    return out.reshape(k, d_dim, h_dim, w_dim)
