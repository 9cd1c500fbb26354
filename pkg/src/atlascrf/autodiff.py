"""Reverse-mode differentiation through the unrolled mean-field loop.

The forward pass records one tape op per primitive (kernel evaluation,
message, compatibility product, softmax, loss); ``backward`` walks the
records in reverse and accumulates exact adjoints for every learnable
parameter. Replaying a tape re-executes each op from its saved inputs and
checks the recorded output bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from ._threads import num_threads
from .errors import InvalidParamError, ShapeError, TapeIntegrityError
from .meanfield import CamParams, _check_cam_shapes
from .potentials import Connectivity
from .unary import TinyNet, TinyNetParams, tinynet_backward, tinynet_forward, unary_logits
from .volume import AtlasPair, ProbVolume, ScalarVolume, softmax_channels_raw

DICE_EPS = 1e-5


def dice_loss_raw(q: np.ndarray, g: np.ndarray) -> float:
    """Generalized multi-class Dice loss, evenly weighted over classes."""
    k = q.shape[0]
    qf = q.reshape(k, -1)
    gf = g.reshape(k, -1)
    num = 2.0 * np.sum(qf * gf, axis=1) + DICE_EPS
    den = np.sum(qf, axis=1) + np.sum(gf, axis=1) + DICE_EPS
    return float(1.0 - np.mean(num / den))


def dice_loss_grad(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    """d loss / d q for the closed form above."""
    k = q.shape[0]
    qf = q.reshape(k, -1)
    gf = g.reshape(k, -1)
    num = 2.0 * np.sum(qf * gf, axis=1) + DICE_EPS
    den = np.sum(qf, axis=1) + np.sum(gf, axis=1) + DICE_EPS
    grad = -(2.0 * gf * den[:, None] - num[:, None]) / (k * den[:, None] ** 2)
    return grad.reshape(q.shape)


class Node:
    __slots__ = ("idx", "value", "name")

    def __init__(self, idx: int, value: np.ndarray, name: str | None = None):
        self.idx = idx
        self.value = value
        self.name = name


class OpRecord:
    __slots__ = ("name", "ins", "out", "fwd", "bwd")

    def __init__(self, name, ins, out, fwd, bwd):
        self.name = name
        self.ins = ins
        self.out = out
        self.fwd = fwd
        self.bwd = bwd


class Tape:
    """Ordered record of the forward computation."""

    def __init__(self):
        self.ops: list[OpRecord] = []
        self._nodes: list[Node] = []
        self.sealed = False
        self.loss_node: Node | None = None

    def leaf(self, value, name: str | None = None) -> Node:
        node = Node(len(self._nodes), np.asarray(value, dtype=np.float64), name)
        self._nodes.append(node)
        return node

    def op(self, name, ins, fwd, bwd) -> Node:
        if self.sealed:
            raise TapeIntegrityError("cannot record on a sealed tape")
        out_value = fwd(*[n.value for n in ins])
        out = Node(len(self._nodes), out_value, None)
        self._nodes.append(out)
        self.ops.append(OpRecord(name, tuple(ins), out, fwd, bwd))
        return out

    def seal(self, loss_node: Node) -> None:
        self.loss_node = loss_node
        self.sealed = True

    def _check(self) -> None:
        if not self.sealed or self.loss_node is None:
            raise TapeIntegrityError("tape is not sealed")
        if not self.ops:
            raise TapeIntegrityError("tape has no recorded operations")
        if self.ops[-1].out is not self.loss_node:
            raise TapeIntegrityError("loss node is not the final recorded output")
        prev = -1
        for rec in self.ops:
            if rec.out is None or rec.out.value is None:
                raise TapeIntegrityError(f"op {rec.name} lost its recorded output")
            if rec.out.idx <= prev:
                raise TapeIntegrityError("tape records are out of order")
            prev = rec.out.idx
            for n in rec.ins:
                if n.value is None or n.idx >= rec.out.idx:
                    raise TapeIntegrityError(f"op {rec.name} has a corrupted input record")
            if not np.all(np.isfinite(rec.out.value)):
                raise TapeIntegrityError(f"op {rec.name} recorded a non-finite output")

    def replay(self) -> None:
        """Re-execute every op from saved inputs; outputs must match exactly."""
        self._check()
        for rec in self.ops:
            redo = rec.fwd(*[n.value for n in rec.ins])
            if not np.array_equal(np.asarray(redo), np.asarray(rec.out.value)):
                raise TapeIntegrityError(f"replay of op {rec.name} diverged from the record")

    def backward(self) -> dict[str, np.ndarray]:
        """Adjoints of the loss wrt every named leaf."""
        self._check()
        adj: dict[int, np.ndarray] = {self.loss_node.idx: np.asarray(1.0)}
        for rec in reversed(self.ops):
            g_out = adj.pop(rec.out.idx, None)
            if g_out is None:
                continue
            grads = rec.bwd(g_out, [n.value for n in rec.ins], rec.out.value)
            for node, g in zip(rec.ins, grads):
                if g is None:
                    continue
                if node.idx in adj:
                    adj[node.idx] = adj[node.idx] + g
                else:
                    adj[node.idx] = g
        out: dict[str, np.ndarray] = {}
        for node in self._nodes:
            if node.name is not None and node.idx in adj:
                out[node.name] = adj[node.idx]
        return out


@dataclass
class Gradients:
    """Loss gradients mirroring CamParams plus the flat unary-model vector."""

    d_mu: np.ndarray
    d_omega_p: np.ndarray
    d_omega_s: np.ndarray
    d_theta_p: float
    d_theta_s: float
    d_unary: np.ndarray | None = None
    d_mu_smooth: np.ndarray | None = None

    def as_dict(self) -> dict[str, np.ndarray]:
        out = {
            "mu": self.d_mu,
            "omega_p": self.d_omega_p,
            "omega_s": self.d_omega_s,
            "theta_p": np.asarray(self.d_theta_p),
            "theta_s": np.asarray(self.d_theta_s),
        }
        if self.d_unary is not None:
            out["unary"] = self.d_unary
        if self.d_mu_smooth is not None:
            out["mu_smooth"] = self.d_mu_smooth
        return out


def _apply_field_op(kern, probs, conn: Connectivity, threads: int) -> np.ndarray:
    out = np.empty_like(probs)
    with num_threads(threads):
        _kernels.apply_field(out, kern, probs, conn.offsets(), conn.dilation)
    return out


def _exp_field(ref, src, theta, conn: Connectivity, exclude_center, threads) -> np.ndarray:
    out = np.empty((conn.s3,) + ref.shape, dtype=np.float64)
    inv2t2 = 1.0 / (2.0 * float(theta) * float(theta))
    with num_threads(threads):
        _kernels.fill_exp_field(out, ref, src, conn.offsets(), conn.dilation, inv2t2, exclude_center)
    return out


def forward_with_tape(
    target: ScalarVolume,
    atlas: AtlasPair,
    unary_source,
    params: CamParams,
    gt: ProbVolume,
    threads: int = 1,
):
    """Run the CAM forward pass while recording a tape.

    Returns (q, loss, tape) where q is the float64 labeling distribution.
    The unary source is differentiated only when it is a TinyNet.
    """
    if gt.dims != target.dims or gt.k != params.k:
        raise ShapeError(
            f"ground truth ({gt.k}, {gt.dims}) does not match K={params.k}, dims {target.dims}"
        )
    tape = Tape()
    t64 = np.ascontiguousarray(target.data, dtype=np.float64)
    g64 = np.ascontiguousarray(gt.data, dtype=np.float64)

    if isinstance(unary_source, TinyNet):
        net = unary_source.params
        leaves = [tape.leaf(getattr(net, f), f"unary.{f}") for f in TinyNetParams.FIELDS]
        saved: dict = {}

        def net_fwd(w1, b1, w2, b2, w3, b3):
            return tinynet_forward(TinyNetParams(w1, b1, w2, b2, w3, b3), t64, saved)

        def net_bwd(g, ins, out):
            grads = tinynet_backward(TinyNetParams(*ins), saved, g)
            return [getattr(grads, f) for f in TinyNetParams.FIELDS]

        unary_node = tape.op("tinynet", leaves, net_fwd, net_bwd)
    else:
        logits = unary_logits(unary_source, target, params.k)
        unary_node = tape.leaf(logits, "unary_logits")

    from .meanfield import CamInput

    _check_cam_shapes(CamInput(target, unary_node.value, atlas), params)

    q_node = tape.op(
        "softmax",
        [unary_node],
        softmax_channels_raw,
        lambda g, ins, out: [out * (g - np.sum(g * out, axis=0, keepdims=True))],
    )

    if params.enable_prior or params.enable_smooth:
        a64 = np.ascontiguousarray(atlas.scan.data, dtype=np.float64)
        sa64 = np.ascontiguousarray(atlas.labels.data, dtype=np.float64)
        mu_node = tape.leaf(params.mu.mu, "mu")
        mu_s_node = None
        if params.mu_smooth is not None:
            mu_s_node = tape.leaf(params.mu_smooth.mu, "mu_smooth")

        def compat_fwd(m, mu):
            k = m.shape[0]
            return (mu @ m.reshape(k, -1)).reshape(m.shape)

        def compat_bwd(g, ins, out):
            m, mu = ins
            k = m.shape[0]
            gf = g.reshape(k, -1)
            mf = m.reshape(k, -1)
            return [(mu.T @ gf).reshape(m.shape), gf @ mf.T]

        m_p_node = None
        if params.enable_prior:
            theta_p_node = tape.leaf(params.prior.theta_p, "theta_p")
            omega_p_node = tape.leaf(params.prior.omega_p, "omega_p")
            conn_p = params.conn_p

            def prior_exp_fwd(theta):
                return _exp_field(t64, a64, theta, conn_p, False, threads)

            def prior_exp_bwd(g, ins, out):
                theta = float(ins[0])
                with num_threads(threads):
                    raw = _kernels.exp_field_theta_grad(
                        g, out, t64, a64, conn_p.offsets(), conn_p.dilation, False
                    )
                return [np.asarray(raw / theta**3)]

            e_p_node = tape.op("prior_exp_field", [theta_p_node], prior_exp_fwd, prior_exp_bwd)

            def scale_omega_fwd(e, omega):
                return e * omega[None]

            def scale_omega_bwd(g, ins, out):
                e, omega = ins
                return [g * omega[None], np.einsum("sabc,sabc->abc", g, e)]

            k_p_node = tape.op(
                "prior_kernel_scale", [e_p_node, omega_p_node], scale_omega_fwd, scale_omega_bwd
            )

            def prior_msg_fwd(kern):
                return _apply_field_op(kern, sa64, conn_p, threads)

            def prior_msg_bwd(g, ins, out):
                dkern = np.empty_like(ins[0])
                with num_threads(threads):
                    _kernels.apply_field_backward_kern(
                        dkern, sa64, np.ascontiguousarray(g), conn_p.offsets(), conn_p.dilation
                    )
                return [dkern]

            m_p_node = tape.op("prior_message", [k_p_node], prior_msg_fwd, prior_msg_bwd)

        e_s_node = None
        omega_s_node = None
        if params.enable_smooth:
            theta_s_node = tape.leaf(params.smooth.theta_s, "theta_s")
            omega_s_node = tape.leaf(params.smooth.omega_s, "omega_s")
            conn_s = params.conn_s

            def smooth_exp_fwd(theta):
                return _exp_field(t64, t64, theta, conn_s, True, threads)

            def smooth_exp_bwd(g, ins, out):
                theta = float(ins[0])
                with num_threads(threads):
                    raw = _kernels.exp_field_theta_grad(
                        g, out, t64, t64, conn_s.offsets(), conn_s.dilation, True
                    )
                return [np.asarray(raw / theta**3)]

            e_s_node = tape.op("smooth_exp_field", [theta_s_node], smooth_exp_fwd, smooth_exp_bwd)

        for _ in range(params.iters):
            terms = []
            if m_p_node is not None:
                terms.append(("prior", m_p_node))
            if e_s_node is not None:
                conn_s = params.conn_s

                def raw_msg_fwd(kern, q):
                    return _apply_field_op(kern, q, conn_s, threads)

                def raw_msg_bwd(g, ins, out):
                    kern, q = ins
                    g = np.ascontiguousarray(g)
                    dkern = np.empty_like(kern)
                    dq = np.empty_like(q)
                    with num_threads(threads):
                        _kernels.apply_field_backward_kern(
                            dkern, q, g, conn_s.offsets(), conn_s.dilation
                        )
                        _kernels.apply_field_backward_probs(
                            dq, kern, g, conn_s.offsets(), conn_s.dilation
                        )
                    return [dkern, dq]

                r_node = tape.op("smooth_raw_message", [e_s_node, q_node], raw_msg_fwd, raw_msg_bwd)

                def class_scale_fwd(r, omega):
                    return r * omega[:, None, None, None]

                def class_scale_bwd(g, ins, out):
                    r, omega = ins
                    return [g * omega[:, None, None, None], np.einsum("kabc,kabc->k", g, r)]

                m_s_node = tape.op(
                    "smooth_scale", [r_node, omega_s_node], class_scale_fwd, class_scale_bwd
                )
                terms.append(("smooth", m_s_node))

            if params.mu_smooth is None:
                if len(terms) == 2:
                    msg_node = tape.op(
                        "message_sum",
                        [terms[0][1], terms[1][1]],
                        lambda a, b: a + b,
                        lambda g, ins, out: [g, g],
                    )
                else:
                    msg_node = terms[0][1]
                pair_node = tape.op("compat", [msg_node, mu_node], compat_fwd, compat_bwd)
            else:
                parts = []
                for kind, node in terms:
                    m_node = mu_node if kind == "prior" else mu_s_node
                    parts.append(tape.op("compat", [node, m_node], compat_fwd, compat_bwd))
                if len(parts) == 2:
                    pair_node = tape.op(
                        "pairwise_sum", parts, lambda a, b: a + b, lambda g, ins, out: [g, g]
                    )
                else:
                    pair_node = parts[0]

            z_node = tape.op(
                "unary_minus_pairwise",
                [unary_node, pair_node],
                lambda u, p: u - p,
                lambda g, ins, out: [g, -g],
            )
            q_node = tape.op(
                "softmax",
                [z_node],
                softmax_channels_raw,
                lambda g, ins, out: [out * (g - np.sum(g * out, axis=0, keepdims=True))],
            )

    loss_node = tape.op(
        "dice_loss",
        [q_node],
        lambda q: np.asarray(dice_loss_raw(q, g64)),
        lambda g, ins, out: [float(g) * dice_loss_grad(ins[0], g64)],
    )
    tape.seal(loss_node)
    return q_node.value, float(loss_node.value), tape


def backward(tape: Tape, params: CamParams, unary_source=None) -> Gradients:
    """Exact gradients of the recorded loss for every learnable parameter.

    Parameter groups that did not participate in the forward pass (disabled
    potentials, file-backed unaries) get zero gradients of matching shape.
    """
    named = tape.backward()
    k = params.k
    d_unary = None
    if isinstance(unary_source, TinyNet):
        net = unary_source.params
        parts = []
        for f in TinyNetParams.FIELDS:
            g = named.get(f"unary.{f}")
            parts.append((g if g is not None else np.zeros_like(getattr(net, f))).ravel())
        d_unary = np.concatenate(parts)
    d_mu_smooth = None
    if params.mu_smooth is not None:
        d_mu_smooth = named.get("mu_smooth", np.zeros((k, k)))
    return Gradients(
        d_mu=named.get("mu", np.zeros((k, k))),
        d_omega_p=named.get("omega_p", np.zeros_like(params.prior.omega_p)),
        d_omega_s=named.get("omega_s", np.zeros(k)),
        d_theta_p=float(named.get("theta_p", 0.0)),
        d_theta_s=float(named.get("theta_s", 0.0)),
        d_unary=d_unary,
        d_mu_smooth=d_mu_smooth,
    )
