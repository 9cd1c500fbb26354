"""Generalized Dice loss, Adam, and the two-stage training procedure.

Stage 1 trains the unary model alone; stage 2 trains the whole model with
the CRF plugged in. A separate mode freezes the unary model and fits only
the fusion parameters. Early stopping tracks mean validation DSC.

Checkpoints are a directory of VOL1 parameter blocks plus a JSON manifest
carrying shapes, sha256 checksums, optimizer state, epoch, and seed.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import backward, dice_loss_raw, forward_with_tape
from .errors import CheckpointError, InvalidParamError, ShapeError
from .meanfield import CamInput, CamParams, mean_field_infer_raw
from .metrics import dsc
from .potentials import Compatibility, Connectivity, PriorWeights, SmoothWeights
from .unary import TinyNet, TinyNetParams, unary_logits
from .volume import (
    AtlasPair,
    LabelMap,
    ProbVolume,
    ScalarVolume,
    one_hot,
    read_vol1,
    write_vol1,
)

THETA_FLOOR = 1e-4

STAGES = ("unary_only", "joint", "separate_cam")


def dice_loss(q, gt) -> float:
    """Generalized multi-class Dice loss against a one-hot ground truth."""
    q_arr = q.data.astype(np.float64) if isinstance(q, ProbVolume) else np.asarray(q, np.float64)
    g_arr = gt.data.astype(np.float64) if isinstance(gt, ProbVolume) else np.asarray(gt, np.float64)
    if q_arr.shape != g_arr.shape:
        raise ShapeError(f"prediction shape {q_arr.shape} != ground truth shape {g_arr.shape}")
    if not np.all((g_arr == 0.0) | (g_arr == 1.0)) or not np.allclose(
        g_arr.sum(axis=0), 1.0, atol=0
    ):
        raise InvalidParamError("ground truth must be one-hot")
    return dice_loss_raw(q_arr, g_arr)


@dataclass
class TrainConfig:
    lr_default: float = 5e-4
    lr_omega_p: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 50
    patience: int = 10
    seed: int = 0
    stage: str = "joint"
    noise_sigma_frac: float = 0.02
    # z-score scans (and the atlas scan) before the net and the CRF kernels
    standardize: bool = True

    def __post_init__(self):
        if self.stage not in STAGES:
            raise InvalidParamError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.patience < 1:
            raise InvalidParamError(f"patience must be >= 1, got {self.patience}")
        if min(self.lr_default, self.lr_omega_p, self.eps) <= 0:
            raise InvalidParamError("learning rates and eps must be positive")
        if self.max_epochs < 1:
            raise InvalidParamError(f"max_epochs must be >= 1, got {self.max_epochs}")


@dataclass
class TrainSample:
    scan: ScalarVolume
    labels: LabelMap


class AdamState:
    """First/second moment accumulators per parameter name."""

    def __init__(self):
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def ensure(self, name: str, like: np.ndarray) -> None:
        if name not in self.m:
            self.m[name] = np.zeros_like(like)
            self.v[name] = np.zeros_like(like)


def adam_step(params: dict, grads: dict, config: TrainConfig, state: AdamState, trainable=None):
    """One Adam update in place; omega_p uses its own learning rate and the
    bandwidths are clamped to stay positive."""
    keys = sorted(params.keys() if trainable is None else trainable)
    state.step += 1
    t = state.step
    bc1 = 1.0 - config.beta1**t
    bc2 = 1.0 - config.beta2**t
    for key in keys:
        g = np.asarray(grads[key], dtype=np.float64)
        p = params[key]
        state.ensure(key, p)
        m = state.m[key]
        v = state.v[key]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        lr = config.lr_omega_p if key == "omega_p" else config.lr_default
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + config.eps)
    for key in ("theta_p", "theta_s"):
        if key in params:
            np.maximum(params[key], THETA_FLOOR, out=params[key])
    return params, state


@dataclass
class CamStructure:
    """Non-learnable CAM configuration (connectivity, iterations, flags)."""

    conn_p: Connectivity = Connectivity(5, 2)
    conn_s: Connectivity = Connectivity(5, 1)
    iters: int = 5
    enable_prior: bool = True
    enable_smooth: bool = True


def params_to_dict(cam: CamParams, net: TinyNetParams | None) -> dict[str, np.ndarray]:
    out = {
        "mu": cam.mu.mu.copy(),
        "omega_p": cam.prior.omega_p.copy(),
        "omega_s": cam.smooth.omega_s.copy(),
        "theta_p": np.asarray(cam.prior.theta_p, dtype=np.float64),
        "theta_s": np.asarray(cam.smooth.theta_s, dtype=np.float64),
    }
    if cam.mu_smooth is not None:
        out["mu_smooth"] = cam.mu_smooth.mu.copy()
    if net is not None:
        out["unary"] = net.to_flat()
    return out


def dict_to_cam(pdict: dict, structure: CamStructure) -> CamParams:
    return CamParams(
        mu=Compatibility(pdict["mu"]),
        prior=PriorWeights(pdict["omega_p"], float(pdict["theta_p"])),
        smooth=SmoothWeights(pdict["omega_s"], float(pdict["theta_s"])),
        conn_p=structure.conn_p,
        conn_s=structure.conn_s,
        iters=structure.iters,
        enable_prior=structure.enable_prior,
        enable_smooth=structure.enable_smooth,
        mu_smooth=Compatibility(pdict["mu_smooth"]) if "mu_smooth" in pdict else None,
    )


def dict_to_net(pdict: dict, k: int) -> TinyNetParams:
    return TinyNetParams.from_flat(pdict["unary"], k)


def add_noise(scan: ScalarVolume, rng: np.random.Generator, sigma_frac: float) -> ScalarVolume:
    """Additive Gaussian augmentation, sigma relative to the intensity range."""
    if sigma_frac <= 0:
        return scan
    data = scan.data.astype(np.float64)
    span = float(data.max() - data.min())
    if span == 0.0:
        return scan
    return ScalarVolume(data + rng.normal(0.0, sigma_frac * span, size=data.shape))


def sample_patches(
    scan: ScalarVolume,
    labels: LabelMap,
    patch_dims: tuple[int, int, int],
    count: int,
    rng: np.random.Generator,
) -> list[TrainSample]:
    """Random crops with a shared origin per patch; for volumes too large to
    train on whole."""
    if scan.dims != labels.dims:
        raise ShapeError(f"scan dims {scan.dims} != label dims {labels.dims}")
    for full, want in zip(scan.dims, patch_dims):
        if want > full or want < 1:
            raise InvalidParamError(f"patch dims {patch_dims} do not fit volume {scan.dims}")
    out = []
    for _ in range(count):
        origin = [int(rng.integers(0, full - want + 1)) for full, want in zip(scan.dims, patch_dims)]
        sl = tuple(slice(o, o + w) for o, w in zip(origin, patch_dims))
        out.append(
            TrainSample(
                ScalarVolume(scan.data[sl]), LabelMap(labels.data[sl], labels.num_classes)
            )
        )
    return out


def _trainable_keys(stage: str, pdict: dict) -> list[str]:
    if stage == "unary_only":
        return ["unary"]
    if stage == "separate_cam":
        return [k for k in pdict if k != "unary"]
    return list(pdict)


def standardized_atlas(atlas: AtlasPair) -> AtlasPair:
    from .atlas import intensity_standardize

    return AtlasPair(intensity_standardize(atlas.scan), atlas.labels)


def _val_mean_dsc(
    samples, atlas: AtlasPair, pdict, structure, k, stage, threads, standardize
) -> float:
    from .atlas import intensity_standardize

    net = dict_to_net(pdict, k)
    scores = []
    for s in samples:
        scan = intensity_standardize(s.scan) if standardize else s.scan
        logits = unary_logits(TinyNet(net), scan, k)
        if stage == "unary_only":
            pred = np.argmax(logits, axis=0)
        else:
            cam = dict_to_cam(pdict, structure)
            q = mean_field_infer_raw(CamInput(scan, logits, atlas), cam, threads)
            pred = np.argmax(q, axis=0)
        pred_map = LabelMap(pred.astype(np.uint16), k)
        scores.append(np.mean([dsc(pred_map, s.labels, c) for c in range(k)]))
    return float(np.mean(scores))


@dataclass
class TrainResult:
    cam: CamParams
    net: TinyNetParams
    history: list[dict]
    best_epoch: int
    best_val_dsc: float
    adam: AdamState = field(repr=False, default=None)


def train(
    train_samples: list[TrainSample],
    val_samples: list[TrainSample],
    atlas: AtlasPair,
    k: int,
    config: TrainConfig,
    init_cam: CamParams | None = None,
    init_net: TinyNetParams | None = None,
    structure: CamStructure | None = None,
    threads: int = 1,
) -> TrainResult:
    """Gradient training of the selected stage with early stopping.

    The atlas is fixed; every sample must share its dims and K. Returns the
    best-validation parameters and the per-epoch loss/DSC history.
    """
    if not train_samples:
        raise InvalidParamError("empty training set")
    if not val_samples:
        raise InvalidParamError("empty validation set")
    dims = atlas.dims
    for s in train_samples + val_samples:
        if s.scan.dims != dims or s.labels.dims != dims:
            raise ShapeError(f"sample dims {s.scan.dims} != atlas dims {dims}")
        if s.labels.num_classes != k:
            raise ShapeError(f"sample has {s.labels.num_classes} classes, expected {k}")
    if atlas.k != k:
        raise ShapeError(f"atlas has K={atlas.k}, expected {k}")
    structure = structure or CamStructure()
    rng = np.random.default_rng(config.seed)
    if init_net is None:
        init_net = TinyNetParams.init(k, rng)
    if init_cam is None:
        from .meanfield import default_params

        init_cam = default_params(
            k,
            dims,
            conn_p=structure.conn_p,
            conn_s=structure.conn_s,
            iters=structure.iters,
            enable_prior=structure.enable_prior,
            enable_smooth=structure.enable_smooth,
        )
    pdict = params_to_dict(init_cam, init_net)
    trainable = _trainable_keys(config.stage, pdict)
    # stage 1 never evaluates the CRF; skip its messages entirely
    stage_structure = (
        replace(structure, enable_prior=False, enable_smooth=False)
        if config.stage == "unary_only"
        else structure
    )
    if config.standardize:
        from .atlas import intensity_standardize

        atlas = standardized_atlas(atlas)
    gts = {id(s): one_hot(s.labels, k) for s in train_samples}
    state = AdamState()
    history: list[dict] = []
    best = {"epoch": 0, "val_dsc": -1.0, "pdict": {n: a.copy() for n, a in pdict.items()}}
    wait = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_samples))
        losses = []
        for idx in order:
            sample = train_samples[int(idx)]
            scan = add_noise(sample.scan, rng, config.noise_sigma_frac)
            if config.standardize:
                scan = intensity_standardize(scan)
            cam = dict_to_cam(pdict, stage_structure)
            net = dict_to_net(pdict, k)
            _, loss, tape = forward_with_tape(
                scan, atlas, TinyNet(net), cam, gts[id(sample)], threads
            )
            grads = backward(tape, cam, TinyNet(net)).as_dict()
            grads["unary"] = grads.pop("unary", np.zeros_like(pdict["unary"]))
            adam_step(pdict, grads, config, state, trainable)
            losses.append(loss)
        val = _val_mean_dsc(
            val_samples, atlas, pdict, structure, k, config.stage, threads, config.standardize
        )
        history.append(
            {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_dsc": val}
        )
        if val > best["val_dsc"]:
            best = {"epoch": epoch, "val_dsc": val, "pdict": {n: a.copy() for n, a in pdict.items()}}
            wait = 0
        else:
            wait += 1
            if wait >= config.patience:
                break
    final = best["pdict"]
    return TrainResult(
        cam=dict_to_cam(final, structure),
        net=dict_to_net(final, k),
        history=history,
        best_epoch=best["epoch"],
        best_val_dsc=best["val_dsc"],
        adam=state,
    )


def train_two_stage(
    train_samples,
    val_samples,
    atlas: AtlasPair,
    k: int,
    stage1: TrainConfig,
    stage2: TrainConfig,
    structure: CamStructure | None = None,
    threads: int = 1,
) -> tuple[TrainResult, TrainResult]:
    """Stage-1 unary training followed by stage-2 training per ``stage2.stage``."""
    if stage1.stage != "unary_only":
        raise InvalidParamError("stage1 config must use stage='unary_only'")
    if stage2.stage not in ("joint", "separate_cam"):
        raise InvalidParamError("stage2 config must use stage='joint' or 'separate_cam'")
    res1 = train(train_samples, val_samples, atlas, k, stage1, structure=structure, threads=threads)
    res2 = train(
        train_samples,
        val_samples,
        atlas,
        k,
        stage2,
        init_cam=res1.cam,
        init_net=res1.net,
        structure=structure,
        threads=threads,
    )
    return res1, res2


# --- checkpoint container -------------------------------------------------

_CKPT_FORMAT = "atlascrf-checkpoint/1"
MANIFEST_NAME = "manifest.json"


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_block(directory, name, arr) -> dict:
    arr = np.asarray(arr, dtype=np.float64)
    shape = list(arr.shape)
    vol_shape = ([1] * (3 - arr.ndim)) + shape if arr.ndim < 3 else shape
    if len(vol_shape) != 3:
        raise CheckpointError(f"block {name} has unsupported rank {arr.ndim}")
    fname = f"{name}.vol1"
    write_vol1(os.path.join(directory, fname), ScalarVolume(arr.reshape(vol_shape)))
    return {"file": fname, "shape": shape, "sha256": _sha256(os.path.join(directory, fname))}


def _read_block(directory, entry) -> np.ndarray:
    path = os.path.join(directory, entry["file"])
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint block missing: {entry['file']}")
    if _sha256(path) != entry["sha256"]:
        raise CheckpointError(f"checkpoint block corrupted: {entry['file']}")
    vol = read_vol1(path)
    return vol.data.astype(np.float64).reshape(entry["shape"])


def save_checkpoint(
    directory,
    pdict: dict,
    structure: CamStructure,
    k: int,
    dims,
    epoch: int,
    seed: int,
    stage: str,
    adam: AdamState | None = None,
) -> None:
    """Persist parameters (VOL1 blocks + JSON manifest) and optimizer state.

    Bandwidths travel in the manifest at full precision; array blocks are
    float32 on disk.
    """
    os.makedirs(directory, exist_ok=True)
    blocks = {}
    for name, arr in pdict.items():
        if name in ("theta_p", "theta_s"):
            continue
        blocks[name] = _write_block(directory, name, arr)
    manifest = {
        "format": _CKPT_FORMAT,
        "k": int(k),
        "dims": [int(v) for v in dims],
        "epoch": int(epoch),
        "seed": int(seed),
        "stage": stage,
        "theta_p": float(pdict["theta_p"]),
        "theta_s": float(pdict["theta_s"]),
        "structure": {
            "conn_p": {"size": structure.conn_p.size, "dilation": structure.conn_p.dilation},
            "conn_s": {"size": structure.conn_s.size, "dilation": structure.conn_s.dilation},
            "iters": structure.iters,
            "enable_prior": structure.enable_prior,
            "enable_smooth": structure.enable_smooth,
        },
        "blocks": blocks,
    }
    if adam is not None:
        adam_blocks = {"step": adam.step, "m": {}, "v": {}}
        for name, arr in adam.m.items():
            adam_blocks["m"][name] = _write_block(directory, f"adam_m_{name}", arr)
        for name, arr in adam.v.items():
            adam_blocks["v"][name] = _write_block(directory, f"adam_v_{name}", arr)
        manifest["adam"] = adam_blocks
    with open(os.path.join(directory, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_checkpoint(directory):
    """Load a checkpoint directory; verifies checksums and required fields."""
    manifest_path = os.path.join(directory, MANIFEST_NAME)
    if os.path.isfile(directory):
        manifest_path = directory
        directory = os.path.dirname(directory)
    if not os.path.exists(manifest_path):
        raise CheckpointError(f"no checkpoint manifest at {manifest_path}")
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"unreadable checkpoint manifest: {e}")
    if manifest.get("format") != _CKPT_FORMAT:
        raise CheckpointError(f"unknown checkpoint format: {manifest.get('format')!r}")
    for key in ("k", "dims", "theta_p", "theta_s", "structure", "blocks"):
        if key not in manifest:
            raise CheckpointError(f"checkpoint manifest missing field {key!r}")
    pdict = {name: _read_block(directory, entry) for name, entry in manifest["blocks"].items()}
    pdict["theta_p"] = np.asarray(manifest["theta_p"], dtype=np.float64)
    pdict["theta_s"] = np.asarray(manifest["theta_s"], dtype=np.float64)
    s = manifest["structure"]
    structure = CamStructure(
        conn_p=Connectivity(s["conn_p"]["size"], s["conn_p"]["dilation"]),
        conn_s=Connectivity(s["conn_s"]["size"], s["conn_s"]["dilation"]),
        iters=s["iters"],
        enable_prior=s["enable_prior"],
        enable_smooth=s["enable_smooth"],
    )
    adam = None
    if "adam" in manifest:
        adam = AdamState()
        adam.step = manifest["adam"]["step"]
        for name, entry in manifest["adam"]["m"].items():
            adam.m[name] = _read_block(directory, entry)
        for name, entry in manifest["adam"]["v"].items():
            adam.v[name] = _read_block(directory, entry)
    return pdict, structure, manifest, adam
