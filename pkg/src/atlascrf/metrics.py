"""Segmentation evaluation: DSC, surface distances, local Dice decay.

Conventions that change numbers at the second decimal and are therefore
fixed here: surfaces are 6-connectivity boundary voxels (the volume border
counts as outside), the 95th percentile uses linear interpolation over the
pooled directed distances, and a class present in exactly one map gets the
full-volume diagonal as a sentinel distance (flagged in the report).
Distances are in voxel units unless a spacing multiplier is given.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt

from .errors import ClassAbsentError, InvalidParamError, ShapeError
from .volume import LabelMap


def _check_same_dims(pred: LabelMap, gt: LabelMap) -> None:
    if pred.dims != gt.dims:
        raise ShapeError(f"prediction dims {pred.dims} != ground truth dims {gt.dims}")


def dsc(pred: LabelMap, gt: LabelMap, k: int) -> float:
    """Dice score 2|P∩G| / (|P|+|G|); 1.0 when the class is empty in both."""
    _check_same_dims(pred, gt)
    p = pred.data == k
    g = gt.data == k
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Boundary voxels of a binary mask under 6-connectivity.

    A voxel is on the surface when any of its six face neighbors is outside
    the set; positions beyond the volume border count as outside.
    """
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = np.ones_like(mask)
    for axis in range(3):
        for step in (1, -1):
            interior &= np.roll(padded, step, axis=axis)[1:-1, 1:-1, 1:-1]
    return mask & ~interior


def _as_sampling(spacing) -> tuple[float, float, float]:
    if np.isscalar(spacing):
        s = float(spacing)
        if s <= 0:
            raise InvalidParamError(f"spacing must be positive, got {spacing}")
        return (s, s, s)
    s = tuple(float(v) for v in spacing)
    if len(s) != 3 or min(s) <= 0:
        raise InvalidParamError(f"spacing must be a positive scalar or 3-tuple, got {spacing}")
    return s


def volume_diagonal(dims, spacing=1.0) -> float:
    sz, sy, sx = _as_sampling(spacing)
    d, h, w = dims
    return float(np.sqrt((d * sz) ** 2 + (h * sy) ** 2 + (w * sx) ** 2))


def _surface_distances_ex(pred: LabelMap, gt: LabelMap, k: int, spacing=1.0):
    _check_same_dims(pred, gt)
    sampling = _as_sampling(spacing)
    p = pred.data == k
    g = gt.data == k
    p_any = bool(p.any())
    g_any = bool(g.any())
    if not p_any and not g_any:
        raise ClassAbsentError(
            f"class {k} is empty in both maps; surface distances are undefined — "
            "evaluate this class with DSC only"
        )
    if p_any != g_any:
        diag = volume_diagonal(pred.dims, spacing)
        return diag, diag, True
    surf_p = surface_voxels(p)
    surf_g = surface_voxels(g)
    dt_to_g = distance_transform_edt(~surf_g, sampling=sampling)
    dt_to_p = distance_transform_edt(~surf_p, sampling=sampling)
    d_pg = dt_to_g[surf_p]
    d_gp = dt_to_p[surf_g]
    msd = 0.5 * (float(d_pg.mean()) + float(d_gp.mean()))
    hd95 = float(np.percentile(np.concatenate([d_pg, d_gp]), 95.0))
    return msd, hd95, False


def surface_distances(pred: LabelMap, gt: LabelMap, k: int, spacing=1.0):
    """Symmetric mean surface distance and 95th-percentile Hausdorff distance."""
    msd, hd95, _ = _surface_distances_ex(pred, gt, k, spacing)
    return msd, hd95


def ldd(clean_dsc, path_dsc, mask: LabelMap, gt: LabelMap) -> float:
    """Local Dice decay: mean DSC drop over classes with voxels inside the mask."""
    _check_same_dims(mask, gt)
    affected = []
    inside = mask.data != 0
    for k in sorted(clean_dsc):
        if k not in path_dsc:
            raise InvalidParamError(f"class {k} missing from the pathological report")
        if bool(np.logical_and(gt.data == k, inside).any()):
            affected.append(k)
    if not affected:
        raise ClassAbsentError("no class has voxels inside the pathology mask; LDD undefined")
    return float(np.mean([clean_dsc[k] - path_dsc[k] for k in affected]))


@dataclass
class EvalReport:
    """Per-class and aggregate metrics; distances optional."""

    classes: list[int]
    dsc_per_class: dict[int, float]
    msd_per_class: dict[int, float] = field(default_factory=dict)
    hd95_per_class: dict[int, float] = field(default_factory=dict)
    sentinel_classes: list[int] = field(default_factory=list)
    spacing: float | tuple = 1.0
    ldd: float | None = None
    delta_dsc: float | None = None

    @property
    def mean_dsc(self) -> float:
        return float(np.mean([self.dsc_per_class[k] for k in self.classes]))

    @property
    def std_dsc(self) -> float:
        return float(np.std([self.dsc_per_class[k] for k in self.classes]))

    def _dist_stats(self, table):
        vals = [table[k] for k in self.classes if k in table]
        if not vals:
            return None, None
        return float(np.mean(vals)), float(np.std(vals))

    def to_dict(self) -> dict:
        msd_mean, msd_std = self._dist_stats(self.msd_per_class)
        hd_mean, hd_std = self._dist_stats(self.hd95_per_class)
        per_class = {}
        for k in self.classes:
            entry = {"dsc": self.dsc_per_class[k]}
            if k in self.msd_per_class:
                entry["msd"] = self.msd_per_class[k]
                entry["hd95"] = self.hd95_per_class[k]
            entry["sentinel"] = k in self.sentinel_classes
            per_class[str(k)] = entry
        out = {
            "classes": self.classes,
            "per_class": per_class,
            "mean": {"dsc": self.mean_dsc, "dsc_std": self.std_dsc},
            "spacing": self.spacing if np.isscalar(self.spacing) else list(self.spacing),
        }
        if msd_mean is not None:
            out["mean"].update(msd=msd_mean, msd_std=msd_std, hd95=hd_mean, hd95_std=hd_std)
        if self.ldd is not None:
            out["ldd"] = self.ldd
        if self.delta_dsc is not None:
            out["delta_dsc"] = self.delta_dsc
        return out

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), indent=2, **kwargs)

    def to_table(self) -> str:
        have_dist = bool(self.msd_per_class)
        header = ["class", "dsc"] + (["msd", "hd95", "flag"] if have_dist else [])
        rows = [header]
        for k in self.classes:
            row = [str(k), f"{self.dsc_per_class[k]:.4f}"]
            if have_dist:
                if k in self.msd_per_class:
                    row += [
                        f"{self.msd_per_class[k]:.4f}",
                        f"{self.hd95_per_class[k]:.4f}",
                        "sentinel" if k in self.sentinel_classes else "",
                    ]
                else:
                    row += ["-", "-", ""]
            rows.append(row)
        mean_row = ["mean", f"{self.mean_dsc:.4f}"]
        if have_dist:
            msd_mean, _ = self._dist_stats(self.msd_per_class)
            hd_mean, _ = self._dist_stats(self.hd95_per_class)
            mean_row += [f"{msd_mean:.4f}", f"{hd_mean:.4f}", ""]
        rows.append(mean_row)
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
        return "\n".join(lines)


def evaluate(
    pred: LabelMap,
    gt: LabelMap,
    classes=None,
    distances: bool = True,
    spacing=1.0,
) -> EvalReport:
    """Aggregate DSC (and optionally surface distances) over a class list.

    ``classes`` defaults to every class index of the ground-truth map. With
    distances enabled, a class empty in both maps raises; restrict the class
    list or pass distances=False for DSC-only evaluation.
    """
    _check_same_dims(pred, gt)
    if classes is None:
        classes = list(range(gt.num_classes))
    classes = [int(k) for k in classes]
    if not classes:
        raise InvalidParamError("empty class list")
    report = EvalReport(classes=classes, dsc_per_class={}, spacing=spacing)
    for k in classes:
        report.dsc_per_class[k] = dsc(pred, gt, k)
        if distances:
            msd, hd95, sentinel = _surface_distances_ex(pred, gt, k, spacing)
            report.msd_per_class[k] = msd
            report.hd95_per_class[k] = hd95
            if sentinel:
                report.sentinel_classes.append(k)
    return report
