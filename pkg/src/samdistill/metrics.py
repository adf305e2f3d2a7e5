"""Dense-prediction metrics and the report they are collected in."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from math import sqrt

import numpy as np

from . import kernels
from .errors import ContractError, DegenerateInputError, DimensionError

LAYOUT_CLASSES = (1, 2, 0)  # ceiling, wall, floor
NUM_CLASSES = 9
CHAMFER_SENTINEL = sqrt(3.0)
DEPTH_KEYS = ("MAE", "RMSE", "delta1", "delta2", "delta3")
SEG_KEYS = ("pAcc", "mAcc", "mIoU", "3IoU")
VOXEL_KEYS = ("IoU", "Chamfer", "NC", "F1")
HIGHER_IS_BETTER = {"MAE": False, "RMSE": False, "Chamfer": False}


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"prediction shape {a.shape} != ground truth {b.shape}")


# -- depth -----------------------------------------------------------------


def depth_metrics(pred, gt) -> dict[str, float]:
    """MAE, RMSE and delta_i over pixels with gt > 0."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _same_shape(pred, gt)
    valid = gt > 0
    n = int(valid.sum())
    if n == 0:
        raise DegenerateInputError("no valid depth pixels (gt > 0)")
    p, g = pred[valid], gt[valid]
    err = p - g
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(p / g, g / p)
    ratio = np.where(p > 0, ratio, np.inf)
    return {
        "MAE": float(np.abs(err).mean()),
        "RMSE": float(np.sqrt((err * err).mean())),
        "delta1": float((ratio < 1.25).mean()),
        "delta2": float((ratio < 1.25**2).mean()),
        "delta3": float((ratio < 1.25**3).mean()),
        "count": n,
    }


# -- segmentation ----------------------------------------------------------


def confusion_matrix(pred, gt, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Rows are ground truth, columns predictions; gt outside [0, C) is unlabeled."""
    pred = np.asarray(pred).astype(np.int64)
    gt = np.asarray(gt).astype(np.int64)
    _same_shape(pred, gt)
    valid = (gt >= 0) & (gt < num_classes)
    p, g = pred[valid], gt[valid]
    if ((p < 0) | (p >= num_classes)).any():
        raise ContractError(f"predicted class ids must lie in [0, {num_classes})")
    return np.bincount(g * num_classes + p, minlength=num_classes**2).reshape(num_classes, num_classes)


def segmentation_from_confusion(cm: np.ndarray, layout_classes=LAYOUT_CLASSES) -> dict[str, float]:
    total = int(cm.sum())
    if total == 0:
        raise DegenerateInputError("every pixel is unlabeled")
    diag = np.diag(cm).astype(np.float64)
    gt_n = cm.sum(1).astype(np.float64)
    pred_n = cm.sum(0).astype(np.float64)
    union = gt_n + pred_n - diag
    in_gt = gt_n > 0
    seen = union > 0
    iou = np.where(seen, diag / np.where(seen, union, 1.0), 0.0)
    layout = [c for c in layout_classes if seen[c]]
    if not layout:
        raise DegenerateInputError("no layout class appears in prediction or ground truth")
    return {
        "pAcc": float(diag.sum() / total),
        "mAcc": float((diag[in_gt] / gt_n[in_gt]).mean()),
        "mIoU": float(iou[seen].mean()),
        "3IoU": float(np.mean([iou[c] for c in layout])),
        "count": total,
    }


def segmentation_metrics(pred, gt, layout_classes=LAYOUT_CLASSES, num_classes: int = NUM_CLASSES) -> dict[str, float]:
    """pAcc, mAcc, mIoU and the layout-class mean IoU (3IoU).

    Classes absent from both maps are left out of the means; mAcc also skips
    classes absent from the ground truth.
    """
    return segmentation_from_confusion(confusion_matrix(pred, gt, num_classes), layout_classes)


# -- voxels ----------------------------------------------------------------

_NEIGHBOURS = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]


def surface_mask(occ: np.ndarray) -> np.ndarray:
    """Occupied cells with at least one empty 6-neighbour (outside the grid is empty)."""
    occ = np.asarray(occ, dtype=bool)
    pad = np.pad(occ, 1, constant_values=False)
    n0, n1, n2 = occ.shape
    empty_nb = np.zeros_like(occ)
    for dx, dy, dz in _NEIGHBOURS:
        empty_nb |= ~pad[1 + dx:1 + dx + n0, 1 + dy:1 + dy + n1, 1 + dz:1 + dz + n2]
    return occ & empty_nb


def occupancy_normals(occ: np.ndarray) -> np.ndarray:
    """(n0, n1, n2, 3) unit outward normals from central differences; zero where flat."""
    f = np.pad(np.asarray(occ, dtype=np.float64), 1)
    g = np.stack([
        (f[2:, 1:-1, 1:-1] - f[:-2, 1:-1, 1:-1]) / 2,
        (f[1:-1, 2:, 1:-1] - f[1:-1, :-2, 1:-1]) / 2,
        (f[1:-1, 1:-1, 2:] - f[1:-1, 1:-1, :-2]) / 2,
    ], axis=-1)
    norm = np.linalg.norm(g, axis=-1, keepdims=True)
    return np.where(norm > 0, -g / np.where(norm > 0, norm, 1.0), 0.0)


def _abs_cos(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """|cos| of paired unit-or-zero normals; two zero normals agree, one zero scores 0."""
    za = ~a.any(-1)
    zb = ~b.any(-1)
    c = np.abs((a * b).sum(-1))
    return np.where(za & zb, 1.0, np.where(za | zb, 0.0, c))


def voxel_metrics(pred_occ, gt_occ, threshold: float = 0.5) -> dict[str, float]:
    """IoU plus Chamfer-L1, normal consistency and F1 on voxel surfaces.

    Surface cells are placed at their centres in the unit cube.  F1 uses a
    distance threshold of one voxel pitch.  With an empty surface on either
    side the surface metrics take worst-case values (Chamfer sqrt(3), NC 0,
    F1 0).
    """
    prob = np.asarray(pred_occ, dtype=np.float64)
    gt = np.asarray(gt_occ).astype(bool)
    _same_shape(prob, gt)
    if prob.ndim != 3:
        raise DimensionError(f"voxel grids must be 3-D, got {prob.shape}")
    pred = prob >= threshold
    union = int((pred | gt).sum())
    iou = 1.0 if union == 0 else float((pred & gt).sum() / union)
    out = {"IoU": iou, "count": 1}
    sp, sg = surface_mask(pred), surface_mask(gt)
    if not sp.any() or not sg.any():
        out.update(Chamfer=CHAMFER_SENTINEL, NC=0.0, F1=0.0)
        return out
    n = np.array(prob.shape, dtype=np.float64)
    ip, ig = np.argwhere(sp), np.argwhere(sg)
    p = (ip + 0.5) / n
    g = (ig + 0.5) / n
    d_pg, j_pg = kernels.nearest_l1(p, g)
    d_gp, j_gp = kernels.nearest_l1(g, p)
    out["Chamfer"] = float(0.5 * (d_pg.mean() + d_gp.mean()))
    npred, ngt = occupancy_normals(pred), occupancy_normals(gt)
    np_s = npred[tuple(ip.T)]
    ng_s = ngt[tuple(ig.T)]
    out["NC"] = float(0.5 * (_abs_cos(np_s, ng_s[j_pg]).mean() + _abs_cos(ng_s, np_s[j_gp]).mean()))
    tau = 1.0 / float(n.max()) + 1e-12
    precision = float((d_pg <= tau).mean())
    recall = float((d_gp <= tau).mean())
    out["F1"] = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return out


# -- report ----------------------------------------------------------------


@dataclass
class MetricReport:
    task: str
    metrics: dict[str, tuple[float, int]] = field(default_factory=dict)
    config_digest: str = ""

    def __post_init__(self):
        for name, (value, count) in self.metrics.items():
            if not np.isfinite(value):
                raise ContractError(f"metric {name} is not finite")
            if count <= 0:
                raise ContractError(f"metric {name} has no samples")

    def value(self, name: str) -> float:
        return self.metrics[name][0]

    def to_text(self) -> str:
        lines = [f"task = {self.task}", f"config_digest = {self.config_digest}"]
        for name, (value, count) in self.metrics.items():
            lines.append(f"{name} = {value!r}")
            lines.append(f"{name}.count = {count}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        raw = {}
        for line in text.splitlines():
            if line.strip():
                key, _, val = line.partition("=")
                raw[key.strip()] = val.strip()
        metrics = {}
        for key, val in raw.items():
            if key in ("task", "config_digest") or key.endswith(".count"):
                continue
            metrics[key] = (float(val), int(raw[f"{key}.count"]))
        return cls(raw["task"], metrics, raw.get("config_digest", ""))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "metric", "value", "count"])
        for name, (value, count) in self.metrics.items():
            w.writerow([self.task, name, repr(value), count])
        return buf.getvalue()


def report_from(task: str, values: dict[str, float], config_digest: str = "") -> MetricReport:
    count = int(values.get("count", 1))
    return MetricReport(task, {k: (float(v), count) for k, v in values.items() if k != "count"}, config_digest)
