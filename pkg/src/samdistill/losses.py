"""Training objectives: pseudo-GT task losses, feature losses, and their sum."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DegenerateInputError, DimensionError
from .features import FeatureMap
from .tensor import Tensor

TASKS = ("depth", "segmentation", "voxel")
AUX_WEIGHT = 0.2
BERHU_FRACTION = 0.2
DEFAULT_MARGIN = 0.3
DEFAULT_LAMBDA = {"depth": 0.1, "segmentation": 0.1, "voxel": 0.05}
FEATURE_LOSSES = ("triplet", "mse", "rank", "mta")


class NegativeMode(str, enum.Enum):
    ALL_OTHERS = "ALL_OTHERS"
    RANDOM_ADJACENT = "RANDOM_ADJACENT"


@dataclass
class TripletConfig:
    margin: float = DEFAULT_MARGIN
    negative_mode: NegativeMode = NegativeMode.ALL_OTHERS
    rng_seed: int = 0

    def __post_init__(self):
        self.negative_mode = NegativeMode(self.negative_mode)
        if not self.margin > 0:
            raise ConfigError(f"triplet margin must be positive, got {self.margin}")


@dataclass
class DistillConfig:
    lam: float = 0.1
    sam_layers: tuple[int, ...] = (3, 4)
    triplet: TripletConfig = field(default_factory=TripletConfig)
    feature_loss: str = "triplet"

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.feature_loss not in FEATURE_LOSSES:
            raise ConfigError(f"unknown feature loss {self.feature_loss!r}")
        self.sam_layers = tuple(sorted(set(self.sam_layers)))


def _vals(x) -> Tensor:
    return x.values if isinstance(x, FeatureMap) else T._as_tensor(x)


def _check_task(task: str) -> str:
    if task == "3d":
        task = "voxel"
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    return task


# -- pseudo-GT -------------------------------------------------------------


def berhu(pred, target, c: float | None = None) -> Tensor:
    """Reverse Huber: |e| up to c, (e^2 + c^2) / 2c above.

    ``c`` defaults to 0.2 max|e| over the batch and is treated as a constant.
    """
    pred = T._as_tensor(pred)
    target = T._as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"berHu shapes differ: {pred.shape} vs {target.shape}")
    err = pred - target
    mag = np.abs(err.data)
    if c is None:
        c = BERHU_FRACTION * float(mag.max()) if mag.size else 0.0
    elif c < 0:
        raise ConfigError(f"berHu threshold must be >= 0, got {c}")
    if c == 0.0:
        return T.mean(T.abs(err))
    quad = (err * err + c * c) * (1.0 / (2.0 * c))
    return T.mean(T.where(mag <= c, T.abs(err), quad))


def _entropy(p: np.ndarray, axis: int) -> float:
    """Mean over positions of -sum p log p (0 log 0 = 0)."""
    logp = np.log(np.where(p > 0, p, 1.0))
    n = p.size // p.shape[axis]
    return float(-(p * logp).sum() / n)


def _binary_entropy(p: np.ndarray) -> float:
    lp = np.log(np.where(p > 0, p, 1.0))
    lq = np.log(np.where(p < 1, 1.0 - p, 1.0))
    return float(-(p * lp + (1.0 - p) * lq).mean())


def soft_cross_entropy(logits, target_logits, axis: int = 1) -> Tensor:
    """KL(softmax(target) || softmax(logits)): cross-entropy minus the target entropy."""
    tl = _vals(target_logits).data
    z = tl - tl.max(axis=axis, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=axis, keepdims=True)
    return T.cross_entropy_with_logits(logits, p, axis=axis) - _entropy(p, axis)


def soft_binary_cross_entropy(logits, target_logits) -> Tensor:
    """Binary KL against sigmoid(target_logits)."""
    tl = _vals(target_logits).data
    p = np.exp(-np.logaddexp(0.0, -tl))
    return T.binary_cross_entropy_with_logits(logits, p) - _binary_entropy(p)


def hard_binary_cross_entropy(logits, occupancy) -> Tensor:
    return T.binary_cross_entropy_with_logits(logits, np.asarray(occupancy, dtype=np.float64))


def pseudo_gt_loss(task: str, v_out, a_out, a_aux=None) -> Tensor:
    """Distance between teacher prediction ``v_out`` and student prediction ``a_out``.

    depth: berHu on the maps.  segmentation: KL from the teacher's class
    distribution (axis 1), plus 0.2 x the same for ``a_aux`` when given.
    voxel: binary KL from the teacher's occupancy probabilities.
    All are zero when ``a_out == v_out``.
    """
    task = _check_task(task)
    v_out = _vals(v_out)
    a_out = _vals(a_out)
    if v_out.shape != a_out.shape:
        raise DimensionError(f"prediction shapes differ: teacher {v_out.shape}, student {a_out.shape}")
    if task == "depth":
        return berhu(a_out, v_out.detach())
    if task == "segmentation":
        loss = soft_cross_entropy(a_out, v_out, axis=1)
        if a_aux is not None:
            a_aux = _vals(a_aux)
            if a_aux.shape != v_out.shape:
                raise DimensionError(f"aux prediction shape {a_aux.shape} != {v_out.shape}")
            loss = loss + AUX_WEIGHT * soft_cross_entropy(a_aux, v_out, axis=1)
        return loss
    return soft_binary_cross_entropy(a_out, v_out)


# -- feature losses --------------------------------------------------------


def direct_feature_loss(v, a) -> Tensor:
    """Mean over positions of the squared L2 distance between matching features."""
    vv, av = _vals(v), _vals(a)
    if vv.shape != av.shape:
        raise DimensionError(
            f"direct feature loss needs identical shapes (interpolate first): {vv.shape} vs {av.shape}"
        )
    d = av - vv.detach()
    return T.mean(T.sum(d * d, axis=-1))


def grid_neighbors(k: int, grid: Sequence[int]) -> list[int]:
    """In-grid axis neighbours (4 in 2-D) of flat index ``k``, ascending."""
    coords = np.unravel_index(k, tuple(grid))
    out = []
    for ax, n in enumerate(grid):
        for step in (-1, 1):
            c = list(coords)
            c[ax] += step
            if 0 <= c[ax] < n:
                out.append(int(np.ravel_multi_index(tuple(c), tuple(grid))))
    return sorted(out)


def negative_set(k: int, grid: Sequence[int], mode, rng: np.random.Generator | None = None) -> set[int]:
    """Negatives for positive ``k``: every other index, or one random neighbour."""
    mode = NegativeMode(mode)
    n = int(np.prod(grid))
    if not 0 <= k < n:
        raise DimensionError(f"index {k} outside grid {tuple(grid)}")
    if mode is NegativeMode.ALL_OTHERS:
        return {i for i in range(n) if i != k}
    nbrs = grid_neighbors(k, grid)
    if not nbrs:
        return set()
    rng = rng if rng is not None else np.random.default_rng()
    return {nbrs[int(rng.integers(len(nbrs)))]}


def negative_mask(positives: np.ndarray, grid: Sequence[int], mode, rng: np.random.Generator | None = None) -> np.ndarray:
    """0/1 mask (..., V, V): row j marks the negatives of anchor j's positive."""
    mode = NegativeMode(mode)
    n = int(np.prod(grid))
    pos = np.asarray(positives)
    mask = np.zeros(pos.shape + (n,))
    if mode is NegativeMode.ALL_OTHERS:
        mask[...] = 1.0
        np.put_along_axis(mask, pos[..., None], 0.0, axis=-1)
        return mask
    flat_pos = pos.reshape(-1)
    flat_mask = mask.reshape(-1, n)
    for r, k in enumerate(flat_pos):
        for i in negative_set(int(k), grid, mode, rng):
            flat_mask[r, i] = 1.0
    return mask


def triplet_feature_loss(v, a, cfg: TripletConfig | None = None, rng: np.random.Generator | None = None,
                         grid: Sequence[int] | None = None) -> Tensor:
    """Margin loss over (teacher anchor, loose positive, negatives) triplets.

    For each teacher feature v(j) the positive is the aligned feature a(k) with
    the highest cosine similarity (lowest index on ties).  The per-sample loss
    is ``(1/V) sum_j sum_{k' in N_k} max(0, m - cos(v_j, a_k) + cos(v_j, a_k'))``,
    averaged over a leading batch axis if present.
    """
    cfg = cfg or TripletConfig()
    if grid is None:
        grid = a.grid if isinstance(a, FeatureMap) else (_vals(a).shape[-2],)
    vv, av = _vals(v).detach(), _vals(a)
    if vv.shape != av.shape:
        raise DimensionError(f"triplet loss needs aligned shapes: {vv.shape} vs {av.shape}")
    n = av.shape[-2]
    if n < 2:
        raise DegenerateInputError("triplet loss needs at least two positions to form negatives")
    if rng is None and cfg.negative_mode is NegativeMode.RANDOM_ADJACENT:
        rng = np.random.default_rng(cfg.rng_seed)
    sim = T.cosine_matrix(vv, av)  # (..., anchors j, candidates k)
    pos_idx = np.argmax(sim.data, axis=-1)
    mask = negative_mask(pos_idx, grid, cfg.negative_mode, rng)
    return T.margin_hinge(sim, mask, cfg.margin)


def rank_loss(v, a, margin: float = DEFAULT_MARGIN) -> Tensor:
    """Pairwise margin ranking between spatially pooled student/teacher features."""
    vv, av = _vals(v).detach(), _vals(a)
    if vv.ndim != 3:
        raise DimensionError("rank loss needs batched (B, N, C) features")
    gv = T.mean(vv, axis=1)
    ga = T.mean(av, axis=1)
    b = gv.shape[0]
    if b < 2:
        return T.sum(ga * 0.0)
    sim = T.cosine_matrix(ga, gv)
    eye = np.eye(b)
    pos = T.sum(sim * eye, axis=1, keepdims=True)
    terms = T.relu(sim - pos + margin) * (1.0 - eye)
    return T.sum(terms) * (1.0 / (b * (b - 1)))


def mta_loss(v, a) -> Tensor:
    """Squared distance weighted by a softmax over teacher feature norms."""
    vv, av = _vals(v).detach(), _vals(a)
    if vv.shape != av.shape:
        raise DimensionError(f"MTA loss needs identical shapes: {vv.shape} vs {av.shape}")
    norms = np.linalg.norm(vv.data, axis=-1)
    w = np.exp(norms - norms.max(axis=-1, keepdims=True))
    w /= w.sum(axis=-1, keepdims=True)
    d = av - vv
    per = T.sum(T.sum(d * d, axis=-1) * w, axis=-1)
    return T.mean(per)


def feature_loss(kind: str, v, a, cfg: DistillConfig, rng: np.random.Generator | None = None) -> Tensor:
    if kind == "triplet":
        return triplet_feature_loss(v, a, cfg.triplet, rng)
    if kind == "mse":
        return direct_feature_loss(v, a)
    if kind == "rank":
        return rank_loss(v, a, cfg.triplet.margin)
    if kind == "mta":
        return mta_loss(v, a)
    raise ConfigError(f"unknown feature loss {kind!r}")


def combined_loss(task: str, outputs, aligned_features: Mapping[int, FeatureMap],
                  teacher_features: Mapping[int, FeatureMap], cfg: DistillConfig,
                  rng: np.random.Generator | None = None, parts: dict | None = None) -> Tensor:
    """``L_p + lam * sum_i L_f^i`` over ``cfg.sam_layers``.

    ``outputs`` is ``(v_out, a_out)`` or ``(v_out, a_out, a_aux)``.  When
    ``parts`` is given it receives the individual terms as floats.
    """
    if set(aligned_features) != set(cfg.sam_layers) or set(teacher_features) < set(cfg.sam_layers):
        raise ConfigError(
            f"feature layers {sorted(aligned_features)} / teacher {sorted(teacher_features)} "
            f"do not cover configured layers {list(cfg.sam_layers)}"
        )
    lp = pseudo_gt_loss(task, *outputs)
    if parts is not None:
        parts["pseudo"] = lp.item()
    if cfg.lam == 0.0:
        return lp
    total = None
    for i in cfg.sam_layers:
        lf = feature_loss(cfg.feature_loss, teacher_features[i], aligned_features[i], cfg, rng)
        if parts is not None:
            parts[f"feature_{i}"] = lf.item()
        total = lf if total is None else total + lf
    if total is None:
        return lp
    return lp + cfg.lam * total
