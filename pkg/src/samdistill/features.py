"""Per-layer feature sets with their spatial grid."""

from __future__ import annotations

from dataclasses import dataclass
from math import prod

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor


@dataclass(frozen=True)
class FeatureMap:
    """``values`` is (N, C) or (B, N, C); ``grid`` gives the N positions' layout."""

    values: Tensor
    grid: tuple[int, ...]

    def __post_init__(self):
        if self.values.ndim not in (2, 3):
            raise DimensionError(f"feature values must be (N, C) or (B, N, C), got {self.values.shape}")
        if prod(self.grid) != self.values.shape[-2]:
            raise DimensionError(f"grid {self.grid} does not cover {self.values.shape[-2]} positions")

    @property
    def channels(self) -> int:
        return self.values.shape[-1]

    @property
    def positions(self) -> int:
        return self.values.shape[-2]

    @classmethod
    def from_dense(cls, x: Tensor) -> "FeatureMap":
        """(B, C, *grid) -> (B, N, C) in row-major grid order."""
        b, c = x.shape[:2]
        grid = tuple(x.shape[2:])
        return cls(T.transpose(T.reshape(x, (b, c, prod(grid))), (0, 2, 1)), grid)

    def to_dense(self) -> Tensor:
        v = self.values if self.values.ndim == 3 else T.reshape(self.values, (1,) + self.values.shape)
        b, n, c = v.shape
        return T.reshape(T.transpose(v, (0, 2, 1)), (b, c) + self.grid)


def nearest_index_map(src: tuple[int, ...], dst: tuple[int, ...]) -> np.ndarray:
    """Flat source index for each flat destination position.

    Grids of equal rank resample each axis independently; otherwise both grids
    are treated as flat sequences.
    """
    if len(src) == len(dst):
        axes = [np.minimum((np.arange(d) * s) // d, s - 1) for s, d in zip(src, dst)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.ravel_multi_index(tuple(m.ravel() for m in mesh), src)
    ns, nd = prod(src), prod(dst)
    return np.minimum((np.arange(nd) * ns) // nd, ns - 1)


def nearest_resample(fm: FeatureMap, grid: tuple[int, ...]) -> FeatureMap:
    """Nearest-neighbour interpolation of a feature set onto another grid."""
    idx = nearest_index_map(fm.grid, tuple(grid))
    return FeatureMap(T.take(fm.values, idx, axis=-2), tuple(grid))
