from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GridSpec:
    range_min: tuple[float, float, float] = (0.0, -40.0, -3.0)
    range_max: tuple[float, float, float] = (70.4, 40.0, 1.0)
    resolution: tuple[float, float, float] = (0.05, 0.05, 0.1)

    def __post_init__(self):
        if any(r <= 0 for r in self.resolution):
            raise ValueError("resolution must be positive on every axis")
        if any(hi <= lo for lo, hi in zip(self.range_min, self.range_max)):
            raise ValueError("range_max must exceed range_min on every axis")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(
            int(round((hi - lo) / r)) for lo, hi, r in zip(self.range_min, self.range_max, self.resolution)
        )

    def cell_bounds(self, index) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(index, dtype=np.float64)
        lo = np.asarray(self.range_min) + idx * np.asarray(self.resolution)
        return lo, lo + np.asarray(self.resolution)


@dataclass
class VoxelGrid:
    """Occupied voxels only: integer index (M, 3), mean xyz (M, 3), point count (M,)."""

    spec: GridSpec
    indices: np.ndarray
    means: np.ndarray
    counts: np.ndarray

    def __len__(self) -> int:
        return len(self.counts)

    def cells(self) -> dict[tuple[int, int, int], tuple[np.ndarray, int]]:
        return {tuple(int(v) for v in i): (m, int(c)) for i, m, c in zip(self.indices, self.means, self.counts)}


def voxelize(points: np.ndarray, spec: GridSpec = GridSpec()) -> VoxelGrid:
    """Bucket points into voxels; out-of-range points are dropped, the upper face clamps inward."""
    pts = np.asarray(points, dtype=np.float64)
    lo, hi = np.asarray(spec.range_min), np.asarray(spec.range_max)
    res = np.asarray(spec.resolution)
    dims = np.asarray(spec.dims)
    xyz = pts[:, :3] if pts.size else np.zeros((0, 3))
    xyz = xyz[np.all((xyz >= lo) & (xyz <= hi), axis=1)]
    if len(xyz) == 0:
        return VoxelGrid(spec, np.zeros((0, 3), np.int64), np.zeros((0, 3)), np.zeros(0, np.int64))
    idx = np.floor((xyz - lo) / res).astype(np.int64)
    idx = np.minimum(idx, dims - 1)
    flat = (idx[:, 0] * dims[1] + idx[:, 1]) * dims[2] + idx[:, 2]
    uniq, inv, counts = np.unique(flat, return_inverse=True, return_counts=True)
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inv, xyz)
    means = sums / counts[:, None]
    # float rounding can push a mean a hair outside its cell; pull it back in
    first = np.zeros(len(uniq), dtype=np.int64)
    first[inv[::-1]] = np.arange(len(inv))[::-1]
    cell_idx = idx[first]
    cell_lo = lo + cell_idx * res
    means = np.clip(means, cell_lo, cell_lo + res)
    return VoxelGrid(spec, cell_idx, means, counts.astype(np.int64))
