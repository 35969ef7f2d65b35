"""Centered binary occupancy grids, single and multi-scale.

Grid layout is C-order (x, y, z): ``values[ix, iy, iz]`` with z varying fastest.
A point q maps to voxel ``floor((q - center) / delta) + n/2`` per axis; the center
itself therefore lands in voxel (n/2, n/2, n/2).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cloud import LabeledCloud
from .spatial import SpatialIndex


@dataclass(frozen=True)
class GridSpec:
    n: int
    delta: float

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 2 or self.n % 2:
            raise ValueError(f"grid side must be an even integer >= 2, got {self.n}")
        if not self.delta > 0:
            raise ValueError(f"voxel size must be positive, got {self.delta}")

    @property
    def half_extent(self) -> float:
        return self.n / 2 * self.delta

    @property
    def extent(self) -> float:
        return self.n * self.delta


@dataclass(frozen=True)
class OccupancyGrid:
    spec: GridSpec
    values: np.ndarray  # (n, n, n) float32 of 0.0 / 1.0

    @property
    def occupied(self) -> int:
        return int(self.values.sum())


@dataclass(frozen=True)
class MultiScaleSample:
    grids: tuple[OccupancyGrid, ...]
    center: np.ndarray
    label: int | None = None

    def stack(self) -> np.ndarray:
        """(K, n, n, n) float32 array ready for the network."""
        return np.stack([g.values for g in self.grids])


def rasterize(rel_points: np.ndarray, spec: GridSpec, out: np.ndarray | None = None) -> np.ndarray:
    """Occupancy of points given relative to the grid center.

    Points outside the half-open cube are ignored. `out` may be a preallocated
    per-worker (n, n, n) buffer; it is zeroed first.
    """
    n = spec.n
    if out is None:
        out = np.zeros((n, n, n), dtype=np.float32)
    else:
        out[...] = 0
    rel = np.asarray(rel_points, dtype=np.float64).reshape(-1, 3)
    if len(rel) == 0:
        return out
    h = spec.half_extent
    inside = ((rel >= -h) & (rel < h)).all(axis=1)
    ijk = np.floor(rel[inside] / spec.delta).astype(np.int64) + n // 2
    # a point just below +h can still round to n after the division
    ijk = np.clip(ijk, 0, n - 1)
    out[ijk[:, 0], ijk[:, 1], ijk[:, 2]] = 1.0
    return out


def occupancy_grid(index: SpatialIndex, cloud: LabeledCloud, center, spec: GridSpec) -> OccupancyGrid:
    c = np.asarray(center, dtype=np.float64)
    idx = index.box_query(c, spec.half_extent)
    return OccupancyGrid(spec, rasterize(cloud.points[idx] - c, spec))


def multiscale_grids(index: SpatialIndex, cloud: LabeledCloud, center, n: int,
                     deltas: Sequence[float], label: int | None = None) -> MultiScaleSample:
    deltas = [float(d) for d in deltas]
    if not deltas:
        raise ValueError("at least one scale is required")
    if any(d <= 0 for d in deltas) or any(b <= a for a, b in zip(deltas, deltas[1:])):
        raise ValueError(f"scales must be positive and strictly increasing: {deltas}")
    c = np.asarray(center, dtype=np.float64)
    specs = [GridSpec(n, d) for d in deltas]
    # one query at the coarsest extent serves every scale
    near = cloud.points[index.box_query(c, specs[-1].half_extent)] - c
    grids = tuple(OccupancyGrid(s, rasterize(near, s)) for s in specs)
    return MultiScaleSample(grids, c, label)


def sample_at(index: SpatialIndex, cloud: LabeledCloud, point_index: int, n: int,
              deltas: Sequence[float]) -> MultiScaleSample:
    """Multi-scale sample centered on a cloud point, carrying its label when known."""
    label = None if cloud.labels is None else int(cloud.labels[point_index])
    return multiscale_grids(index, cloud, cloud.points[point_index], n, deltas, label)


_HEADER = struct.Struct("<Id")


def dump_grid(grid: OccupancyGrid, path) -> None:
    """Debug dump: uint32 n, float64 delta (little-endian), then n^3 bytes of 0/1."""
    with open(path, "wb") as f:
        f.write(_HEADER.pack(grid.spec.n, grid.spec.delta))
        f.write(grid.values.astype(np.uint8).tobytes(order="C"))


def load_grid(path) -> OccupancyGrid:
    with open(path, "rb") as f:
        n, delta = _HEADER.unpack(f.read(_HEADER.size))
        body = np.frombuffer(f.read(), dtype=np.uint8)
    if body.size != n ** 3:
        raise ValueError(f"expected {n ** 3} voxels, found {body.size}")
    return OccupancyGrid(GridSpec(n, delta), body.reshape(n, n, n).astype(np.float32))
