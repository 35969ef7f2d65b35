"""Spatial index over a cloud plus grid subsampling, label transfer and footprint area.

All binning is lower-inclusive / upper-exclusive and anchored at the origin, so a box
query and a voxel grid built from it always agree on which points fall inside.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .cloud import LabeledCloud


class SpatialIndex:
    """Read-only k-d tree over a cloud's points; safe to query from several threads."""

    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise ValueError("cannot index an empty cloud")
        self.points = pts
        self._tree = cKDTree(pts, balanced_tree=False, compact_nodes=False)

    def __len__(self) -> int:
        return len(self.points)

    def box_query(self, center, half_extent: float) -> np.ndarray:
        """Sorted indices of points q with center - h <= q < center + h on every axis."""
        if not half_extent > 0:
            raise ValueError("half_extent must be positive")
        c = np.asarray(center, dtype=np.float64)
        # the closed L-inf ball is a superset; trim the upper faces exactly
        cand = self._tree.query_ball_point(c, half_extent, p=np.inf)
        cand = np.asarray(cand, dtype=np.int64)
        if len(cand) == 0:
            return cand
        q = self.points[cand]
        inside = ((q >= c - half_extent) & (q < c + half_extent)).all(axis=1)
        return np.sort(cand[inside])

    def box_query_many(self, centers, half_extent: float) -> list[np.ndarray]:
        centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        if not half_extent > 0:
            raise ValueError("half_extent must be positive")
        cands = self._tree.query_ball_point(centers, half_extent, p=np.inf)
        out = []
        for c, cand in zip(centers, cands):
            cand = np.asarray(cand, dtype=np.int64)
            if len(cand):
                q = self.points[cand]
                cand = np.sort(cand[((q >= c - half_extent) & (q < c + half_extent)).all(axis=1)])
            out.append(cand)
        return out

    def nearest(self, query) -> int:
        return int(self.nearest_many(np.asarray(query, dtype=np.float64).reshape(1, 3))[0])

    def nearest_many(self, queries) -> np.ndarray:
        """Nearest point index per query; equidistant candidates resolve to the lowest index."""
        qs = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if len(qs) == 0:
            return np.zeros(0, dtype=np.int64)
        k = min(4, len(self.points))
        dist, idx = self._tree.query(qs, k=k)
        dist = dist.reshape(len(qs), k)
        idx = idx.reshape(len(qs), k).astype(np.int64)
        # exact squared distances of the k candidates, computed the same way everywhere
        d2 = ((self.points[idx] - qs[:, None, :]) ** 2).sum(axis=2)
        best = d2.min(axis=1)
        tie = d2 == best[:, None]
        out = np.where(tie, idx, np.iinfo(np.int64).max).min(axis=1)
        # if all k candidates are tied there may be more equidistant points beyond them
        crowded = np.flatnonzero(tie.all(axis=1) & (k < len(self.points)))
        for i in crowded:
            r = dist[i, 0]
            cand = np.asarray(self._tree.query_ball_point(qs[i], r * (1 + 1e-9) + 1e-300), dtype=np.int64)
            cd2 = ((self.points[cand] - qs[i]) ** 2).sum(axis=1)
            cand = cand[cd2 == cd2.min()]
            out[i] = cand.min()
        return out


def build_index(cloud: LabeledCloud) -> SpatialIndex:
    return SpatialIndex(cloud.points)


@dataclass(frozen=True)
class SubsampleResult:
    cloud: LabeledCloud
    kept_indices: np.ndarray
    cell: float


def cell_ids(points: np.ndarray, cell: float) -> np.ndarray:
    return np.floor(np.asarray(points) / cell).astype(np.int64)


def grid_subsample(cloud: LabeledCloud, cell: float) -> SubsampleResult:
    """Keep, for every occupied cell, the input point closest to the cell barycenter."""
    if not cell > 0:
        raise ValueError("cell must be positive")
    if len(cloud) == 0:
        raise ValueError("cannot subsample an empty cloud")
    pts = cloud.points
    _, inverse, counts = np.unique(cell_ids(pts, cell), axis=0, return_inverse=True,
                                   return_counts=True)
    inverse = inverse.reshape(-1)
    n_cells = len(counts)
    bary = np.zeros((n_cells, 3))
    np.add.at(bary, inverse, pts)
    bary /= counts[:, None]
    d2 = ((pts - bary[inverse]) ** 2).sum(axis=1)
    # sort by (cell, distance, index); first of each cell wins
    order = np.lexsort((np.arange(len(pts)), d2, inverse))
    first = np.ones(len(order), dtype=bool)
    first[1:] = inverse[order[1:]] != inverse[order[:-1]]
    kept = np.sort(order[first])
    return SubsampleResult(cloud.subset(kept), kept, float(cell))


def transfer_labels(original: LabeledCloud, sub: SubsampleResult, sub_labels,
                    index: SpatialIndex | None = None) -> np.ndarray:
    """Give every original point the label of its nearest representative."""
    sub_labels = np.asarray(sub_labels)
    if len(sub.cloud) == 0:
        raise ValueError("empty subsample")
    if len(sub_labels) != len(sub.cloud):
        raise ValueError(f"{len(sub_labels)} labels for {len(sub.cloud)} representatives")
    index = index or build_index(sub.cloud)
    return sub_labels[index.nearest_many(original.points)]


def covered_area(cloud: LabeledCloud, pixel: float = 0.1) -> float:
    """Footprint in m^2: occupied (x, y) pixels of side `pixel` times pixel area."""
    if not pixel > 0:
        raise ValueError("pixel must be positive")
    if len(cloud) == 0:
        return 0.0
    pix = np.floor(cloud.points[:, :2] / pixel).astype(np.int64)
    return len(np.unique(pix, axis=0)) * pixel * pixel
