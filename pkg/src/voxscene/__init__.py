"""Multi-scale occupancy-grid CNN for per-point classification of 3D scenes."""

from .cloud import DROP, LabeledCloud, LabelMapping, load_ply, remap_labels, save_ply
from .spatial import (SpatialIndex, SubsampleResult, build_index, covered_area, grid_subsample,
                      transfer_labels)
from .voxel import GridSpec, MultiScaleSample, OccupancyGrid, multiscale_grids, occupancy_grid

__version__ = "0.1.0"

__all__ = ["DROP", "LabeledCloud", "LabelMapping", "load_ply", "remap_labels", "save_ply",
           "SpatialIndex", "SubsampleResult", "build_index", "covered_area", "grid_subsample",
           "transfer_labels", "GridSpec", "MultiScaleSample", "OccupancyGrid", "multiscale_grids",
           "occupancy_grid"]
