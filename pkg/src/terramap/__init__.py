"""Terrain mapping from sequential LiDAR scans.

A map is a lattice of square ground cells, each carrying a discrete
probability distribution over surface height.  Scans are reduced to at
most one height observation per cell and folded into the per-cell
distributions with a recursive Bayes filter, which makes the map robust
to airborne-dust returns while still tracking genuine surface change.

The package also ships a synthetic scene simulator (`terramap.sim`) used
to exercise the full pipeline against known ground truth, and a command
line front end (`terramap.cli`).
"""

from __future__ import annotations

from terramap.errors import (
    DegenerateLikelihoodError,
    InvalidConfigError,
    InvalidPoseError,
    MalformedRowError,
    MissingPoseError,
    TerramapError,
)
from terramap.hmm_grid import (
    CellHmm,
    GridConfig,
    LikelihoodMatrix,
    TransitionMatrix,
    build_transition_matrix,
    gaussian_likelihood,
    hmm_filter_update,
    num_states,
    report_state,
    state_center,
)
from terramap.observation import (
    Box,
    ColumnObservation,
    HeightObservation,
    LabelledScan,
    MapFrameScan,
    SensorPose,
    exclusion_filter,
    process_scan,
    raycast_observed,
    reduce_columns,
    transform_to_map,
    voxel_path,
    voxelize,
)
from terramap.terrain_map import (
    CellSummary,
    GlobalMap,
    MapSnapshot,
    apply_observations,
    init_from_survey,
    init_map,
    is_initialized,
    snapshot,
)
from terramap.volumetrics import (
    ChangeGrid,
    VolumeReport,
    cell_volume_change,
    change_grid,
    volume_between,
    volume_timeseries,
)

__version__ = "0.1.0"

__all__ = [
    "Box",
    "CellHmm",
    "CellSummary",
    "ChangeGrid",
    "ColumnObservation",
    "DegenerateLikelihoodError",
    "GlobalMap",
    "GridConfig",
    "HeightObservation",
    "InvalidConfigError",
    "InvalidPoseError",
    "LabelledScan",
    "LikelihoodMatrix",
    "MalformedRowError",
    "MapFrameScan",
    "MapSnapshot",
    "MissingPoseError",
    "SensorPose",
    "TerramapError",
    "TransitionMatrix",
    "VolumeReport",
    "apply_observations",
    "build_transition_matrix",
    "cell_volume_change",
    "change_grid",
    "exclusion_filter",
    "gaussian_likelihood",
    "hmm_filter_update",
    "init_from_survey",
    "init_map",
    "is_initialized",
    "num_states",
    "process_scan",
    "raycast_observed",
    "reduce_columns",
    "report_state",
    "snapshot",
    "state_center",
    "transform_to_map",
    "volume_between",
    "volume_timeseries",
    "voxel_path",
    "voxelize",
]
