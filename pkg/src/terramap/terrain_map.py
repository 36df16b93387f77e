"""The global height grid and its update loop.

Cells are stored structure-of-arrays: a dict maps (ix, iy) to a row in
a growable block of posterior vectors, with parallel arrays for the
reported state, last update scan, and observation count.  That layout
lets `apply_observations` gather every cell touched by a scan, run one
vectorized filter step over the whole batch, and scatter the results
back — the per-scan cost is a couple of fancy-indexing passes instead
of thousands of tiny per-cell updates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from terramap.errors import InvalidConfigError
from terramap.hmm_grid import (
    CellHmm,
    GridConfig,
    TransitionMatrix,
    gaussian_likelihood_batch,
    hmm_filter_update_batch,
    nearest_state_indices,
    num_states,
    state_centers,
    transition_for,
)
from terramap.observation import CellKey, HeightObservation

_INITIAL_CAPACITY = 1024


class CellSummary(NamedTuple):
    ix: int
    iy: int
    height: float
    confidence: float


@dataclass(frozen=True)
class MapSnapshot:
    """Reported heights of every cell at one instant."""

    scan_index: int
    cells: list[CellSummary]


@dataclass
class UpdateReport:
    """Counts returned by one apply_observations call."""

    created: int = 0
    updated: int = 0
    reported_changed: int = 0
    skipped_out_of_range: int = 0
    duplicates_dropped: int = 0


class GlobalMap:
    """Sparse height grid: (ix, iy) -> per-cell height posterior.

    Attributes:
        cfg: Shared grid configuration.
        transition: Shared between-scan transition matrix.
        scan_counter: Count of scans consumed so far — one past the
            most recently applied scan index.
        last_scan_index: Index of the most recently applied scan (-1
            when nothing has been applied yet).
    """

    def __init__(self, cfg: GridConfig):
        self.cfg = cfg
        self.transition: TransitionMatrix = transition_for(cfg)
        self.scan_counter: int = 0
        self.last_scan_index: int = -1
        n = num_states(cfg)
        self._index: dict[CellKey, int] = {}
        self._keys = np.empty((_INITIAL_CAPACITY, 2), dtype=np.int64)
        self._states = np.empty((_INITIAL_CAPACITY, n), dtype=np.float64)
        self._reported = np.empty(_INITIAL_CAPACITY, dtype=np.int64)
        self._last_scan = np.empty(_INITIAL_CAPACITY, dtype=np.int64)
        self._obs_count = np.empty(_INITIAL_CAPACITY, dtype=np.int64)
        self._size = 0

    # -- container surface -------------------------------------------------

    def __len__(self) -> int:
        return self._size

    def __contains__(self, key: CellKey) -> bool:
        return key in self._index

    def keys(self) -> Iterator[CellKey]:
        return iter(self._index)

    def cell(self, key: CellKey) -> CellHmm:
        """A copy of one cell's filter state."""
        row = self._index[key]
        return CellHmm(
            state=self._states[row].copy(),
            reported_state_index=int(self._reported[row]),
            last_update_scan=int(self._last_scan[row]),
            observation_count=int(self._obs_count[row]),
        )

    @property
    def cells(self) -> dict[CellKey, CellHmm]:
        """Materialized copy of all cells (convenience, not the hot path)."""
        return {key: self.cell(key) for key in self._index}

    # -- internals ---------------------------------------------------------

    def _grow(self, needed: int):
        cap = self._keys.shape[0]
        if self._size + needed <= cap:
            return
        new_cap = cap
        while new_cap < self._size + needed:
            new_cap *= 2
        for name in ("_keys", "_states", "_reported", "_last_scan", "_obs_count"):
            old = getattr(self, name)
            new = np.empty((new_cap,) + old.shape[1:], dtype=old.dtype)
            new[: self._size] = old[: self._size]
            setattr(self, name, new)

    def _append_cells(
        self, keys: np.ndarray, state_idx: np.ndarray, scan_index: int
    ):
        m = keys.shape[0]
        self._grow(m)
        rows = np.arange(self._size, self._size + m)
        self._keys[rows] = keys
        self._states[rows] = 0.0
        self._states[rows, state_idx] = 1.0
        self._reported[rows] = state_idx
        self._last_scan[rows] = scan_index
        self._obs_count[rows] = 1
        for i, (ix, iy) in enumerate(keys):
            self._index[(int(ix), int(iy))] = int(rows[i])
        self._size += m


def init_map(cfg: GridConfig) -> GlobalMap:
    """Empty map sharing one transition matrix across all future cells."""
    return GlobalMap(cfg)


def init_from_survey(
    cfg: GridConfig, survey: Sequence[tuple[int, int, float]]
) -> GlobalMap:
    """Map pre-seeded from surveyed cell heights.

    Each surveyed cell starts as a one-hot posterior at the state centre
    nearest its height, with the reported state set accordingly.
    """
    gmap = GlobalMap(cfg)
    if not survey:
        return gmap
    keys = np.array([(ix, iy) for ix, iy, _ in survey], dtype=np.int64)
    heights = np.array([h for _, _, h in survey], dtype=np.float64)
    bad = (heights < cfg.h_min) | (heights > cfg.h_max)
    if bad.any():
        which = int(np.nonzero(bad)[0][0])
        raise InvalidConfigError(
            f"survey height {heights[which]} at cell "
            f"{tuple(keys[which])} outside [{cfg.h_min}, {cfg.h_max}]"
        )
    if len({(int(ix), int(iy)) for ix, iy, _ in survey}) != len(survey):
        raise InvalidConfigError("survey lists a cell more than once")
    gmap._append_cells(keys, nearest_state_indices(cfg, heights), scan_index=-1)
    # Survey cells predate any scan.
    gmap._last_scan[: gmap._size] = -1
    gmap._obs_count[: gmap._size] = 0
    return gmap


def _coerce_observations(
    obs: Sequence[HeightObservation] | tuple[np.ndarray, np.ndarray],
):
    """Accept either HeightObservation lists or (cells, heights) arrays."""
    if isinstance(obs, tuple) and len(obs) == 2 and isinstance(obs[0], np.ndarray):
        cells, heights = obs
        return (
            np.asarray(cells, dtype=np.int64).reshape(-1, 2),
            np.asarray(heights, dtype=np.float64).reshape(-1),
        )
    cells = np.array([ob.cell for ob in obs], dtype=np.int64).reshape(-1, 2)
    heights = np.array([ob.height for ob in obs], dtype=np.float64)
    return cells, heights


def apply_observations(
    gmap: GlobalMap,
    obs: Sequence[HeightObservation] | tuple[np.ndarray, np.ndarray],
    scan_index: int,
) -> UpdateReport:
    """Fold one scan's height observations into the map.

    Unseen cells are created one-hot at the nearest state centre (the
    creating observation is consumed by the initialization — no filter
    step on top).  Existing cells get one transition + reweight +
    renormalize step and a sticky reported-state refresh.  Cells not
    observed in this scan are left untouched.

    Out-of-band heights are skipped and counted; duplicate observations
    of one cell keep the last and count the rest.  `scan_index` must not
    run backwards: it has to be at least the map's scan_counter (i.e.
    strictly after the last applied scan).
    """
    if scan_index < gmap.scan_counter:
        raise ValueError(
            f"scan_index {scan_index} precedes map scan counter {gmap.scan_counter}"
        )
    report = UpdateReport()
    cells, heights = _coerce_observations(obs)
    gmap.scan_counter = scan_index + 1
    gmap.last_scan_index = scan_index
    if cells.shape[0] == 0:
        return report

    cfg = gmap.cfg
    in_range = (heights >= cfg.h_min) & (heights <= cfg.h_max) & np.isfinite(heights)
    report.skipped_out_of_range = int(cells.shape[0] - np.count_nonzero(in_range))
    cells = cells[in_range]
    heights = heights[in_range]

    # Deduplicate, keeping the last observation per cell.
    seen: dict[CellKey, int] = {}
    for i, (ix, iy) in enumerate(cells):
        seen[(int(ix), int(iy))] = i
    if len(seen) != cells.shape[0]:
        report.duplicates_dropped = cells.shape[0] - len(seen)
        keep = np.fromiter(seen.values(), dtype=np.int64, count=len(seen))
        keep.sort()
        cells = cells[keep]
        heights = heights[keep]

    rows = np.fromiter(
        (gmap._index.get((int(ix), int(iy)), -1) for ix, iy in cells),
        dtype=np.int64,
        count=cells.shape[0],
    )
    new_mask = rows == -1

    # Existing cells: one batched filter step.
    old_rows = rows[~new_mask]
    if old_rows.shape[0]:
        diag = gaussian_likelihood_batch(cfg, heights[~new_mask])
        prior = gmap._states[old_rows]
        posterior = hmm_filter_update_batch(prior, gmap.transition, diag)
        gmap._states[old_rows] = posterior
        mode = np.argmax(posterior, axis=1)
        confident = posterior[np.arange(mode.shape[0]), mode] > cfg.p_min
        reported = np.where(confident, mode, gmap._reported[old_rows])
        report.reported_changed = int(
            np.count_nonzero(reported != gmap._reported[old_rows])
        )
        gmap._reported[old_rows] = reported
        gmap._last_scan[old_rows] = scan_index
        gmap._obs_count[old_rows] += 1
        report.updated = int(old_rows.shape[0])

    # New cells: one-hot creation consumes the observation.
    if np.count_nonzero(new_mask):
        new_keys = cells[new_mask]
        idx = nearest_state_indices(cfg, heights[new_mask])
        gmap._append_cells(new_keys, idx, scan_index)
        report.created = int(new_keys.shape[0])
    return report


def snapshot(gmap: GlobalMap) -> MapSnapshot:
    """Materialize reported heights, sorted by (ix, iy)."""
    m = len(gmap)
    keys = gmap._keys[:m]
    order = np.lexsort((keys[:, 1], keys[:, 0]))
    centers = state_centers(gmap.cfg)
    heights = centers[gmap._reported[:m][order]]
    confidence = gmap._states[:m].max(axis=1)[order] if m else np.empty(0)
    sorted_keys = keys[order]
    cells = [
        CellSummary(int(ix), int(iy), float(h), float(c))
        for (ix, iy), h, c in zip(sorted_keys, heights, confidence)
    ]
    return MapSnapshot(scan_index=gmap.last_scan_index, cells=cells)


def is_initialized(gmap: GlobalMap) -> bool:
    """Whether the bootstrap scan budget has elapsed."""
    return gmap.scan_counter >= gmap.cfg.m_init
