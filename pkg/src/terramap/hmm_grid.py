"""Per-cell height filtering on a discretized height axis.

Each map cell carries a probability vector over evenly spaced candidate
heights.  New height observations are folded in with a two-step recursive
update: a transition step that leaks a little probability mass between
neighbouring heights (so the filter can track real surface change), then
a measurement step that reweights by a Gaussian likelihood centred on
the observed height.

The transition matrix is uniform off the diagonal, which lets the
transition step run in O(n) per cell instead of O(n^2): with self weight
``a`` and off-diagonal weight ``d``, ``A @ x == (a - d) * x + d * sum(x)``.
All batched code paths below rely on that identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from terramap.errors import DegenerateLikelihoodError, InvalidConfigError

# Posterior mass can legitimately get very small under conflicting
# evidence; below this total mass we refuse to normalize.
_NORM_FLOOR = 1e-300

# Smallest positive likelihood entry we allow after underflow guarding.
_LIKELIHOOD_FLOOR = np.finfo(np.float64).tiny

# log-pdf exponents are shifted so the peak stays above this before exp().
_LOG_SHIFT_TRIGGER = -600.0


@dataclass(frozen=True)
class GridConfig:
    """Geometry and filter parameters shared by every cell of a map.

    Defaults reproduce the stock open-pit setup: a [0, 20] m band at
    0.25 m resolution (81 discrete heights).

    Attributes:
        h_min: Lowest representable height (centre of state 0).
        h_max: Upper end of the representable height band.
        delta: Cell edge length and height discretization step, metres.
        sigma: Measurement noise standard deviation, metres; defaults to
            `delta` when omitted.
        a_self: Transition self-weight (probability of staying at the
            same discrete height between scans).
        p_min: Minimum posterior mass required before the reported
            height is allowed to change.
        m_init: Number of initial scans treated as the bootstrap survey
            window by the mapping pipeline.
    """

    h_min: float = 0.0
    h_max: float = 20.0
    delta: float = 0.25
    sigma: float | None = None
    a_self: float = 0.99
    p_min: float = 0.6
    m_init: int = 1000

    def __post_init__(self):
        if not (self.delta > 0.0) or not math.isfinite(self.delta):
            raise InvalidConfigError(f"delta must be finite and > 0, got {self.delta}")
        if not (self.h_max > self.h_min):
            raise InvalidConfigError(
                f"height band is empty: h_min={self.h_min}, h_max={self.h_max}"
            )
        if self.sigma is None:
            # Default measurement noise: one discretization step.
            object.__setattr__(self, "sigma", self.delta)
        if not (self.sigma > 0.0) or not math.isfinite(self.sigma):
            raise InvalidConfigError(f"sigma must be finite and > 0, got {self.sigma}")
        if not (0.0 < self.a_self < 1.0):
            raise InvalidConfigError(f"a_self must lie in (0, 1), got {self.a_self}")
        if not (0.0 < self.p_min < 1.0):
            raise InvalidConfigError(f"p_min must lie in (0, 1), got {self.p_min}")
        if self.m_init < 0:
            raise InvalidConfigError(f"m_init must be >= 0, got {self.m_init}")
        if num_states(self) < 2:
            raise InvalidConfigError(
                "height band spans fewer than two states; widen [h_min, h_max) "
                "or shrink delta"
            )


def num_states(cfg: GridConfig) -> int:
    """Number of discrete height states for `cfg`.

    One state per `delta` step across ``[h_min, h_max]``, inclusive of a
    state centred exactly at `h_min`.  The ratio is nudged before the
    floor so spans that are exact multiples of `delta` do not lose a
    state to float rounding.
    """
    ratio = (cfg.h_max - cfg.h_min) / cfg.delta
    return int(math.floor(ratio + 1e-9)) + 1


def state_center(cfg: GridConfig, l: int) -> float:
    """Height (metres) represented by discrete state `l`."""
    n = num_states(cfg)
    if not 0 <= l < n:
        raise IndexError(f"state index {l} outside [0, {n})")
    return cfg.h_min + l * cfg.delta


def state_centers(cfg: GridConfig) -> np.ndarray:
    """All state centres as a float64 vector of length ``num_states(cfg)``."""
    return cfg.h_min + cfg.delta * np.arange(num_states(cfg), dtype=np.float64)


def nearest_state_index(cfg: GridConfig, h: float) -> int:
    """Index of the state centre closest to height `h`.

    Exact midpoints between two centres round down to the lower state;
    heights outside the band clamp to the nearest end state.
    """
    v = (h - cfg.h_min) / cfg.delta
    idx = int(math.ceil(v - 0.5))
    return min(max(idx, 0), num_states(cfg) - 1)


def nearest_state_indices(cfg: GridConfig, heights: np.ndarray) -> np.ndarray:
    """Vectorized `nearest_state_index` for a float array of heights."""
    v = (np.asarray(heights, dtype=np.float64) - cfg.h_min) / cfg.delta
    idx = np.ceil(v - 0.5).astype(np.int64)
    return np.clip(idx, 0, num_states(cfg) - 1)


def uniform_state(n: int) -> np.ndarray:
    """Maximum-ignorance probability vector of length `n`."""
    return np.full(n, 1.0 / n, dtype=np.float64)


def one_hot_state(n: int, index: int) -> np.ndarray:
    """Probability vector that puts all mass on one state."""
    x = np.zeros(n, dtype=np.float64)
    x[index] = 1.0
    return x


@dataclass(frozen=True)
class TransitionMatrix:
    """Compact form of the between-scan height transition matrix.

    The dense matrix has `a_self` on the diagonal and `delta_off` in
    every off-diagonal entry, so only the two scalars (and the size) are
    stored.  Rows and columns each sum to one by construction.
    """

    n: int
    a_self: float
    delta_off: float

    def as_dense(self) -> np.ndarray:
        """Materialize the full n-by-n matrix (for tests and inspection)."""
        a = np.full((self.n, self.n), self.delta_off, dtype=np.float64)
        np.fill_diagonal(a, self.a_self)
        return a

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Compute ``A @ x`` in O(n) using the two-value structure."""
        x = np.asarray(x, dtype=np.float64)
        return (self.a_self - self.delta_off) * x + self.delta_off * x.sum()


def build_transition_matrix(n: int, a_self: float) -> TransitionMatrix:
    """Transition matrix with self weight `a_self` and the leaked mass
    ``1 - a_self`` spread evenly over the other ``n - 1`` states."""
    if n < 2:
        raise InvalidConfigError(f"transition matrix needs n >= 2, got {n}")
    if not (0.0 < a_self < 1.0):
        raise InvalidConfigError(f"a_self must lie in (0, 1), got {a_self}")
    return TransitionMatrix(n=n, a_self=a_self, delta_off=(1.0 - a_self) / (n - 1))


def transition_for(cfg: GridConfig) -> TransitionMatrix:
    return build_transition_matrix(num_states(cfg), cfg.a_self)


@dataclass(frozen=True)
class LikelihoodMatrix:
    """Diagonal measurement likelihood for one height observation.

    ``diag[l]`` is the (possibly rescaled) Gaussian density of the
    observed height evaluated at state centre ``l``.  Off-diagonal
    entries of the conceptual matrix are zero and never stored.
    """

    diag: np.ndarray

    def as_dense(self) -> np.ndarray:
        return np.diag(self.diag)


def _log_likelihood_diag(cfg: GridConfig, h: float) -> np.ndarray:
    z = (h - state_centers(cfg)) / cfg.sigma
    return -0.5 * z * z - math.log(cfg.sigma * math.sqrt(2.0 * math.pi))


def gaussian_likelihood(cfg: GridConfig, h: float) -> LikelihoodMatrix:
    """Likelihood of observing height `h` under each discrete state.

    Evaluated in log space and shifted by a common factor when the whole
    vector would underflow; a common rescale cancels in the filter's
    normalization step.  Every returned entry is strictly positive.
    """
    log_d = _log_likelihood_diag(cfg, h)
    peak = log_d.max()
    if peak < _LOG_SHIFT_TRIGGER:
        log_d = log_d - (peak - _LOG_SHIFT_TRIGGER)
    diag = np.exp(log_d)
    np.maximum(diag, _LIKELIHOOD_FLOOR, out=diag)
    return LikelihoodMatrix(diag=diag)


def gaussian_likelihood_batch(cfg: GridConfig, heights: np.ndarray) -> np.ndarray:
    """Likelihood diagonals for many observations at once, shape (m, n)."""
    heights = np.asarray(heights, dtype=np.float64)
    z = (heights[:, None] - state_centers(cfg)[None, :]) / cfg.sigma
    log_d = -0.5 * z * z - math.log(cfg.sigma * math.sqrt(2.0 * math.pi))
    peak = log_d.max(axis=1, keepdims=True)
    shift = np.where(peak < _LOG_SHIFT_TRIGGER, peak - _LOG_SHIFT_TRIGGER, 0.0)
    diag = np.exp(log_d - shift)
    np.maximum(diag, _LIKELIHOOD_FLOOR, out=diag)
    return diag


def hmm_filter_update(
    x_prev: np.ndarray, a: TransitionMatrix, b: LikelihoodMatrix
) -> np.ndarray:
    """One recursive filter step: transition, reweight, renormalize.

    Args:
        x_prev: Prior probability vector over height states.
        a: Between-scan transition matrix.
        b: Diagonal likelihood of the new observation.

    Returns:
        The posterior probability vector (sums to 1).

    Raises:
        DegenerateLikelihoodError: If the reweighted vector has no mass
            left to normalize.
    """
    predicted = a.apply(x_prev)
    weighted = b.diag * predicted
    total = weighted.sum()
    if not math.isfinite(total) or total < _NORM_FLOOR:
        raise DegenerateLikelihoodError(
            f"posterior mass {total!r} too small to normalize"
        )
    return weighted / total


def hmm_filter_update_batch(
    x_prev: np.ndarray, a: TransitionMatrix, diag: np.ndarray
) -> np.ndarray:
    """Row-wise filter update for (m, n) stacks of priors and diagonals."""
    predicted = (a.a_self - a.delta_off) * x_prev + a.delta_off * x_prev.sum(
        axis=1, keepdims=True
    )
    weighted = diag * predicted
    total = weighted.sum(axis=1, keepdims=True)
    bad = ~np.isfinite(total) | (total < _NORM_FLOOR)
    if bad.any():
        raise DegenerateLikelihoodError(
            f"{int(bad.sum())} of {x_prev.shape[0]} posteriors too small to normalize"
        )
    return weighted / total


@dataclass
class CellHmm:
    """Filter state for a single map cell.

    Attributes:
        state: Probability vector over discrete heights.
        reported_state_index: Index of the height currently reported for
            this cell (sticky: only moves when the posterior is
            confident).
        last_update_scan: Scan index of the most recent observation.
        observation_count: Number of observations folded in so far.
    """

    state: np.ndarray
    reported_state_index: int
    last_update_scan: int = -1
    observation_count: int = 0

    def reported_height(self, cfg: GridConfig) -> float:
        return state_center(cfg, self.reported_state_index)

    def confidence(self) -> float:
        """Posterior mass on the most likely state."""
        return float(self.state.max())


def report_state(cell: CellHmm, p_min: float) -> int:
    """Updated reported-state index for `cell` under threshold `p_min`.

    The mode of the posterior replaces the previous reported state only
    when its mass exceeds `p_min`; otherwise the previous report is kept.
    Ties on the mode resolve to the lowest state index (np.argmax).
    """
    mode = int(np.argmax(cell.state))
    if cell.state[mode] > p_min:
        return mode
    return cell.reported_state_index
