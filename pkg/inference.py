"""
Posterior Functional Inference
==============================
Multiplicity-controlled summaries of a set of surface draws.

REQUIREMENTS ADDRESSED:
- Pointwise exceedance probabilities p(t,s) = Pr(|beta(t,s)| > delta | data)
- Bayesian FDR thresholding with a deterministic tie order
- Joint credible bands and simultaneous band scores (SimBaS)
- Autocorrelation-corrected posterior standard deviations
- Pointwise posterior means and percentile intervals

Every function accepts either a PosteriorDraws object or a bare M x T x S
array of draws and never modifies its input.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Tuple, Union

import numpy as np

from config import (
    BFDR_TIE_TOL,
    DEFAULT_ALPHA,
    DEFAULT_BAND_ALPHAS,
    INTERVAL_LEVEL,
    MIN_DRAWS_SIMBAS,
    RHO_MAX,
    RHO_MIN,
    SD_FLOOR,
    ValidationError,
)
from ffr_core import PosteriorDraws

logger = logging.getLogger(__name__)

DrawSet = Union[PosteriorDraws, np.ndarray]


def _as_array(draws: DrawSet, minimum: int = 2) -> np.ndarray:
    arr = draws.surfaces if isinstance(draws, PosteriorDraws) else np.asarray(draws, dtype=float)
    if arr.ndim < 2:
        raise ValidationError("dimension_mismatch", what="draws", expected="M x grid", actual=arr.shape)
    if arr.shape[0] < minimum:
        raise ValidationError("too_small", what="number of retained draws M", minimum=minimum, actual=arr.shape[0])
    return arr


# ============================================================================
# POINTWISE SUMMARIES
# ============================================================================

def posterior_mean(draws: DrawSet) -> np.ndarray:
    return _as_array(draws).mean(axis=0)


def credible_intervals(draws: DrawSet, level: float = INTERVAL_LEVEL) -> Tuple[np.ndarray, np.ndarray]:
    """Pointwise equal-tailed percentile intervals."""
    if not 0.0 < level < 1.0:
        raise ValidationError("bad_probability", what="interval level")
    arr = _as_array(draws)
    tail = 0.5 * (1.0 - level)
    lower, upper = np.quantile(arr, [tail, 1.0 - tail], axis=0)
    return lower, upper


def pointwise_probability(draws: DrawSet, delta: float) -> np.ndarray:
    """Fraction of draws with |beta(t,s)| strictly greater than delta."""
    if delta < 0:
        raise ValidationError("too_small", what="delta", minimum=0, actual=delta)
    arr = _as_array(draws)
    return (np.abs(arr) > delta).mean(axis=0)


# ============================================================================
# BAYESIAN FALSE DISCOVERY RATE
# ============================================================================

@dataclass
class BFDRResult:
    p_grid: np.ndarray
    alpha: float
    nu_alpha: float
    lam: int
    flags: np.ndarray
    delta: float = float("nan")

    @property
    def n_flagged(self) -> int:
        return int(self.flags.sum())

    def to_dict(self) -> Dict:
        return {
            "delta": self.delta,
            "alpha": self.alpha,
            "nu_alpha": self.nu_alpha,
            "lambda": self.lam,
            "n_flagged": self.n_flagged,
        }


def bfdr_flag(p_grid: np.ndarray, alpha: float = DEFAULT_ALPHA, delta: float = float("nan")) -> BFDRResult:
    """
    Flag cells whose exceedance probability clears the BFDR cutoff.

    Cells are ranked by p descending, ties kept in row-major (t, s) order.
    lambda is the largest r whose top-r cells have mean (1 - p) <= alpha
    (equality decided up to BFDR_TIE_TOL, since p is often a multiple of 1/M),
    nu_alpha = p of the lambda-th cell and a cell is flagged iff p > nu_alpha.
    When no prefix qualifies, lambda = 0 and nu_alpha = 1 so nothing is flagged.
    """
    p = np.asarray(p_grid, dtype=float)
    if p.size == 0:
        raise ValidationError("too_small", what="probability grid size", minimum=1, actual=0)
    if np.any((p < 0.0) | (p > 1.0)) or not np.all(np.isfinite(p)):
        raise ValidationError("bad_probability", what="every posterior probability")
    if not 0.0 < alpha < 1.0:
        raise ValidationError("bad_probability", what="alpha")

    flat = p.ravel()
    ranked = flat[np.argsort(-flat, kind="stable")]
    running = np.cumsum(1.0 - ranked) / np.arange(1, ranked.size + 1)
    qualifying = np.flatnonzero(running <= alpha + BFDR_TIE_TOL * max(1.0, alpha))
    if qualifying.size == 0:
        lam, nu = 0, 1.0
    else:
        lam = int(qualifying[-1]) + 1
        nu = float(ranked[lam - 1])
    return BFDRResult(p_grid=p, alpha=alpha, nu_alpha=nu, lam=lam, flags=p > nu, delta=delta)


# ============================================================================
# SIMULTANEOUS BAND SCORES
# ============================================================================

def bias_correction_factor(rho: np.ndarray) -> np.ndarray:
    """A(rho) = sqrt((1 - rho) / (1 + rho)) for rho clipped to [0, 0.99]."""
    rho = np.clip(rho, RHO_MIN, RHO_MAX)
    return np.sqrt((1.0 - rho) / (1.0 + rho))


def _lag1_autocorrelation(arr: np.ndarray, mean: np.ndarray) -> np.ndarray:
    centered = arr - mean
    denom = np.sum(centered * centered, axis=0)
    numer = np.sum(centered[1:] * centered[:-1], axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = np.where(denom > 0, numer / denom, 0.0)
    return rho


def _corrected_moments(arr: np.ndarray):
    mean = arr.mean(axis=0)
    sd = arr.std(axis=0, ddof=1)
    rho = np.clip(_lag1_autocorrelation(arr, mean), RHO_MIN, RHO_MAX)
    factor = bias_correction_factor(rho)
    return mean, np.maximum(sd / factor, SD_FLOOR), rho, factor


def corrected_sd(cell_draws: np.ndarray) -> Tuple[float, float, float]:
    """
    Mean, autocorrelation-corrected SD and clipped lag-1 autocorrelation of
    one cell's draw sequence.
    """
    arr = np.asarray(cell_draws, dtype=float).ravel()
    if arr.size < MIN_DRAWS_SIMBAS:
        raise ValidationError("too_small", what="number of retained draws M", minimum=MIN_DRAWS_SIMBAS,
                              actual=arr.size)
    mean, sd, rho, _ = _corrected_moments(arr[:, None])
    return float(mean[0]), float(sd[0]), float(rho[0])


@dataclass
class SimBaSResult:
    simbas_grid: np.ndarray
    mean_grid: np.ndarray
    sd_grid: np.ndarray
    rho_grid: np.ndarray
    A: np.ndarray
    z_max: np.ndarray                  # M sorted maximal standardized deviations
    counts: np.ndarray                 # #{m : Z(m) >= |mean| / sd} per cell
    bands: Dict[float, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return self.z_max.size

    def quantile(self, alpha: float) -> float:
        """Empirical (1 - alpha) quantile of Z: the (M - floor(alpha M))-th smallest value."""
        M = self.n_draws
        index = M - int(math.floor(alpha * M + 1e-9)) - 1
        return float(self.z_max[max(index, 0)])

    def band(self, alpha: float) -> Tuple[np.ndarray, np.ndarray]:
        if alpha not in self.bands:
            half = self.quantile(alpha) * self.sd_grid
            self.bands[alpha] = (self.mean_grid - half, self.mean_grid + half)
        return self.bands[alpha]

    def to_dict(self, alphas: Iterable[float] = ()) -> Dict:
        return {
            "n_draws": self.n_draws,
            "min_simbas": float(self.simbas_grid.min()),
            "flagged": {f"{a:g}": int(simbas_flags(self, a).sum()) for a in alphas},
            "z_quantiles": {f"{a:g}": self.quantile(a) for a in alphas},
        }


def simbas(draws: DrawSet, band_alphas: Iterable[float] = DEFAULT_BAND_ALPHAS) -> SimBaSResult:
    """
    Simultaneous band scores and joint credible bands.

    Z(m) is the largest standardized deviation of draw m from the posterior
    mean over all cells. A cell's score is the share of draws with
    Z(m) >= |mean| / sd, floored at 1/M; the band at level alpha is
    mean +/- q_(1-alpha)(Z) * sd.
    """
    arr = _as_array(draws, MIN_DRAWS_SIMBAS)
    M = arr.shape[0]
    mean, sd, rho, factor = _corrected_moments(arr)
    deviations = np.abs(arr - mean) / sd
    z_max = np.sort(deviations.reshape(M, -1).max(axis=1))
    standardized = np.abs(mean) / sd
    counts = M - np.searchsorted(z_max, standardized, side="left")
    grid = np.maximum(counts, 1) / M

    result = SimBaSResult(simbas_grid=grid, mean_grid=mean, sd_grid=sd, rho_grid=rho, A=factor,
                          z_max=z_max, counts=counts)
    for alpha in band_alphas:
        if not 0.0 < alpha < 1.0:
            raise ValidationError("bad_probability", what="band alpha")
        result.band(alpha)
    logger.debug("SimBaS over %d draws: min score %.4g", M, grid.min())
    return result


def simbas_flags(result: SimBaSResult, alpha: float) -> np.ndarray:
    """
    Cells with p_SimBaS <= alpha, decided on integer counts.

    Scores are floored at 1/M, so for alpha < 1/M nothing is flagged even
    where band_excludes_zero is true (cells whose count is 0).
    """
    limit = int(math.floor(alpha * result.n_draws + 1e-9))
    return np.maximum(result.counts, 1) <= limit


def band_excludes_zero(result: SimBaSResult, alpha: float) -> np.ndarray:
    """Agrees with simbas_flags for alpha >= 1/M; below that it marks cells with count 0."""
    lower, upper = result.band(alpha)
    return (lower > 0.0) | (upper < 0.0)
