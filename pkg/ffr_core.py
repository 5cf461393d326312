"""
Function-on-Function Regression Core
====================================
Wavelet-space Bayesian FFR: preprocessing, empirical-Bayes hyperparameters,
spike-and-slab Gibbs sampling of the outcome-coefficient columns and
assembly of data-space posterior draws.

REQUIREMENTS ADDRESSED:
- Center/scale outcome and exposure matrices, PCA-compress continuous covariates
- Ridge-stabilized empirical-Bayes estimates of slab variances and inclusion rates
- Independent per-column Gibbs samplers with order-free counter-based RNG streams
- Scalar covariates with a weak Gaussian prior, reported as functions over sites
- Deterministic results for any thread count

The design D = [X*, W~] is shared by every column, so the sampler works on
the sufficient statistics D'D, D'y and y'y and updates a fixed block of
columns together. Each column draws its random numbers from its own stream,
which keeps every draw independent of block composition and scheduling.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import expit, logit
from sklearn.decomposition import PCA

from config import (
    COLUMN_BLOCK_SIZE,
    DEFAULT_PCA_FRACTION,
    EB_Z_THRESHOLD,
    PI_MAX,
    PI_MIN,
    RIDGE_FACTOR,
    RNG_CHUNK_ITERATIONS,
    SCALAR_PRIOR_VARIANCE,
    STREAM_FFR,
    TAU_MIN,
    McmcConfig,
    NumericalError,
    ValidationError,
    config_hash,
)
from wavelet import WaveletSpec, build_operator, dwt_rows, idwt_rows, project_surfaces

logger = logging.getLogger(__name__)


# ============================================================================
# DATASET AND PREPROCESSING
# ============================================================================

@dataclass
class FunctionalDataset:
    """
    Outcome, exposure and scalar covariates for n subjects.

    Y is n x S (sites), X is n x T (exposure times), W is n x q and may have
    zero columns. w_types marks each W column "continuous" or "categorical".
    """

    Y: np.ndarray
    X: np.ndarray
    W: Optional[np.ndarray] = None
    s_labels: List[str] = field(default_factory=list)
    t_labels: List[str] = field(default_factory=list)
    w_labels: List[str] = field(default_factory=list)
    w_types: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.Y = np.asarray(self.Y, dtype=float)
        self.X = np.asarray(self.X, dtype=float)
        if self.Y.ndim != 2 or self.X.ndim != 2:
            raise ValidationError("dimension_mismatch", what="Y and X", expected="2-D matrices",
                                  actual=f"{self.Y.ndim}-D and {self.X.ndim}-D")
        n = self.Y.shape[0]
        W = np.zeros((n, 0)) if self.W is None else np.asarray(self.W, dtype=float)
        self.W = W.reshape(-1, 1) if W.ndim == 1 else W

        for name, matrix in (("X", self.X), ("W", self.W)):
            if matrix.shape[0] != n:
                raise ValidationError("row_mismatch", first="Y", first_rows=n, second=name,
                                      second_rows=matrix.shape[0])
        for name, matrix in (("Y", self.Y), ("X", self.X), ("W", self.W)):
            bad = np.argwhere(~np.isfinite(matrix))
            if len(bad):
                row, col = bad[0]
                raise ValidationError("missing_value", path=name, row=int(row) + 1, column=int(col) + 1)

        for what, actual in (("number of subjects n", n), ("number of sites S", self.S),
                             ("number of exposure times T", self.T)):
            if actual < 2:
                raise ValidationError("too_small", what=what, minimum=2, actual=actual)

        self.s_labels = list(self.s_labels) or [str(i + 1) for i in range(self.S)]
        self.t_labels = list(self.t_labels) or [str(i + 1) for i in range(self.T)]
        self.w_labels = list(self.w_labels) or [f"w{i + 1}" for i in range(self.q)]
        self.w_types = list(self.w_types) or ["continuous"] * self.q
        for what, labels, size in (("s_labels", self.s_labels, self.S), ("t_labels", self.t_labels, self.T),
                                   ("w_labels", self.w_labels, self.q), ("w_types", self.w_types, self.q)):
            if len(labels) != size:
                raise ValidationError("dimension_mismatch", what=what, expected=size, actual=len(labels))

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def S(self) -> int:
        return self.Y.shape[1]

    @property
    def T(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.W.shape[1]


@dataclass
class PreprocessReport:
    """Constants needed to undo preprocessing."""

    y_mean: np.ndarray
    y_sd: np.ndarray
    x_mean: np.ndarray
    x_sd: np.ndarray
    scaled: bool
    pca_fraction: float
    continuous_columns: List[str]
    pca_mean: np.ndarray
    pca_loadings: np.ndarray          # continuous q_c x k
    retained_components: int
    variance_explained: float
    categorical_columns: List[str]

    def to_dict(self) -> Dict:
        return {
            "scaled": self.scaled,
            "y_mean": self.y_mean.tolist(),
            "y_sd": self.y_sd.tolist(),
            "x_mean": self.x_mean.tolist(),
            "x_sd": self.x_sd.tolist(),
            "pca": {
                "fraction_requested": self.pca_fraction,
                "continuous_columns": self.continuous_columns,
                "mean": self.pca_mean.tolist(),
                "loadings": self.pca_loadings.tolist(),
                "retained_components": self.retained_components,
                "variance_explained": self.variance_explained,
            },
            "categorical_columns": self.categorical_columns,
        }


def _standardize(matrix: np.ndarray, labels: Sequence[str], name: str, scale: bool):
    mean = matrix.mean(axis=0)
    centered = matrix - mean
    if not scale:
        return centered, mean, np.ones(matrix.shape[1])
    sd = matrix.std(axis=0, ddof=1)
    zero = np.flatnonzero(sd <= np.finfo(float).eps * np.maximum(1.0, np.abs(mean)))
    if len(zero):
        raise ValidationError("zero_variance", column=labels[zero[0]], matrix=name)
    return centered / sd, mean, sd


def _pca_scores(Wc: np.ndarray, fraction: float):
    """Principal-component scores keeping the smallest k that reaches `fraction` of the variance."""
    mean = Wc.mean(axis=0)
    if not np.any(Wc.var(axis=0) > 0.0):
        return np.zeros((Wc.shape[0], 0)), mean, np.zeros((Wc.shape[1], 0)), 0.0
    pca = PCA(svd_solver="full").fit(Wc)
    cumulative = np.cumsum(pca.explained_variance_ratio_)
    k = min(int(np.searchsorted(cumulative, fraction - 1e-12) + 1), cumulative.size)
    loadings = pca.components_[:k].T
    return pca.transform(Wc)[:, :k], mean, loadings, float(cumulative[k - 1])


def preprocess(dataset: FunctionalDataset, scale: bool = True,
               pca_fraction: float = DEFAULT_PCA_FRACTION) -> Tuple[FunctionalDataset, PreprocessReport]:
    """
    Center (and optionally scale) Y and X; compress continuous covariates.

    Categorical covariate columns pass through untouched.

    Returns:
        (preprocessed dataset, report with all back-transformation constants)
    """
    if not 0.0 < pca_fraction <= 1.0:
        raise ValidationError("invalid_config", detail=f"pca_fraction must lie in (0, 1] (got {pca_fraction})")
    Y, y_mean, y_sd = _standardize(dataset.Y, dataset.s_labels, "Y", scale)
    X, x_mean, x_sd = _standardize(dataset.X, dataset.t_labels, "X", scale)

    continuous = [i for i, kind in enumerate(dataset.w_types) if kind == "continuous"]
    categorical = [i for i, kind in enumerate(dataset.w_types) if kind != "continuous"]
    if continuous:
        scores, pca_mean, loadings, explained = _pca_scores(dataset.W[:, continuous], pca_fraction)
    else:
        scores, pca_mean, loadings, explained = np.zeros((dataset.n, 0)), np.zeros(0), np.zeros((0, 0)), 1.0
    W = np.hstack([scores, dataset.W[:, categorical]])
    w_labels = [f"PC{i + 1}" for i in range(scores.shape[1])] + [dataset.w_labels[i] for i in categorical]
    w_types = ["continuous"] * scores.shape[1] + ["categorical"] * len(categorical)

    if continuous:
        logger.info("Kept %d of %d covariate components (%.1f%% of variance)",
                    scores.shape[1], len(continuous), 100.0 * explained)

    processed = FunctionalDataset(Y=Y, X=X, W=W, s_labels=dataset.s_labels, t_labels=dataset.t_labels,
                                  w_labels=w_labels, w_types=w_types)
    report = PreprocessReport(
        y_mean=y_mean, y_sd=y_sd, x_mean=x_mean, x_sd=x_sd, scaled=scale,
        pca_fraction=pca_fraction,
        continuous_columns=[dataset.w_labels[i] for i in continuous],
        pca_mean=pca_mean, pca_loadings=loadings, retained_components=scores.shape[1],
        variance_explained=explained,
        categorical_columns=[dataset.w_labels[i] for i in categorical],
    )
    return processed, report


def to_original_units(surface: np.ndarray, report: PreprocessReport) -> np.ndarray:
    """Rescale a T x S surface fitted on standardized data to data units."""
    arr = np.asarray(surface, dtype=float)
    expected = (len(report.x_sd), len(report.y_sd))
    if arr.shape[-2:] != expected:
        raise ValidationError("dimension_mismatch", what="surface", expected=expected, actual=arr.shape[-2:])
    return arr * report.y_sd[None, :] / report.x_sd[:, None]


# ============================================================================
# EMPIRICAL BAYES
# ============================================================================

@dataclass(frozen=True)
class SpikeSlabHyper:
    """Slab variances tau and inclusion probabilities pi, P exposure coefficients x J outcome levels."""

    tau: np.ndarray
    pi: np.ndarray
    levels: Tuple[int, ...]

    def for_level(self, j: int) -> Tuple[np.ndarray, np.ndarray]:
        if j in self.levels:
            col = self.levels.index(j)
            return self.tau[:, col], self.pi[:, col]
        # no columns at this level during estimation
        P = self.tau.shape[0]
        return np.full(P, TAU_MIN), np.full(P, PI_MIN)

    def to_dict(self) -> Dict:
        return {"levels": list(self.levels), "tau": self.tau.tolist(), "pi": self.pi.tolist()}


@dataclass
class RidgeFit:
    coef: np.ndarray      # Q x C
    se: np.ndarray        # Q x C
    sigma2: np.ndarray    # C


def _design(Xstar: np.ndarray, Wtilde: Optional[np.ndarray]) -> np.ndarray:
    if Wtilde is None or Wtilde.size == 0:
        return np.asarray(Xstar, dtype=float)
    return np.hstack([Xstar, Wtilde])


def _column_stats(D: np.ndarray, Y: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    # column by column so every column's statistics are independent of the batch shape
    gram = D.T @ D
    xty = np.empty((D.shape[1], Y.shape[1]))
    yy = np.empty(Y.shape[1])
    for c in range(Y.shape[1]):
        xty[:, c] = D.T @ Y[:, c]
        yy[c] = Y[:, c] @ Y[:, c]
    return gram, xty, yy


def ridge_estimates(D: np.ndarray, Y: np.ndarray, n_exposure: int) -> RidgeFit:
    """
    Ridge-stabilized least squares of every column of Y on D.

    The penalty is RIDGE_FACTOR * trace(X*'X*) / T* where X* are the first
    n_exposure columns of D.
    """
    n, Q = D.shape
    gram, xty, yy = _column_stats(D, Y)
    lam = RIDGE_FACTOR * np.trace(gram[:n_exposure, :n_exposure]) / max(n_exposure, 1)
    try:
        factor = cho_factor(gram + lam * np.eye(Q))
    except LinAlgError as exc:
        raise NumericalError("singular_design", detail=str(exc)) from exc

    coef = np.empty_like(xty)
    for c in range(Y.shape[1]):
        coef[:, c] = cho_solve(factor, xty[:, c])
    if not np.all(np.isfinite(coef)):
        raise NumericalError("singular_design", detail="non-finite ridge coefficients")

    dof = max(n - Q, 1)
    resid = np.empty(Y.shape[1])
    for c in range(Y.shape[1]):
        r = Y[:, c] - D @ coef[:, c]
        resid[c] = r @ r
    sigma2 = resid / dof
    inv_diag = np.diag(cho_solve(factor, np.eye(Q)))
    se = np.sqrt(np.maximum(inv_diag[:, None] * sigma2[None, :], 0.0))
    return RidgeFit(coef=coef, se=se, sigma2=sigma2)


def _hyper_from_ridge(fit: RidgeFit, level_of: np.ndarray, n_exposure: int) -> SpikeSlabHyper:
    b = fit.coef[:n_exposure]
    se = fit.se[:n_exposure]
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, np.abs(b) / se, np.where(b != 0, np.inf, 0.0))
    exceed = z > EB_Z_THRESHOLD

    levels = tuple(int(j) for j in np.unique(level_of))
    tau = np.full((n_exposure, len(levels)), TAU_MIN)
    pi = np.empty((n_exposure, len(levels)))
    for col, j in enumerate(levels):
        members = level_of == j
        hits = exceed[:, members]
        pi[:, col] = np.clip(hits.mean(axis=1), PI_MIN, PI_MAX)
        counts = hits.sum(axis=1)
        second = np.where(hits, b[:, members] ** 2, 0.0).sum(axis=1)
        noise = np.where(hits, se[:, members] ** 2, 0.0).sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            moment = np.where(counts > 0, (second - noise) / counts, TAU_MIN)
        tau[:, col] = np.maximum(moment, TAU_MIN)
    return SpikeSlabHyper(tau=tau, pi=pi, levels=levels)


def estimate_hyperparameters(Xstar: np.ndarray, Ystar: np.ndarray, level_of: np.ndarray,
                             Wtilde: Optional[np.ndarray] = None) -> SpikeSlabHyper:
    """
    Empirical-Bayes slab variances and inclusion probabilities.

    For every exposure coefficient p and outcome level j, pool the ridge
    z-scores over the columns k at that level: pi is the clipped fraction
    with |z| > 2, tau the mean squared estimate minus the mean squared
    standard error over those exceeding columns, floored at TAU_MIN.

    tau is a second moment about zero, not a variance about the mean: when
    every column at a level carries the same b = 10 with se = 0.05, the
    spread of the estimates is ~0 and a variance would collapse tau to
    TAU_MIN, whereas the zero-centred slab needs tau ~ 100.

    Args:
        Xstar: n x T* transformed exposure
        Ystar: n x S* transformed outcome
        level_of: level label of every Ystar column
        Wtilde: optional scalar covariates, adjusted for but not pooled

    Returns:
        SpikeSlabHyper over the levels present in level_of
    """
    level_of = np.asarray(level_of, dtype=int)
    if level_of.shape != (Ystar.shape[1],):
        raise ValidationError("dimension_mismatch", what="level_of", expected=Ystar.shape[1],
                              actual=level_of.shape)
    fit = ridge_estimates(_design(Xstar, Wtilde), Ystar, Xstar.shape[1])
    hyper = _hyper_from_ridge(fit, level_of, Xstar.shape[1])
    logger.debug("Hyperparameters: median pi %.3g, median tau %.3g", np.median(hyper.pi), np.median(hyper.tau))
    return hyper


# ============================================================================
# SPIKE-AND-SLAB GIBBS SAMPLER
# ============================================================================

def make_stream(seed: int, index: int, kind: int = STREAM_FFR) -> np.random.Generator:
    """Independent Philox stream for one column, site or replicate."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(kind, index))))


class _ColumnFailure(Exception):
    def __init__(self, offset: int, cause: str):
        super().__init__(cause)
        self.offset = offset
        self.cause = cause


@dataclass
class ColumnDraws:
    """Retained draws for one column model."""

    beta: np.ndarray      # M x P
    gamma: np.ndarray     # M x P bool
    theta: np.ndarray     # M x q
    sigma2: np.ndarray    # M


@dataclass
class _BlockDraws:
    beta: np.ndarray      # M x Q x B
    gamma: np.ndarray     # M x Q x B bool
    sigma2: np.ndarray    # M x B


def _sample_block(gram: np.ndarray, xty: np.ndarray, yy: np.ndarray, n_obs: int,
                  slab_var: np.ndarray, log_odds: np.ndarray, beta0: np.ndarray, sigma2_0: np.ndarray,
                  mcmc: McmcConfig, streams: Sequence[np.random.Generator]) -> _BlockDraws:
    """
    Single-site Gibbs sweeps for B columns sharing one Gram matrix.

    slab_var and log_odds are Q x B; a log prior odds of +inf forces the
    coordinate in (scalar covariates, or the conjugate check).
    """
    Q, B = xty.shape
    beta = beta0.copy()
    sigma2 = sigma2_0.copy()
    diag = np.diag(gram).copy()
    keep = range(mcmc.burn_in, mcmc.total_draws, mcmc.thin)
    M = len(keep)
    out_beta = np.empty((M, Q, B))
    out_gamma = np.empty((M, Q, B), dtype=bool)
    out_sigma2 = np.empty((M, B))
    log_slab = np.log(slab_var)
    shape = 0.5 * n_obs
    tiny = np.finfo(float).tiny

    it = 0
    kept = 0
    while it < mcmc.total_draws:
        size = min(RNG_CHUNK_ITERATIONS, mcmc.total_draws - it)
        uniforms = np.stack([s.random((size, Q)) for s in streams], axis=-1)
        normals = np.stack([s.standard_normal((size, Q)) for s in streams], axis=-1)
        gammas = np.stack([s.standard_gamma(shape, size) for s in streams], axis=-1)

        # fresh residual correlations each chunk so rounding never accumulates
        resid = np.empty_like(xty)
        for c in range(B):
            resid[:, c] = xty[:, c] - gram @ beta[:, c]

        for step in range(size):
            retain = it >= mcmc.burn_in and (it - mcmc.burn_in) % mcmc.thin == 0
            for p in range(Q):
                partial = resid[p] + diag[p] * beta[p]
                prec = diag[p] / sigma2 + 1.0 / slab_var[p]
                mean = partial / sigma2 / prec
                log_bf = 0.5 * (mean * mean * prec - log_slab[p] - np.log(prec))
                include = uniforms[step, p] < expit(log_odds[p] + log_bf)
                new = np.where(include, mean + normals[step, p] / np.sqrt(prec), 0.0)
                resid -= np.outer(gram[:, p], new - beta[p])
                beta[p] = new
                if retain:
                    out_gamma[kept, p] = include
            rss = yy - np.cumsum(beta * (xty + resid), axis=0)[-1]
            sigma2 = 0.5 * np.maximum(rss, tiny) / gammas[step]
            if retain:
                out_beta[kept] = beta
                out_sigma2[kept] = sigma2
                kept += 1
            it += 1

        bad = ~(np.isfinite(sigma2) & (sigma2 > 0) & np.all(np.isfinite(beta), axis=0))
        if bad.any():
            offset = int(np.flatnonzero(bad)[0])
            raise _ColumnFailure(offset, f"non-finite conditional variance after iteration {it}")

    return _BlockDraws(beta=out_beta, gamma=out_gamma, sigma2=out_sigma2)


def _initial_state(fit: RidgeFit, n_exposure: int) -> Tuple[np.ndarray, np.ndarray]:
    """Warm start: ridge estimates with |z| <= 2 exposure coefficients set to zero."""
    beta0 = fit.coef.copy()
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.abs(fit.coef[:n_exposure]) / fit.se[:n_exposure]
    beta0[:n_exposure] = np.where(z > EB_Z_THRESHOLD, beta0[:n_exposure], 0.0)
    return beta0, np.maximum(fit.sigma2, np.finfo(float).tiny)


def _prior_arrays(hyper: SpikeSlabHyper, levels: Sequence[int], n_scalar: int,
                  force_inclusion: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    taus, log_odds = [], []
    for j in levels:
        tau, pi = hyper.for_level(int(j))
        odds = np.full(len(tau), np.inf) if force_inclusion else logit(pi)
        taus.append(np.concatenate([tau, np.full(n_scalar, SCALAR_PRIOR_VARIANCE)]))
        log_odds.append(np.concatenate([odds, np.full(n_scalar, np.inf)]))
    return np.stack(taus, axis=1), np.stack(log_odds, axis=1)


def fit_column(ystar_col: np.ndarray, Xstar: np.ndarray, Wtilde: Optional[np.ndarray], hyper: SpikeSlabHyper,
               j: int, mcmc: McmcConfig, stream: np.random.Generator,
               force_inclusion: bool = False, k: int = 0) -> ColumnDraws:
    """
    Gibbs sampler for one outcome column y* = X* beta* + W~ theta + e.

    Args:
        ystar_col: n-vector response
        Xstar: n x T* transformed exposure
        Wtilde: n x q' scalar covariates (None or empty for none)
        hyper: hyperparameters covering level j
        j: outcome level of this column
        mcmc: sampler budget
        stream: this column's random stream
        force_inclusion: keep every exposure coefficient in the slab
        k: location of this column within its level, used in error messages

    Returns:
        ColumnDraws with retained beta*, gamma, theta and sigma2 draws
    """
    y = np.asarray(ystar_col, dtype=float).reshape(-1, 1)
    D = _design(Xstar, Wtilde)
    P = Xstar.shape[1]
    if D.shape[0] != y.shape[0]:
        raise ValidationError("row_mismatch", first="ystar_col", first_rows=y.shape[0], second="Xstar",
                              second_rows=D.shape[0])
    fit = ridge_estimates(D, y, P)
    gram, xty, yy = _column_stats(D, y)
    slab_var, log_odds = _prior_arrays(hyper, [j], D.shape[1] - P, force_inclusion)
    beta0, sigma2_0 = _initial_state(fit, P)
    try:
        block = _sample_block(gram, xty, yy, y.shape[0], slab_var, log_odds, beta0, sigma2_0, mcmc, [stream])
    except _ColumnFailure as exc:
        raise NumericalError("column_failed", j=j, k=k, cause=exc.cause) from exc
    return ColumnDraws(beta=block.beta[:, :P, 0], gamma=block.gamma[:, :P, 0],
                       theta=block.beta[:, P:, 0], sigma2=block.sigma2[:, 0])


@dataclass
class ColumnBatch:
    """Retained draws for many column models that share one design."""

    beta: np.ndarray      # M x P x C
    gamma: np.ndarray     # M x P x C bool
    theta: np.ndarray     # M x q x C
    sigma2: np.ndarray    # M x C
    hyper: SpikeSlabHyper


def fit_columns(Ystar: np.ndarray, Xstar: np.ndarray, Wtilde: Optional[np.ndarray], level_of: np.ndarray,
                mcmc: McmcConfig, hyper: Optional[SpikeSlabHyper] = None, stream_kind: int = STREAM_FFR,
                threads: int = 1,
                on_failure: Optional[Callable[[int, str], Exception]] = None) -> ColumnBatch:
    """
    Run the column samplers for every column of Ystar.

    Column c uses stream (mcmc.seed, c) of family stream_kind and the
    hyperparameters of level level_of[c]. Columns are sampled in fixed
    blocks of COLUMN_BLOCK_SIZE; threads only decide how many blocks run at once.
    """
    Ystar = np.asarray(Ystar, dtype=float)
    level_of = np.asarray(level_of, dtype=int)
    D = _design(Xstar, Wtilde)
    n, Q = D.shape
    P = Xstar.shape[1]
    C = Ystar.shape[1]

    fit = ridge_estimates(D, Ystar, P)
    if hyper is None:
        hyper = _hyper_from_ridge(fit, level_of, P)
    gram, xty, yy = _column_stats(D, Ystar)
    slab_var, log_odds = _prior_arrays(hyper, level_of, Q - P)
    beta0, sigma2_0 = _initial_state(fit, P)

    starts = list(range(0, C, COLUMN_BLOCK_SIZE))

    def run(start: int) -> _BlockDraws:
        cols = slice(start, min(start + COLUMN_BLOCK_SIZE, C))
        streams = [make_stream(mcmc.seed, c, stream_kind) for c in range(cols.start, cols.stop)]
        try:
            return _sample_block(gram, xty[:, cols], yy[cols], n, slab_var[:, cols], log_odds[:, cols],
                                 beta0[:, cols], sigma2_0[cols], mcmc, streams)
        except _ColumnFailure as exc:
            column = start + exc.offset
            if on_failure is not None:
                raise on_failure(column, exc.cause) from exc
            raise NumericalError("column_failed", j=int(level_of[column]), k=column, cause=exc.cause) from exc

    logger.debug("Sampling %d column(s) in %d block(s) on %d thread(s)", C, len(starts), threads)
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            blocks = list(pool.map(run, starts))
    else:
        blocks = [run(start) for start in starts]

    beta = np.concatenate([b.beta for b in blocks], axis=2)
    gamma = np.concatenate([b.gamma for b in blocks], axis=2)
    sigma2 = np.concatenate([b.sigma2 for b in blocks], axis=1)
    return ColumnBatch(beta=beta[:, :P], gamma=gamma[:, :P], theta=beta[:, P:], sigma2=sigma2, hyper=hyper)


# ============================================================================
# POSTERIOR DRAWS AND THE FFR FIT
# ============================================================================

@dataclass
class PosteriorDraws:
    """Retained data-space surface draws plus provenance."""

    surfaces: np.ndarray                      # M x T x S
    sigma2: np.ndarray                        # M x S*
    scalar_curves: np.ndarray                 # M x q x S
    seed: int
    config_hash: str
    method: str = "ffr"
    inclusion: Optional[np.ndarray] = None    # M x T* x S* bool
    wavelet: Optional[np.ndarray] = None      # M x T* x S*
    t_labels: List[str] = field(default_factory=list)
    s_labels: List[str] = field(default_factory=list)
    w_labels: List[str] = field(default_factory=list)
    t_spec: Optional[WaveletSpec] = None
    s_spec: Optional[WaveletSpec] = None
    hyper: Optional[SpikeSlabHyper] = None

    @property
    def n_draws(self) -> int:
        return self.surfaces.shape[0]

    @property
    def grid_shape(self) -> Tuple[int, int]:
        return self.surfaces.shape[1], self.surfaces.shape[2]

    def mean_surface(self) -> np.ndarray:
        return self.surfaces.mean(axis=0)

    def mean_scalar_curves(self) -> np.ndarray:
        return self.scalar_curves.mean(axis=0)


def fit_ffr(dataset: FunctionalDataset, t_spec: WaveletSpec, s_spec: Optional[WaveletSpec], mcmc: McmcConfig,
            hyper_override: Optional[SpikeSlabHyper] = None, threads: int = 1,
            stream_kind: int = STREAM_FFR) -> PosteriorDraws:
    """
    Fit the wavelet-space FFR to a preprocessed dataset.

    X and Y are transformed row-wise (X* is never compressed), every Y*
    column gets its own sampler, and each retained draw is projected back
    to the T x S grid. With s_spec None the outcome axis is left
    untransformed and all sites form one pooled level.
    """
    phi = build_operator(t_spec)
    Xstar = dwt_rows(dataset.X, phi)
    if s_spec is None:
        omega = None
        Ystar = dataset.Y
        level_of = np.zeros(dataset.S, dtype=int)
        locations = [(0, k) for k in range(dataset.S)]
    else:
        omega = build_operator(s_spec)
        Ystar = dwt_rows(dataset.Y, omega)
        level_of = omega.level_of()
        locations = [(entry.j, entry.k) for entry in omega.index()]
    Wtilde = dataset.W if dataset.q else None

    logger.info("Fitting FFR: n=%d, T=%d -> %d, S=%d -> %d, q=%d, %d draws (%d retained)",
                dataset.n, dataset.T, Xstar.shape[1], dataset.S, Ystar.shape[1], dataset.q,
                mcmc.total_draws, mcmc.retained)

    def failure(column: int, cause: str) -> NumericalError:
        j, k = locations[column]
        return NumericalError("column_failed", j=j, k=k, cause=cause)

    batch = fit_columns(Ystar, Xstar, Wtilde, level_of, mcmc, hyper=hyper_override, stream_kind=stream_kind,
                        threads=threads, on_failure=failure)

    if omega is None:
        surfaces = phi.embedded_matrix.T @ batch.beta
        curves = batch.theta
    else:
        surfaces = project_surfaces(batch.beta, phi, omega)
        curves = idwt_rows(batch.theta, omega) if dataset.q else np.zeros((surfaces.shape[0], 0, dataset.S))
    if not np.all(np.isfinite(surfaces)):
        raise NumericalError("non_finite", quantity="surface draws", where="fit_ffr")

    provenance = {
        "method": "ffr",
        "mcmc": mcmc.model_dump(),
        "t_spec": t_spec.to_dict(),
        "s_spec": s_spec.to_dict() if s_spec else None,
        "hyper_override": hyper_override is not None,
    }
    logger.info("FFR fit complete: %d draws of a %dx%d surface", surfaces.shape[0], dataset.T, dataset.S)
    return PosteriorDraws(
        surfaces=surfaces,
        sigma2=batch.sigma2,
        scalar_curves=curves,
        seed=mcmc.seed,
        config_hash=config_hash(provenance),
        method="ffr",
        inclusion=batch.gamma,
        wavelet=batch.beta if mcmc.store_wavelet else None,
        t_labels=dataset.t_labels,
        s_labels=dataset.s_labels,
        w_labels=dataset.w_labels,
        t_spec=t_spec,
        s_spec=s_spec,
        hyper=batch.hyper,
    )
