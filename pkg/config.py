"""
Configuration and Settings for the Wavelet FFR Window Detector
===============================================================
All defaults, constants, error messages and run-config schemas centralized here.

REQUIREMENTS ADDRESSED:
- Wavelet engine: Daubechies family, levels, boundary handling
- Model fitting: MCMC budget, empirical-Bayes constants, scalar-covariate prior
- Posterior inference: BFDR and SimBaS defaults
- Simulation harness: band surfaces, noise scales, synthetic exposure
- Command-line front end: exit codes, output file names, validated run configs
- Error Handling and Feedback: centralized, actionable error messages

Modify defaults here to change behaviour without touching the numerical code.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from typing import Dict, List, Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# ============================================================================
# APPLICATION METADATA
# ============================================================================

APP_NAME = "Wavelet FFR Window Detector"
APP_VERSION = "1.0.0"
CLI_PROG = "waveffr"


# ============================================================================
# WAVELET SETTINGS
# ============================================================================
# Daubechies wavelets with six levels of decomposition, four vanishing moments
# and zero-padding are the defaults for both the exposure and outcome grids.

WAVELET_FAMILIES = ["daubechies"]
BOUNDARY_MODES = ["zero_pad", "periodic", "reflect"]

DEFAULT_WAVELET_FAMILY = "daubechies"
DEFAULT_VANISHING_MOMENTS = 4
DEFAULT_LEVELS = 6
DEFAULT_BOUNDARY = "zero_pad"

MAX_VANISHING_MOMENTS = 10
COARSE_FILTER_RATIO = 4         # coarse_length * ratio must reach the filter length
FILTER_CHECK_TOL = 1e-12        # orthonormality of embedded filters at build time
SCALING_LEVEL = 0               # level label of the coarse scaling block


# ============================================================================
# MCMC SETTINGS
# ============================================================================
# 2000 draws with the first 1000 discarded, as in the reference simulations.

DEFAULT_TOTAL_DRAWS = 2000
DEFAULT_BURN_IN = 1000
DEFAULT_THIN = 1
DEFAULT_SEED = 20200401

COLUMN_BLOCK_SIZE = 32          # columns per work unit, independent of the thread count
RNG_CHUNK_ITERATIONS = 50       # iterations of random numbers drawn per column at a time

# Stream families keep FFR columns, DLM sites and simulated replicates apart
STREAM_FFR = 0
STREAM_DLM = 1
STREAM_SIMULATION = 2


# ============================================================================
# EMPIRICAL BAYES AND PRIOR CONSTANTS
# ============================================================================

EB_Z_THRESHOLD = 2.0
PI_MIN = 0.001
PI_MAX = 0.999
TAU_MIN = 1e-8
RIDGE_FACTOR = 1e-6             # ridge penalty = RIDGE_FACTOR * trace(X'X) / T*
SCALAR_PRIOR_VARIANCE = 1e6     # weak N(0, 1e6) prior on scalar-covariate effects


# ============================================================================
# PREPROCESSING SETTINGS
# ============================================================================

DEFAULT_PCA_FRACTION = 0.95
MVALUE_CLIP = 1e-6
COVARIATE_TYPES = ["continuous", "categorical"]


# ============================================================================
# POSTERIOR INFERENCE SETTINGS
# ============================================================================

DEFAULT_ALPHA = 0.05
BFDR_TIE_TOL = 1e-12           # relative slack so exact rational ties with alpha qualify
DEFAULT_DELTAS = [0.15, 0.10, 0.05]
DEFAULT_BAND_ALPHAS = [0.01, 0.05, 0.10]
SD_FLOOR = 1e-12
RHO_MIN = 0.0
RHO_MAX = 0.99
MIN_DRAWS_SIMBAS = 10
INTERVAL_LEVEL = 0.95


# ============================================================================
# SIMULATION SETTINGS
# ============================================================================
# Grid positions below are 1-based, matching how the band surfaces are described.

BAND_VALUE = 0.2
DEFAULT_T = 90
DEFAULT_S = 100
VERTICAL_BAND_TIMES = (40, 44)
HORIZONTAL_BAND_TIMES = (1, 45)
HORIZONTAL_BAND_SITE = 50
STUDY_NOISE_SCALES = [4.0, 16.0, 64.0]
DEFAULT_RHO_AR1 = 0.5
DEFAULT_N_SUBJECTS = 400
DEFAULT_REPLICATES = 20

SYNTHETIC_EXPOSURE = {
    "mean": 10.0,
    "sd": 5.0,
    "rho": 0.8,
    "floor": 0.1,
}

TRUTH_KINDS = ["vertical_band", "horizontal_band", "null", "custom"]
EXPOSURE_KINDS = ["synthetic_ar1", "resample_csv"]
METHODS = ["ffr", "dlm"]


# ============================================================================
# OUTPUT SETTINGS
# ============================================================================
# File names written by the command-line front end

EXIT_OK = 0
EXIT_NUMERICAL = 1
EXIT_VALIDATION = 2

BETA_MEAN_FILE = "beta_mean.csv"
GAMMA_CURVES_FILE = "gamma_curves.csv"
DRAWS_MANIFEST_FILE = "draws_manifest.json"
DRAWS_DIR = "draws"
DRAWS_PER_CHUNK = 50
PREPROCESS_REPORT_FILE = "preprocess_report.json"
INFERENCE_SUMMARY_FILE = "inference_summary.json"
METRICS_FILE = "metrics.json"
REPORT_MARKDOWN_FILE = "report.md"
FLOAT_FORMAT = "%.17g"          # round-trips every float64 exactly

HEATMAP_CMAP = "inferno"
HEATMAP_DPI = 100

ENV_THREADS = "WAVEFFR_THREADS"
ENV_OUT = "WAVEFFR_OUT"
ENV_RUN_SLOW = "WAVEFFR_RUN_SLOW"


# ============================================================================
# ERROR MESSAGES
# ============================================================================
# REQUIREMENT: Error Handling and Feedback
# Clear, actionable messages; the CLI prints them verbatim.

ERROR_MESSAGES = {
    "missing_file": "Input file not found: {path}",
    "row_mismatch": "Row count mismatch: {first} has {first_rows} rows but {second} has {second_rows} rows",
    "non_numeric": "{path}: non-numeric value at row {row}, column '{column}'",
    "missing_value": "{path}: missing value at row {row}, column '{column}'",
    "empty_file": "{path}: file is empty (expected a header row of labels)",
    "malformed_csv": "{path}: cannot be parsed as CSV ({detail})",
    "dimension_mismatch": "{what}: expected {expected} but got {actual}",
    "too_small": "{what} must be at least {minimum} (got {actual})",
    "zero_variance": "Column '{column}' of {matrix} has zero variance and cannot be scaled",
    "bad_wavelet": "Invalid wavelet settings: {reason}",
    "coarse_too_short": (
        "Wavelet decomposition too deep: padded length {padded} with {levels} levels leaves "
        "{coarse} coarse coefficient(s); db{vm} needs at least {minimum}, {hint}"
    ),
    "filter_not_orthonormal": "Daubechies filter db{vm} failed the orthonormality check (error {error:.3g})",
    "singular_design": "Ridge-stabilized design is singular ({detail})",
    "non_finite": "Non-finite {quantity} in {where}",
    "column_failed": "Sampler failed for column (j={j}, k={k}): {cause}",
    "site_failed": "Sampler failed for site {site}: {cause}",
    "replicate_failed": "Replicate {index} failed: {cause}",
    "missing_draws": "No posterior draws found at {path}",
    "missing_metrics": "Metrics file not found: {path}",
    "invalid_config": "Invalid configuration: {detail}",
    "empty_resample": "Exposure file {path} contains no rows to resample",
    "bad_probability": "{what} must lie in [0, 1]",
}


def get_error_message(error_type: str, **kwargs) -> str:
    """
    Get formatted error message with variable substitution.

    Args:
        error_type: Key from ERROR_MESSAGES
        **kwargs: Variables substituted into the template

    Returns:
        Formatted error message
    """
    template = ERROR_MESSAGES.get(error_type, "An error occurred: {error}")
    return template.format(**kwargs)


def _restore_error(cls, error_type: str, details: Dict):
    return cls(error_type, **details)


class ValidationError(ValueError):
    """Bad input, configuration or dimensions. The CLI exits with code 2."""

    exit_code = EXIT_VALIDATION

    def __init__(self, error_type: str, **kwargs):
        self.error_type = error_type
        self.details = kwargs
        super().__init__(get_error_message(error_type, **kwargs))

    def __reduce__(self):
        return _restore_error, (type(self), self.error_type, self.details)


class NumericalError(RuntimeError):
    """Failure inside a numerical routine. The CLI exits with code 1."""

    exit_code = EXIT_NUMERICAL

    def __init__(self, error_type: str, **kwargs):
        self.error_type = error_type
        self.details = kwargs
        super().__init__(get_error_message(error_type, **kwargs))

    def __reduce__(self):
        return _restore_error, (type(self), self.error_type, self.details)


# ============================================================================
# RUN CONFIGURATION SCHEMAS
# ============================================================================
# REQUIREMENT: configs are validated before any computation; unknown keys rejected

class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class WaveletConfig(StrictModel):
    family: Literal["daubechies"] = DEFAULT_WAVELET_FAMILY
    vanishing_moments: int = Field(DEFAULT_VANISHING_MOMENTS, ge=1, le=MAX_VANISHING_MOMENTS)
    levels: int = Field(DEFAULT_LEVELS, ge=1)
    boundary: Literal["zero_pad", "periodic", "reflect"] = DEFAULT_BOUNDARY


class McmcConfig(StrictModel):
    """Gibbs sampler budget. Retained draws are iterations burn_in, burn_in+thin, ..."""

    total_draws: int = Field(DEFAULT_TOTAL_DRAWS, ge=2)
    burn_in: int = Field(DEFAULT_BURN_IN, ge=0)
    seed: int = Field(DEFAULT_SEED, ge=0, lt=2**64)
    thin: int = Field(DEFAULT_THIN, ge=1)
    store_wavelet: bool = False

    @model_validator(mode="after")
    def _check_budget(self):
        if self.burn_in >= self.total_draws:
            raise ValueError(f"burn_in ({self.burn_in}) must be smaller than total_draws ({self.total_draws})")
        if self.retained < 2:
            raise ValueError(f"only {self.retained} draw(s) would be retained; need at least 2")
        return self

    @property
    def retained(self) -> int:
        return len(range(self.burn_in, self.total_draws, self.thin))


class InferenceSettings(StrictModel):
    alpha: float = Field(DEFAULT_ALPHA, gt=0.0, lt=1.0)
    deltas: List[float] = Field(default_factory=lambda: list(DEFAULT_DELTAS))
    band_alphas: List[float] = Field(default_factory=lambda: list(DEFAULT_BAND_ALPHAS))

    @field_validator("deltas")
    @classmethod
    def _non_negative(cls, values):
        if any(v < 0 for v in values):
            raise ValueError("every delta must be >= 0")
        return values

    @field_validator("band_alphas")
    @classmethod
    def _open_unit(cls, values):
        if any(not 0.0 < v < 1.0 for v in values):
            raise ValueError("every band alpha must lie in (0, 1)")
        return values


class TruthConfig(StrictModel):
    kind: Literal["vertical_band", "horizontal_band", "null", "custom"] = "vertical_band"
    T: int = Field(DEFAULT_T, ge=2)
    S: int = Field(DEFAULT_S, ge=2)
    value: float = BAND_VALUE
    times: Optional[List[int]] = None      # 1-based inclusive [first, last]
    site: Optional[int] = None             # 1-based, horizontal band only
    path: Optional[str] = None             # custom surface CSV


class NoiseConfig(StrictModel):
    sigma2: float = Field(STUDY_NOISE_SCALES[0], gt=0.0)
    rho_ar1: float = Field(DEFAULT_RHO_AR1, ge=0.0, lt=1.0)


class ExposureConfig(StrictModel):
    kind: Literal["synthetic_ar1", "resample_csv"] = "synthetic_ar1"
    path: Optional[str] = None
    replace: bool = True
    mean: float = SYNTHETIC_EXPOSURE["mean"]
    sd: float = Field(SYNTHETIC_EXPOSURE["sd"], gt=0.0)
    rho: float = Field(SYNTHETIC_EXPOSURE["rho"], ge=0.0, lt=1.0)
    floor: Optional[float] = SYNTHETIC_EXPOSURE["floor"]

    @model_validator(mode="after")
    def _path_for_resample(self):
        if self.kind == "resample_csv" and not self.path:
            raise ValueError("resample_csv exposure needs a path")
        return self


class ScenarioConfig(StrictModel):
    name: str = "scenario"
    truth: TruthConfig = Field(default_factory=TruthConfig)
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    exposure: ExposureConfig = Field(default_factory=ExposureConfig)
    n: int = Field(DEFAULT_N_SUBJECTS, ge=2)
    replicates: int = Field(DEFAULT_REPLICATES, ge=1)
    seed: int = Field(DEFAULT_SEED, ge=0, lt=2**64)
    methods: List[Literal["ffr", "dlm"]] = Field(default_factory=lambda: list(METHODS))
    mcmc: McmcConfig = Field(default_factory=McmcConfig)
    inference: InferenceSettings = Field(default_factory=InferenceSettings)
    wavelet_t: WaveletConfig = Field(default_factory=WaveletConfig)
    wavelet_s: WaveletConfig = Field(default_factory=WaveletConfig)


class RunConfig(StrictModel):
    """Settings for one CLI invocation. Flags override keys loaded from a JSON file."""

    y: Optional[str] = None
    x: Optional[str] = None
    w: Optional[str] = None
    w_types: Optional[str] = None
    mvalue: bool = False
    scale: bool = True
    pca_fraction: float = Field(DEFAULT_PCA_FRACTION, gt=0.0, le=1.0)
    wavelet_t: WaveletConfig = Field(default_factory=WaveletConfig)
    wavelet_s: WaveletConfig = Field(default_factory=WaveletConfig)
    mcmc: McmcConfig = Field(default_factory=McmcConfig)
    inference: InferenceSettings = Field(default_factory=InferenceSettings)
    scenario: Optional[ScenarioConfig] = None
    fit_dir: Optional[str] = None
    metrics: List[str] = Field(default_factory=list)
    pdf: bool = False
    excel: bool = False
    out: str = "out"
    threads: int = Field(1, ge=1)


def config_hash(payload: Dict) -> str:
    """Stable short hash of a JSON-serializable config, used as draw provenance."""
    text = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def env_defaults() -> Dict[str, str]:
    """
    Optional defaults from the environment or a local .env file.

    None are required; flags and config files take precedence.
    """
    load_dotenv()
    defaults = {}
    if os.getenv(ENV_THREADS):
        defaults["threads"] = os.getenv(ENV_THREADS)
    if os.getenv(ENV_OUT):
        defaults["out"] = os.getenv(ENV_OUT)
    return defaults


# ============================================================================
# LOGGING
# ============================================================================

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def setup_logging(verbose: bool = False) -> None:
    """Configure one stream handler for the whole application."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=LOG_FORMAT,
        force=True,
    )
