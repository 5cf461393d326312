"""
Data and Draw Storage
=====================
Reading input matrices, writing/reading labeled grid CSVs, persisting
posterior draws and JSON summaries.

REQUIREMENTS ADDRESSED:
- Input CSVs with a header row; errors name the file, row and column
- Grid CSVs carry a two-line metadata header and parse back losslessly
- Chunked draw storage with a JSON manifest (dims, seed, config, wavelet specs)
- Deterministic bytes: sorted JSON keys, fixed float format, no timestamps
"""

import hashlib
import json
import logging
import os
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import (
    COVARIATE_TYPES,
    DRAWS_DIR,
    DRAWS_MANIFEST_FILE,
    DRAWS_PER_CHUNK,
    FLOAT_FORMAT,
    MVALUE_CLIP,
    ValidationError,
)
from ffr_core import PosteriorDraws, SpikeSlabHyper
from wavelet import WaveletSpec

logger = logging.getLogger(__name__)

_SPEC_FIELDS = ("original_length", "vanishing_moments", "levels", "family", "boundary")


# ============================================================================
# INPUT MATRICES
# ============================================================================

def _read_csv(source, path: str) -> pd.DataFrame:
    """All cells as strings; empty or ragged files become ValidationError."""
    try:
        return pd.read_csv(source, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise ValidationError("empty_file", path=path)
    except pd.errors.ParserError as exc:
        raise ValidationError("malformed_csv", path=path, detail=str(exc).strip())


def read_labeled_matrix(path: str) -> Tuple[np.ndarray, List[str]]:
    """
    Read an n x p numeric CSV whose first row holds column labels.

    REQUIREMENT: validation errors name the file, data row (1-based) and column.
    """
    if not os.path.exists(path):
        raise ValidationError("missing_file", path=path)
    frame = _read_csv(path, path)
    labels = [str(c) for c in frame.columns]
    values = np.empty(frame.shape, dtype=float)
    for col, label in enumerate(labels):
        raw = frame.iloc[:, col].str.strip()
        empty = raw.eq("") | raw.str.lower().isin(["na", "nan"])
        if empty.any():
            raise ValidationError("missing_value", path=path, row=int(np.flatnonzero(empty)[0]) + 1, column=label)
        numeric = pd.to_numeric(raw, errors="coerce")
        if numeric.isna().any():
            raise ValidationError("non_numeric", path=path, row=int(np.flatnonzero(numeric.isna())[0]) + 1,
                                  column=label)
        values[:, col] = numeric.to_numpy(dtype=float)
    if not np.all(np.isfinite(values)):
        row, col = np.argwhere(~np.isfinite(values))[0]
        raise ValidationError("non_numeric", path=path, row=int(row) + 1, column=labels[col])
    return values, labels


def read_covariate_types(path: Optional[str], labels: Sequence[str]) -> List[str]:
    """Sidecar JSON mapping covariate column -> "continuous" | "categorical" (default continuous)."""
    if path is None:
        return ["continuous"] * len(labels)
    mapping = read_json(path)
    unknown = sorted(set(mapping) - set(labels))
    if unknown:
        raise ValidationError("invalid_config", detail=f"{path} names unknown covariate column(s) {unknown}")
    types = [mapping.get(label, "continuous") for label in labels]
    bad = [t for t in types if t not in COVARIATE_TYPES]
    if bad:
        raise ValidationError("invalid_config", detail=f"{path}: covariate types must be one of {COVARIATE_TYPES}")
    return types


def to_m_values(proportions: np.ndarray) -> np.ndarray:
    """log2 odds of methylation proportions clipped to [1e-6, 1 - 1e-6]."""
    p = np.clip(np.asarray(proportions, dtype=float), MVALUE_CLIP, 1.0 - MVALUE_CLIP)
    return np.log2(p / (1.0 - p))


# ============================================================================
# GRID CSVs
# ============================================================================

def _grid_header(rows: int, cols: int, row_axis: str) -> str:
    return f"# dims: {row_axis.upper()}={rows} S={cols}\n# labels: rows={row_axis} cols=s\n"


def write_grid_csv(path: str, grid: np.ndarray, t_labels: Sequence[str], s_labels: Sequence[str],
                   row_axis: str = "t") -> None:
    """Write a T x S grid (or q x S with row_axis="w"); booleans are written as 0/1."""
    arr = np.asarray(grid)
    if arr.dtype == bool:
        arr = arr.astype(int)
    if arr.shape != (len(t_labels), len(s_labels)):
        raise ValidationError("dimension_mismatch", what=f"grid for {path}",
                              expected=(len(t_labels), len(s_labels)), actual=arr.shape)
    frame = pd.DataFrame(arr, index=pd.Index(list(t_labels), name=row_axis), columns=list(s_labels))
    with open(path, "w", newline="") as handle:
        handle.write(_grid_header(*arr.shape, row_axis))
        frame.to_csv(handle, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.debug("Wrote %s", path)


def _read_dims(handle, path: str) -> Tuple[int, int, str]:
    dims_line = handle.readline().strip()
    labels_line = handle.readline().strip()
    try:
        parts = [part.split("=") for part in dims_line.replace("# dims:", "").split()]
        (_, rows), (cols_key, cols) = parts
        if cols_key != "S":
            raise ValueError(cols_key)
        return int(rows), int(cols), labels_line
    except (KeyError, ValueError):
        raise ValidationError("invalid_config", detail=f"{path} lacks the '# dims: T=.. S=..' header")


def read_grid_csv(path: str) -> Tuple[np.ndarray, List[str], List[str]]:
    """Read a grid written by write_grid_csv; returns (grid, t_labels, s_labels)."""
    if not os.path.exists(path):
        raise ValidationError("missing_file", path=path)
    with open(path, "r", newline="") as handle:
        T, S, _ = _read_dims(handle, path)
        frame = _read_csv(handle, path)
    grid = frame.iloc[:, 1:].to_numpy(dtype=float)
    if grid.shape != (T, S):
        raise ValidationError("dimension_mismatch", what=path, expected=(T, S), actual=grid.shape)
    return grid, frame.iloc[:, 0].tolist(), [str(c) for c in frame.columns[1:]]


def write_band_csv(path: str, lower: np.ndarray, upper: np.ndarray, t_labels: Sequence[str],
                   s_labels: Sequence[str]) -> None:
    """Joint band in long format, one (t, s) cell per row."""
    T, S = lower.shape
    frame = pd.DataFrame({
        "t": np.repeat(list(t_labels), S),
        "s": np.tile(list(s_labels), T),
        "lower": lower.ravel(),
        "upper": upper.ravel(),
    })
    with open(path, "w", newline="") as handle:
        handle.write(f"# dims: T={T} S={S}\n# labels: long t,s,lower,upper\n")
        frame.to_csv(handle, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def read_band_csv(path: str) -> Tuple[np.ndarray, np.ndarray]:
    if not os.path.exists(path):
        raise ValidationError("missing_file", path=path)
    with open(path, "r", newline="") as handle:
        T, S, _ = _read_dims(handle, path)
        frame = _read_csv(handle, path)
    lower = frame["lower"].to_numpy(dtype=float).reshape(T, S)
    return lower, frame["upper"].to_numpy(dtype=float).reshape(T, S)


# ============================================================================
# JSON
# ============================================================================

def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def write_json(path: str, payload: Dict) -> None:
    with open(path, "w") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True, default=_json_default)
        handle.write("\n")


def read_json(path: str) -> Dict:
    if not os.path.exists(path):
        raise ValidationError("missing_file", path=path)
    try:
        with open(path, "r") as handle:
            return json.load(handle)
    except json.JSONDecodeError as exc:
        raise ValidationError("invalid_config", detail=f"{path}: {exc}")


# ============================================================================
# POSTERIOR DRAWS
# ============================================================================

def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _save_array(directory: str, name: str, array: np.ndarray) -> Dict:
    path = os.path.join(directory, name)
    np.save(path, np.ascontiguousarray(array), allow_pickle=False)
    return {"file": name, "sha256": _sha256(path), "shape": list(array.shape)}


def save_draws(out_dir: str, draws: PosteriorDraws, config: Optional[Dict] = None) -> str:
    """
    Persist draws under out_dir/draws/ plus a JSON manifest.

    Surfaces are split into chunks of DRAWS_PER_CHUNK draws, each an
    M_chunk x T x S array; the manifest records dims, seed, config and
    wavelet specs.

    Returns:
        Path of the manifest
    """
    draws_dir = os.path.join(out_dir, DRAWS_DIR)
    os.makedirs(draws_dir, exist_ok=True)
    M, T, S = draws.surfaces.shape
    chunks = []
    for index, start in enumerate(range(0, M, DRAWS_PER_CHUNK)):
        chunks.append(_save_array(draws_dir, f"surfaces_{index:04d}.npy",
                                  draws.surfaces[start:start + DRAWS_PER_CHUNK]))
    arrays = {
        "sigma2": _save_array(draws_dir, "sigma2.npy", draws.sigma2),
        "scalar_curves": _save_array(draws_dir, "scalar_curves.npy", draws.scalar_curves),
    }
    if draws.inclusion is not None:
        arrays["inclusion"] = _save_array(draws_dir, "inclusion.npy", draws.inclusion)
    if draws.wavelet is not None:
        arrays["wavelet"] = _save_array(draws_dir, "wavelet.npy", draws.wavelet)

    manifest = {
        "method": draws.method,
        "dims": {"M": M, "T": T, "S": S, "q": draws.scalar_curves.shape[1]},
        "seed": draws.seed,
        "config_hash": draws.config_hash,
        "config": config or {},
        "t_spec": draws.t_spec.to_dict() if draws.t_spec else None,
        "s_spec": draws.s_spec.to_dict() if draws.s_spec else None,
        "labels": {"t": list(draws.t_labels), "s": list(draws.s_labels), "w": list(draws.w_labels)},
        "hyper": draws.hyper.to_dict() if draws.hyper else None,
        "chunks": chunks,
        "arrays": arrays,
    }
    path = os.path.join(out_dir, DRAWS_MANIFEST_FILE)
    write_json(path, manifest)
    logger.info("Saved %d draws (%d chunk(s)) to %s", M, len(chunks), draws_dir)
    return path


def _spec_from_dict(payload: Optional[Dict]) -> Optional[WaveletSpec]:
    if not payload:
        return None
    return WaveletSpec(**{key: payload[key] for key in _SPEC_FIELDS})


def load_draws(fit_dir: str) -> PosteriorDraws:
    """Load draws saved by save_draws; missing files raise ValidationError."""
    manifest_path = os.path.join(fit_dir, DRAWS_MANIFEST_FILE)
    if not os.path.exists(manifest_path):
        raise ValidationError("missing_draws", path=manifest_path)
    manifest = read_json(manifest_path)
    draws_dir = os.path.join(fit_dir, DRAWS_DIR)

    def load(entry: Dict) -> np.ndarray:
        path = os.path.join(draws_dir, entry["file"])
        if not os.path.exists(path):
            raise ValidationError("missing_draws", path=path)
        return np.load(path, allow_pickle=False)

    surfaces = np.concatenate([load(chunk) for chunk in manifest["chunks"]], axis=0)
    dims = manifest["dims"]
    if surfaces.shape != (dims["M"], dims["T"], dims["S"]):
        raise ValidationError("dimension_mismatch", what=f"draws in {draws_dir}",
                              expected=(dims["M"], dims["T"], dims["S"]), actual=surfaces.shape)
    arrays = manifest["arrays"]
    hyper = manifest.get("hyper")
    return PosteriorDraws(
        surfaces=surfaces,
        sigma2=load(arrays["sigma2"]),
        scalar_curves=load(arrays["scalar_curves"]),
        seed=manifest["seed"],
        config_hash=manifest["config_hash"],
        method=manifest["method"],
        inclusion=load(arrays["inclusion"]) if "inclusion" in arrays else None,
        wavelet=load(arrays["wavelet"]) if "wavelet" in arrays else None,
        t_labels=manifest["labels"]["t"],
        s_labels=manifest["labels"]["s"],
        w_labels=manifest["labels"]["w"],
        t_spec=_spec_from_dict(manifest.get("t_spec")),
        s_spec=_spec_from_dict(manifest.get("s_spec")),
        hyper=SpikeSlabHyper(tau=np.asarray(hyper["tau"]), pi=np.asarray(hyper["pi"]),
                             levels=tuple(hyper["levels"])) if hyper else None,
    )
