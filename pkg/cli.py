"""
Command-Line Front End
======================
waveffr fit-ffr | fit-dlm | infer | simulate | report

REQUIREMENTS ADDRESSED:
- Validated run configuration: JSON config file, then flags, unknown keys rejected
- Fit commands write beta_mean.csv, gamma_curves.csv, draws and preprocess_report.json
- infer writes probability, BFDR flag, SimBaS and band grids plus heat maps
- simulate writes metrics.json and the grids behind the heat maps
- report renders Markdown/CSV tables, heat maps and optional PDF/Excel bundles
- Exit codes: 0 success, 1 numerical failure, 2 validation failure
"""

import argparse
import logging
import os
import sys
from typing import Dict, List, Optional

from pydantic import ValidationError as PydanticValidationError

from config import (
    APP_NAME,
    APP_VERSION,
    BETA_MEAN_FILE,
    CLI_PROG,
    EXIT_OK,
    GAMMA_CURVES_FILE,
    INFERENCE_SUMMARY_FILE,
    METRICS_FILE,
    PREPROCESS_REPORT_FILE,
    REPORT_MARKDOWN_FILE,
    NumericalError,
    RunConfig,
    ValidationError,
    env_defaults,
    setup_logging,
)
from dlm import fit_dlm_surface
from ffr_core import FunctionalDataset, fit_ffr, preprocess
from inference import bfdr_flag, pointwise_probability, simbas
from reporting import build_tables, export_to_excel, export_to_pdf, markdown_report, render_heatmap
from simulation import Scenario, run_replicates
from storage import (
    load_draws,
    read_covariate_types,
    read_grid_csv,
    read_json,
    read_labeled_matrix,
    save_draws,
    to_m_values,
    write_band_csv,
    write_grid_csv,
    write_json,
)
from wavelet import make_spec

logger = logging.getLogger(__name__)


# ============================================================================
# CONFIGURATION
# ============================================================================

def _deep_merge(base: Dict, override: Dict) -> Dict:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _prune(tree: Dict) -> Dict:
    """Drop unset flags, and sections left empty."""
    out = {}
    for key, value in tree.items():
        if isinstance(value, dict):
            value = _prune(value)
            if value:
                out[key] = value
        elif value is not None:
            out[key] = value
    return out


def _flag_overrides(args: argparse.Namespace) -> Dict:
    get = lambda name: getattr(args, name, None)  # noqa: E731
    wavelet = {"vanishing_moments": get("vm"), "levels": get("levels"), "boundary": get("boundary")}
    overrides = {
        "y": get("y"),
        "x": get("x"),
        "w": get("w"),
        "w_types": get("w_types"),
        "mvalue": True if get("mvalue") else None,
        "scale": False if get("no_scale") else None,
        "pca_fraction": get("pca_fraction"),
        "fit_dir": get("fit_dir"),
        "metrics": get("metrics"),
        "pdf": True if get("pdf") else None,
        "excel": True if get("excel") else None,
        "out": get("out"),
        "threads": get("threads"),
        "wavelet_t": wavelet,
        "wavelet_s": dict(wavelet),
        "mcmc": {
            "seed": get("seed"),
            "total_draws": get("draws"),
            "burn_in": get("burn_in"),
            "thin": get("thin"),
            "store_wavelet": True if get("store_wavelet") else None,
        },
        "inference": {"alpha": get("alpha"), "deltas": get("delta"), "band_alphas": get("band_alpha")},
    }
    return _prune(overrides)


def _scenario_overrides(args: argparse.Namespace) -> Dict:
    seed = getattr(args, "seed", None)
    return _prune({
        "seed": seed,
        "replicates": getattr(args, "replicates", None),
        "methods": getattr(args, "methods", None),
        "mcmc": {"seed": seed},
    })


def build_config(args: argparse.Namespace) -> RunConfig:
    """
    Merge environment defaults, the JSON config file and flags, in that order.

    Raises:
        ValidationError when the merged settings fail validation
    """
    merged = dict(env_defaults())
    if getattr(args, "config", None):
        merged = _deep_merge(merged, read_json(args.config))
    if getattr(args, "scenario", None):
        merged["scenario"] = read_json(args.scenario)
    merged = _deep_merge(merged, _flag_overrides(args))
    if args.command == "simulate":
        merged["scenario"] = _deep_merge(merged.get("scenario") or {}, _scenario_overrides(args))
    try:
        return RunConfig.model_validate(merged)
    except PydanticValidationError as exc:
        raise ValidationError("invalid_config", detail=str(exc))


# ============================================================================
# COMMANDS
# ============================================================================

def load_dataset(cfg: RunConfig) -> FunctionalDataset:
    """Read Y, X and optional W, checking that their row counts agree."""
    if not cfg.y or not cfg.x:
        raise ValidationError("invalid_config", detail="fit commands need both --y and --x")
    Y, s_labels = read_labeled_matrix(cfg.y)
    X, t_labels = read_labeled_matrix(cfg.x)
    if Y.shape[0] != X.shape[0]:
        raise ValidationError("row_mismatch", first=cfg.y, first_rows=Y.shape[0], second=cfg.x,
                              second_rows=X.shape[0])
    W, w_labels, w_types = None, [], []
    if cfg.w:
        W, w_labels = read_labeled_matrix(cfg.w)
        if W.shape[0] != Y.shape[0]:
            raise ValidationError("row_mismatch", first=cfg.y, first_rows=Y.shape[0], second=cfg.w,
                                  second_rows=W.shape[0])
        w_types = read_covariate_types(cfg.w_types, w_labels)
    if cfg.mvalue:
        Y = to_m_values(Y)
    return FunctionalDataset(Y=Y, X=X, W=W, s_labels=s_labels, t_labels=t_labels, w_labels=w_labels,
                             w_types=w_types)


def cmd_fit(cfg: RunConfig, method: str) -> int:
    """Fit FFR or site-wise DLMs and write the posterior summaries and draws."""
    raw = load_dataset(cfg)
    dataset, report = preprocess(raw, scale=cfg.scale, pca_fraction=cfg.pca_fraction)
    t_spec = make_spec(cfg.wavelet_t, dataset.T)
    if method == "ffr":
        draws = fit_ffr(dataset, t_spec, make_spec(cfg.wavelet_s, dataset.S), cfg.mcmc, threads=cfg.threads)
    else:
        draws = fit_dlm_surface(dataset, t_spec, cfg.mcmc, threads=cfg.threads).surface_draws

    os.makedirs(cfg.out, exist_ok=True)
    write_grid_csv(os.path.join(cfg.out, BETA_MEAN_FILE), draws.mean_surface(), dataset.t_labels, dataset.s_labels)
    write_grid_csv(os.path.join(cfg.out, GAMMA_CURVES_FILE), draws.mean_scalar_curves(), dataset.w_labels,
                   dataset.s_labels, row_axis="w")
    write_json(os.path.join(cfg.out, PREPROCESS_REPORT_FILE), report.to_dict())
    save_draws(cfg.out, draws, config=cfg.model_dump(exclude={"scenario"}))
    logger.info("Wrote %s fit to %s", method.upper(), cfg.out)
    return EXIT_OK


def cmd_infer(cfg: RunConfig) -> int:
    """Pointwise probabilities, BFDR flags per delta, SimBaS scores and joint bands."""
    draws = load_draws(cfg.fit_dir or cfg.out)
    os.makedirs(cfg.out, exist_ok=True)
    t, s = draws.t_labels, draws.s_labels
    settings = cfg.inference
    summary = {"method": draws.method, "seed": draws.seed, "config_hash": draws.config_hash, "bfdr": [],
               "simbas": None}

    def emit(name: str, grid, title: str, **scale) -> None:
        write_grid_csv(os.path.join(cfg.out, f"{name}.csv"), grid, t, s)
        render_heatmap(os.path.join(cfg.out, f"{name}.png"), grid, title, **scale)

    for delta in settings.deltas:
        p_grid = pointwise_probability(draws, delta)
        result = bfdr_flag(p_grid, settings.alpha, delta)
        emit(f"p_delta_{delta:g}", p_grid, f"Pr(|beta| > {delta:g})", vmin=0.0, vmax=1.0)
        emit(f"bfdr_flags_{delta:g}", result.flags, f"BFDR flags, delta={delta:g}", vmin=0.0, vmax=1.0)
        summary["bfdr"].append(result.to_dict())

    scores = simbas(draws, settings.band_alphas)
    emit("simbas", scores.simbas_grid, "SimBaS", vmin=0.0, vmax=1.0)
    for alpha in settings.band_alphas:
        lower, upper = scores.band(alpha)
        write_band_csv(os.path.join(cfg.out, f"bands_{alpha:g}.csv"), lower, upper, t, s)
    summary["simbas"] = scores.to_dict(settings.band_alphas)
    write_json(os.path.join(cfg.out, INFERENCE_SUMMARY_FILE), summary)
    logger.info("Wrote inference outputs to %s", cfg.out)
    return EXIT_OK


def cmd_simulate(cfg: RunConfig) -> int:
    """Run a scenario's replicates and write metrics.json with its grids."""
    if cfg.scenario is None:
        raise ValidationError("invalid_config", detail="simulate needs --scenario or a 'scenario' config key")
    scenario = Scenario.from_config(cfg.scenario)
    report = run_replicates(scenario, threads=cfg.threads)
    os.makedirs(cfg.out, exist_ok=True)

    t = [str(i + 1) for i in range(report.truth.T)]
    s = [str(i + 1) for i in range(report.truth.S)]
    grids = {"truth": "truth.csv"}
    write_grid_csv(os.path.join(cfg.out, "truth.csv"), report.truth.values, t, s)
    for method, metrics in report.methods.items():
        named = {
            f"rmse_{method}": metrics.rmse_grid,
            f"mean_{method}": metrics.mean_surface,
            f"simbas_mean_{method}": metrics.simbas_mean_grid,
        }
        for proc, freq in metrics.flag_frequency.items():
            named[f"freq_{method}_{proc}"] = freq
        for name, grid in named.items():
            grids[name] = f"{name}.csv"
            write_grid_csv(os.path.join(cfg.out, grids[name]), grid, t, s)

    payload = report.to_summary_dict()
    payload["grids"] = grids
    payload["config"] = cfg.scenario.model_dump()
    write_json(os.path.join(cfg.out, METRICS_FILE), payload)
    logger.info("Wrote metrics for '%s' to %s", scenario.name, cfg.out)
    return EXIT_OK


def cmd_report(cfg: RunConfig) -> int:
    """Tables and heat maps from one or more metrics.json files."""
    if not cfg.metrics:
        raise ValidationError("invalid_config", detail="report needs at least one --metrics file")
    summaries = []
    for path in cfg.metrics:
        if not os.path.exists(path):
            raise ValidationError("missing_metrics", path=path)
        summaries.append(read_json(path))
    os.makedirs(cfg.out, exist_ok=True)

    images: List[str] = []
    for path, summary in zip(cfg.metrics, summaries):
        base = os.path.dirname(os.path.abspath(path))
        for name, filename in sorted(summary.get("grids", {}).items()):
            grid, _, _ = read_grid_csv(os.path.join(base, filename))
            is_rate = name.startswith(("freq_", "simbas_mean_"))
            images.append(render_heatmap(os.path.join(cfg.out, f"{summary['scenario']}_{name}.png"), grid,
                                         f"{summary['scenario']}: {name}",
                                         **({"vmin": 0.0, "vmax": 1.0} if is_rate else {})))

    tables = build_tables(summaries)
    for name, frame in tables.items():
        frame.to_csv(os.path.join(cfg.out, f"table_{name.lower()}.csv"), index=False, lineterminator="\n")
    with open(os.path.join(cfg.out, REPORT_MARKDOWN_FILE), "w") as handle:
        handle.write(markdown_report(tables, images))
    if cfg.pdf:
        export_to_pdf(os.path.join(cfg.out, "report.pdf"), tables, images)
    if cfg.excel:
        export_to_excel(os.path.join(cfg.out, "report.xlsx"), tables)
    logger.info("Wrote report for %d scenario(s) to %s", len(summaries), cfg.out)
    return EXIT_OK


# ============================================================================
# ARGUMENT PARSING
# ============================================================================

def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration; flags override its keys")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--threads", type=int, help="worker threads (fits) or processes (simulate)")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return common


def _add_fit_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--y", help="outcome CSV, n x S with a header row of site labels")
    parser.add_argument("--x", help="exposure CSV, n x T with a header row of time labels")
    parser.add_argument("--w", help="optional scalar covariate CSV, n x q")
    parser.add_argument("--w-types", dest="w_types", help="JSON sidecar marking W columns continuous/categorical")
    parser.add_argument("--mvalue", action="store_true", help="convert proportion outcomes to M-values")
    parser.add_argument("--no-scale", dest="no_scale", action="store_true", help="center without scaling")
    parser.add_argument("--pca-fraction", dest="pca_fraction", type=float)
    parser.add_argument("--draws", type=int, help="total MCMC iterations")
    parser.add_argument("--burn-in", dest="burn_in", type=int)
    parser.add_argument("--thin", type=int)
    parser.add_argument("--vm", type=int, help="Daubechies vanishing moments (both axes)")
    parser.add_argument("--levels", type=int, help="decomposition levels (both axes)")
    parser.add_argument("--boundary", choices=["zero_pad", "periodic", "reflect"])
    parser.add_argument("--store-wavelet", dest="store_wavelet", action="store_true",
                        help="also keep wavelet-space draws")


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog=CLI_PROG, description=APP_NAME)
    parser.add_argument("--version", action="version", version=f"%(prog)s {APP_VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, text in (("fit-ffr", "fit the wavelet-space function-on-function regression"),
                       ("fit-dlm", "fit site-by-site distributed-lag models")):
        _add_fit_arguments(sub.add_parser(name, parents=[common], help=text))

    infer = sub.add_parser("infer", parents=[common], help="BFDR and SimBaS inference on stored draws")
    infer.add_argument("--fit-dir", dest="fit_dir", help="directory holding the draws manifest")
    infer.add_argument("--delta", type=float, nargs="*", help="effect-size thresholds (empty for SimBaS only)")
    infer.add_argument("--alpha", type=float, help="BFDR bound")
    infer.add_argument("--band-alpha", dest="band_alpha", type=float, nargs="*", help="joint band levels")

    simulate = sub.add_parser("simulate", parents=[common], help="run a simulation scenario")
    simulate.add_argument("--scenario", help="scenario JSON file")
    simulate.add_argument("--replicates", type=int)
    simulate.add_argument("--methods", nargs="+", choices=["ffr", "dlm"])

    report = sub.add_parser("report", parents=[common], help="tables and heat maps from metrics files")
    report.add_argument("--metrics", nargs="+", help="metrics.json files written by simulate")
    report.add_argument("--pdf", action="store_true", help="also write report.pdf")
    report.add_argument("--excel", action="store_true", help="also write report.xlsx")
    return parser


COMMANDS = {
    "fit-ffr": lambda cfg: cmd_fit(cfg, "ffr"),
    "fit-dlm": lambda cfg: cmd_fit(cfg, "dlm"),
    "infer": cmd_infer,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        cfg = build_config(args)
        return COMMANDS[args.command](cfg)
    except (ValidationError, NumericalError) as exc:
        print(f"{CLI_PROG}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
