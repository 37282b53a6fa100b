"""
Component ablation: the full model against the no-weighting and single-view
variants, each evaluated raw and under normalization tuned on the val split.
"""

import logging
import math
from dataclasses import replace

from evaluation import report
from matching import (
    DEFAULT_GRID,
    ORDERS,
    aggregate_scores,
    grid_search_temperatures,
    normalize_matrix,
    score_split,
)
from training import train

# "normalized" is the single configuration (order and temperatures) chosen on val
MODES = ("raw", "row-only", "col-only", "row-then-col", "normalized")
TREND_TOLERANCE = 1.0


def _variants(run_cfg):
    full_model, full_train = run_cfg.model, run_cfg.train
    return {
        "full": (full_model, full_train),
        "no-weighting": (full_model, replace(full_train, weighting=False)),
        "single-view": (replace(full_model, K=1), full_train),
    }


def evaluate_modes(dataset, params, model_cfg, grid=DEFAULT_GRID, threads=1):
    """Test RSUM raw, per normalization order and for the val-selected configuration.

    Temperatures and the "normalized" order are chosen on the val split only.
    """
    S_test, c2i_test = score_split(dataset, "test", params, model_cfg)
    A_test = aggregate_scores(S_test)
    S_val, c2i_val = score_split(dataset, "val", params, model_cfg)
    A_val = aggregate_scores(S_val)
    results = {"raw": report(A_test, c2i_test).rsum}
    for mode in ("row-only", "col-only", "row-then-col"):
        best, _ = grid_search_temperatures(A_val, c2i_val, grid, [mode], threads)
        results[mode] = report(normalize_matrix(A_test, best), c2i_test).rsum
    best, _ = grid_search_temperatures(A_val, c2i_val, grid, ORDERS, threads)
    results["normalized"] = report(normalize_matrix(A_test, best), c2i_test).rsum
    results["normalized_order"] = best.order
    return results


def _mean(values):
    return math.fsum(values) / len(values)


def _sweep(dataset, model_cfg, train_cfg, seeds, grid, threads):
    runs = []
    for seed in seeds:
        params, _ = train(dataset, model_cfg, replace(train_cfg, seed=seed))
        runs.append(evaluate_modes(dataset, params, model_cfg, grid, threads))
    return {mode: _mean([r[mode] for r in runs]) for mode in MODES}


def run_ablation(dataset, run_cfg, seeds=(0, 1, 2, 3, 4), views=None, batch_sizes=None,
                 grid=DEFAULT_GRID, threads=1):
    """Train every variant for every seed and average test RSUM per mode.

    Args:
        views: Optional list of view counts K for a sweep of the full model
        batch_sizes: Optional list of batch sizes for a sweep of the full model

    Returns:
        Dict with per-seed values, means, the two trend checks and the sweeps
    """
    if not seeds:
        raise ValueError("Ablation needs at least one seed")
    per_seed = {}
    for name, (model_cfg, train_cfg) in _variants(run_cfg).items():
        per_seed[name] = []
        for seed in seeds:
            logging.info(f"Ablation variant {name}, seed {seed}")
            params, _ = train(dataset, model_cfg, replace(train_cfg, seed=seed))
            per_seed[name].append(evaluate_modes(dataset, params, model_cfg, grid, threads))

    means = {name: {mode: _mean([r[mode] for r in runs]) for mode in MODES} for name, runs in per_seed.items()}
    full = means["full"]
    checks = {
        "weighting_helps": full["raw"] >= means["no-weighting"]["raw"] - TREND_TOLERANCE,
        "normalization_helps": full["normalized"] >= full["raw"] - TREND_TOLERANCE,
    }
    for name, values in means.items():
        logging.info(f"{name:>13}: " + ", ".join(f"{mode} {values[mode]:.2f}" for mode in MODES))
    for name, ok in checks.items():
        (logging.info if ok else logging.warning)(f"Trend check {name}: {'PASS' if ok else 'FAIL'}")

    view_sweep = {}
    for k in views or ():
        view_sweep[str(k)] = _sweep(dataset, replace(run_cfg.model, K=int(k)), run_cfg.train, seeds, grid, threads)
        logging.info(f"K={k}: raw {view_sweep[str(k)]['raw']:.2f}, "
                     f"normalized {view_sweep[str(k)]['normalized']:.2f}")

    batch_sweep = {}
    for size in batch_sizes or ():
        batch_sweep[str(size)] = _sweep(dataset, run_cfg.model, replace(run_cfg.train, batch_size=int(size)),
                                        seeds, grid, threads)
        logging.info(f"batch {size}: raw {batch_sweep[str(size)]['raw']:.2f}, "
                     f"normalized {batch_sweep[str(size)]['normalized']:.2f}")

    return {"seeds": list(seeds), "per_seed": per_seed, "means": means, "checks": checks,
            "views": view_sweep, "batch_sizes": batch_sweep}
