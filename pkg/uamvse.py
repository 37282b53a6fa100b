#!/usr/bin/env python3
"""
Command-line entry point: synthetic data generation, training, evaluation,
score normalization, temperature search, gradient checks and ablations.

Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O error,
3 numeric failure or failed check, 130 interrupted.
"""

import argparse
import json
import logging
import os
import sys
import traceback
from dataclasses import replace

from dotenv import load_dotenv

from ablation import run_ablation
from config import ConfigError, config_help, load_run_config, save_run_config
from dataset import DataError, generate_synthetic, load_dataset, save_dataset
from evaluation import fold_report, make_folds, per_view_reports, report
from matching import (
    DEFAULT_GRID,
    ORDERS,
    NormalizationConfig,
    aggregate_scores,
    grid_search_temperatures,
    load_score_csv,
    normalize_matrix,
    save_score_csv,
    score_split,
)
from model import load_checkpoint
from numerics import NumericError
from training import run_gradient_check, train

VERSION = "1.0"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_INTERRUPTED = 0, 1, 2, 3, 130
LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"


def setup_logging(log_file=None, verbose=False):
    """Log to a file (UAMVSE_LOG_FILE, default general.log) and to the console."""
    log_file = log_file or os.getenv("UAMVSE_LOG_FILE", "general.log")
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=LOG_FORMAT,
        handlers=[
            logging.FileHandler(log_file),
            logging.StreamHandler()
        ],
        force=True,
    )


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class HelpFormatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


def parse_float_list(text):
    try:
        values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'")
    if not values:
        raise argparse.ArgumentTypeError("list is empty")
    return values


def parse_int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")


def build_parser():
    common = ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="Override one configuration key (repeatable)")
    common.add_argument("--verbose", action="store_true", default=False, help="Enable debug logging")
    common.add_argument("--log-file", help="Log file (default: UAMVSE_LOG_FILE or general.log)")

    parser = ArgumentParser(prog="uamvse", description="Uncertainty-aware multi-view visual semantic embedding",
                            formatter_class=HelpFormatter, epilog=config_help())
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def command(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text, description=help_text,
                              formatter_class=HelpFormatter, epilog=config_help())

    p = command("gen-data", "Generate a synthetic paired-feature dataset")
    p.add_argument("--out", required=True, help="Output directory for feature files and manifest")
    p.add_argument("--seed", type=int, help="Override data.seed")

    p = command("train", "Train a model and write checkpoints plus log.jsonl")
    p.add_argument("--data", help="Dataset directory or manifest (default: paths.data_manifest)")
    p.add_argument("--run", help="Run directory (default: paths.run_dir)")
    p.add_argument("--seed", type=int, help="Override train.seed")
    p.add_argument("--epochs", type=int, help="Override train.epochs")
    p.add_argument("--progress", action="store_true", default=False, help="Show a per-epoch progress bar")

    p = command("eval", "Evaluate a checkpoint on one split and write report.json")
    p.add_argument("--checkpoint", required=True, help="UAMP checkpoint")
    p.add_argument("--data", help="Dataset directory or manifest (default: paths.data_manifest)")
    p.add_argument("--split", default="test", help="Split to evaluate")
    p.add_argument("--normalize", nargs="?", const="", metavar="JSON",
                   help="Normalize scores, from a grid-search JSON or, without a file, the normalization section")
    p.add_argument("--folds", type=int, default=0, help="Average over this many image folds (0: no folds)")
    p.add_argument("--per-view", action="store_true", default=False, help="Also report every view alone")
    p.add_argument("--out", help="Report path (default: report.json next to the checkpoint)")

    p = command("normalize", "Normalize a CSV score matrix")
    p.add_argument("--scores", required=True, help="Input CSV (rows images, columns captions)")
    p.add_argument("--tau-row", type=float, help="Row temperature (default: normalization.tau_row)")
    p.add_argument("--tau-col", type=float, help="Column temperature (default: normalization.tau_col)")
    p.add_argument("--order", choices=ORDERS, help="Normalization order (default: normalization.order)")
    p.add_argument("--out", required=True, help="Output CSV")

    p = command("grid-search", "Search normalization temperatures on a split")
    p.add_argument("--checkpoint", required=True, help="UAMP checkpoint")
    p.add_argument("--data", help="Dataset directory or manifest (default: paths.data_manifest)")
    p.add_argument("--split", default="val", help="Split to tune on")
    p.add_argument("--grid", type=parse_float_list, default=list(DEFAULT_GRID), help="Comma-separated temperatures")
    p.add_argument("--orders", default=",".join(ORDERS), help="Comma-separated orders to try")
    p.add_argument("--threads", type=int, default=1, help="Evaluate grid points concurrently")
    p.add_argument("--out", help="Output JSON (default: best_norm.json next to the checkpoint)")

    p = command("grad-check", "Compare analytic and finite-difference gradients")
    p.add_argument("--seed", type=int, default=1, help="First seed")
    p.add_argument("--trials", type=int, default=20, help="Parameters sampled per seed")
    p.add_argument("--seeds", type=int, default=5, help="Number of seeds")
    p.add_argument("--tolerance", type=float, default=1e-4, help="Maximum relative error")

    p = command("ablate", "Train and compare the ablation variants")
    p.add_argument("--data", help="Dataset directory or manifest (default: paths.data_manifest)")
    p.add_argument("--run", help="Directory for ablation.json (default: paths.run_dir)")
    p.add_argument("--seeds", type=int, default=5, help="Number of seeds, starting at train.seed")
    p.add_argument("--views", type=parse_int_list, default=None, help="Comma-separated view counts to sweep")
    p.add_argument("--batch-sizes", type=parse_int_list, default=None, help="Comma-separated batch sizes to sweep")
    p.add_argument("--threads", type=int, default=1, help="Grid-search threads")
    return parser


def _load_data(args, cfg):
    dataset = load_dataset(args.data or cfg.paths.data_manifest)
    # Feature dims always come from the data
    cfg.model.d1, cfg.model.d2 = dataset.region_dim, dataset.token_dim
    return dataset


def cmd_gen_data(args, cfg):
    if args.seed is not None:
        cfg.data.seed = args.seed
    dataset = generate_synthetic(cfg.data)
    save_dataset(dataset, args.out)
    print(f"Wrote {len(dataset.images)} images and {len(dataset.captions)} captions to {args.out}")
    return EXIT_OK


def cmd_train(args, cfg):
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    cfg.train.show_progress = args.progress
    dataset = _load_data(args, cfg)
    cfg.validate()
    run_dir = args.run or cfg.paths.run_dir
    os.makedirs(run_dir, exist_ok=True)
    save_run_config(cfg, os.path.join(run_dir, "config.json"))
    _, records = train(dataset, cfg.model, cfg.train, run_dir)
    scored = [r for r in records if r["val_rsum"] is not None]
    if scored:
        best = max(scored, key=lambda r: r["val_rsum"])
        print(f"Best validation rsum {best['val_rsum']:.2f} at epoch {best['epoch']}; run in {run_dir}")
    else:
        print(f"Trained {len(records)} epochs; run in {run_dir}")
    return EXIT_OK


def cmd_eval(args, cfg):
    params, model_cfg = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data or cfg.paths.data_manifest)
    S, c2i = score_split(dataset, args.split, params, model_cfg)
    A = aggregate_scores(S)
    label = f"{os.path.basename(args.checkpoint)}:{args.split}"
    if args.normalize is not None:
        norm_cfg = cfg.normalization
        if args.normalize:
            with open(args.normalize, "r", encoding="utf-8") as f:
                data = json.load(f)
            norm_cfg = NormalizationConfig.from_dict({k: v for k, v in data.items() if k != "rsum"})
        A = normalize_matrix(A, norm_cfg)
        label += f":{norm_cfg.order}"
        logging.info(f"Normalization: {norm_cfg.order}, tau_row={norm_cfg.tau_row}, tau_col={norm_cfg.tau_col}")

    if args.folds:
        result = fold_report(A, c2i, make_folds(A.shape[0], args.folds), label)
    else:
        result = report(A, c2i, label)
    if args.per_view:
        for view_report in per_view_reports(S, c2i):
            logging.info(f"{view_report.label}: {view_report.summary()}")

    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "report.json")
    result.save_json_report(out)
    result.save_csv_report(cfg.paths.results_csv)
    print(result.summary())
    return EXIT_OK


def cmd_normalize(args, cfg):
    flags = {"tau_col": args.tau_col, "tau_row": args.tau_row, "order": args.order}
    norm_cfg = replace(cfg.normalization, **{k: v for k, v in flags.items() if v is not None}).validate()
    save_score_csv(args.out, normalize_matrix(load_score_csv(args.scores), norm_cfg))
    print(f"Normalized scores written to {args.out}")
    return EXIT_OK


def cmd_grid_search(args, cfg):
    orders = [o.strip() for o in args.orders.split(",") if o.strip()]
    params, model_cfg = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data or cfg.paths.data_manifest)
    S, c2i = score_split(dataset, args.split, params, model_cfg)
    best, rsum = grid_search_temperatures(aggregate_scores(S), c2i, args.grid, orders, args.threads)
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "best_norm.json")
    with open(out, "w", encoding="utf-8") as f:
        json.dump(dict(best.to_dict(), rsum=rsum), f, indent=2)
    print(f"Best {best.order} tau_row={best.tau_row} tau_col={best.tau_col} rsum {rsum:.2f} -> {out}")
    return EXIT_OK


def cmd_grad_check(args, cfg):
    result = run_gradient_check(seed=args.seed, trials=args.trials, n_seeds=args.seeds, tolerance=args.tolerance)
    print(f"Gradient check: {len(result.results)} parameters, max relative error {result.max_rel_error:.3e}, "
          f"{len(result.failures)} failed")
    return EXIT_OK if result.passed else EXIT_NUMERIC


def cmd_ablate(args, cfg):
    dataset = _load_data(args, cfg)
    cfg.validate()
    seeds = tuple(cfg.train.seed + n for n in range(args.seeds))
    result = run_ablation(dataset, cfg, seeds=seeds, views=args.views, batch_sizes=args.batch_sizes,
                          threads=args.threads)
    run_dir = args.run or cfg.paths.run_dir
    os.makedirs(run_dir, exist_ok=True)
    out = os.path.join(run_dir, "ablation.json")
    with open(out, "w", encoding="utf-8") as f:
        json.dump(result, f, indent=2)
    print(f"Ablation written to {out}; checks: " +
          ", ".join(f"{name} {'PASS' if ok else 'FAIL'}" for name, ok in result["checks"].items()))
    return EXIT_OK if all(result["checks"].values()) else EXIT_NUMERIC


def exit_code_for(error):
    """Map an exception to the documented exit code."""
    if isinstance(error, ConfigError):
        return EXIT_USAGE
    if isinstance(error, (DataError, OSError, json.JSONDecodeError)):
        return EXIT_DATA
    if isinstance(error, NumericError):
        return EXIT_NUMERIC
    return EXIT_USAGE


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "normalize": cmd_normalize,
    "grid-search": cmd_grid_search,
    "grad-check": cmd_grad_check,
    "ablate": cmd_ablate,
}


def main(argv=None):
    """Main execution function with error handling. Returns the exit code."""
    load_dotenv()
    args = None
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    setup_logging(args.log_file, args.verbose)
    try:
        logging.info("=" * 60)
        logging.info(f"uamvse v{VERSION}: {args.command}")
        logging.info("=" * 60)
        cfg = load_run_config(args.config, args.set)
        code = COMMANDS[args.command](args, cfg)
        logging.info("=" * 60)
        logging.info(f"{args.command} finished with exit code {code}")
        logging.info("=" * 60)
        return code
    except KeyboardInterrupt:
        logging.warning("Interrupted by user")
        return EXIT_INTERRUPTED
    except Exception as e:
        code = exit_code_for(e)
        logging.error(f"{args.command} failed: {str(e)}")
        if args.verbose:
            logging.error(traceback.format_exc())
        return code


if __name__ == "__main__":
    sys.exit(main())
