"""Explain one lever state with causal / marginal / conditional Shapley values.

    python explain.py --dataset outputs/lever/background.csv --instance ep3:grasp \
        --methods causal,marginal --out outputs/lever/report_ep3_grasp
"""
from pathlib import Path
import argparse
import logging

from src.errors import EXIT_OK, exit_code_for
from src.report import ReportConfig, explain, parse_methods
from src.samplers import DEFAULT_MC_SAMPLES
from src.utils import setup_logging

# ---------- CONFIG (edit) ----------
MODEL = "builtin:scripted"
ORDERING = Path("config/lever_ordering.json")
METHODS = "causal,marginal"
ESTIMATOR = "exact"
SAMPLES = DEFAULT_MC_SAMPLES
SEED = 0
LOGLEVEL = "INFO"
# -----------------------------------


def budget(text: str):
    return "all" if text == "all" else int(text)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Shapley explanations of a policy at one instance.")
    parser.add_argument("--dataset", required=True, type=Path, help="Background CSV")
    parser.add_argument("--model", default=MODEL, help="builtin:scripted or MLP weights JSON")
    parser.add_argument("--ordering", default=ORDERING, type=Path, help="Causal ordering JSON")
    parser.add_argument("--instance", required=True, help="ep<ID>:<STEP|push|grasp|pull> or inline:v1,..,vN")
    parser.add_argument("--episodes", default=None, type=Path, help="Episode log (default: next to the dataset)")
    parser.add_argument("--methods", default=METHODS, help="Comma-separated subset of marginal,conditional,causal")
    parser.add_argument("--estimator", default=ESTIMATOR, choices=["exact", "kernel"])
    parser.add_argument("--coalition-budget", default="all", type=budget, help="Kernel coalitions, or 'all'")
    parser.add_argument("--samples", type=int, default=SAMPLES, help="Monte Carlo samples per coalition")
    parser.add_argument("--seed", type=int, default=SEED)
    parser.add_argument("--ridge", type=float, default=None, help="Covariance ridge (default: scaled trace)")
    parser.add_argument("--exhaustive", action="store_true", help="Marginal: sweep every background row")
    parser.add_argument("--workers", type=int, default=None, help="Thread pool size")
    parser.add_argument("--out", required=True, type=Path, help="Output directory")
    parser.add_argument("--log-level", default=LOGLEVEL)
    args = parser.parse_args(argv)

    setup_logging(args.log_level)
    try:
        config = ReportConfig(
            dataset=args.dataset,
            instance=args.instance,
            out=args.out,
            model=args.model,
            ordering=args.ordering,
            methods=parse_methods(args.methods),
            estimator=args.estimator,
            mc_samples=args.samples,
            seed=args.seed,
            coalition_budget=args.coalition_budget,
            episodes=args.episodes,
            ridge=args.ridge,
            exhaustive=args.exhaustive,
            max_workers=args.workers,
        )
        explain(config)
    except Exception as e:
        code = exit_code_for(e)
        logging.error(str(e))
        return code
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
