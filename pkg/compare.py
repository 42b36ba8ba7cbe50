"""Compare two explanation reports of the same instance.

    python compare.py outputs/lever/report/marginal.json outputs/lever/report/causal.json
"""
from pathlib import Path
import argparse
import logging

from src.errors import EXIT_OK, exit_code_for
from src.report import compare, comparison_markdown
from src.utils import atomic_write_json, atomic_write_text, setup_logging

LOGLEVEL = "INFO"


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Delta phi (B - A) and feature-group sums for two reports.")
    parser.add_argument("report_a", type=Path)
    parser.add_argument("report_b", type=Path)
    parser.add_argument("--out", default=None, type=Path,
                        help="Write comparison.json and comparison.md here instead of printing")
    parser.add_argument("--log-level", default=LOGLEVEL)
    args = parser.parse_args(argv)

    setup_logging(args.log_level)
    try:
        result = compare(args.report_a, args.report_b)
    except Exception as e:
        code = exit_code_for(e)
        logging.error(str(e))
        return code

    text = comparison_markdown(result)
    if args.out is None:
        print(text)
    else:
        atomic_write_json(args.out / "comparison.json", result)
        atomic_write_text(args.out / "comparison.md", text)
        logging.info(f"Saved comparison to {args.out}")
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
