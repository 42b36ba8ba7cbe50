"""Roll out the lever policy and export the background dataset.

    python gen_data.py --episodes 15 --holdout 1,3 --seed 7 --out outputs/lever
"""
from pathlib import Path
import argparse
import logging

from src import lever_env
from src.errors import EXIT_OK, exit_code_for
from src.models import resolve_model
from src.utils import ensure_dir, setup_logging

# ---------- CONFIG (edit) ----------
OUTDIR = Path("outputs/lever")
EPISODES = 15
HOLDOUT = (1, 3)
SEED = 0
MODEL = "builtin:scripted"
OVERWRITE = False
LOGLEVEL = "INFO"
# -----------------------------------


def parse_ids(text: str) -> tuple:
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def run(out: Path, episodes=EPISODES, holdout=HOLDOUT, seed=SEED, model=MODEL,
        max_steps=lever_env.MAX_STEPS, workers=None, overwrite=OVERWRITE):
    ensure_dir(out)
    log_path = out / "episodes.json"
    csv_path = out / "background.csv"
    if not overwrite and log_path.exists() and csv_path.exists():
        logging.warning(f"{log_path} and {csv_path} exist, skipping (use --overwrite)")
        return

    policy = resolve_model(model)
    eps = lever_env.run_episodes(policy, episodes, seed, max_steps=max_steps, max_workers=workers)
    for e in eps:
        logging.debug(f"episode {e.id}: {e.theta_start:+.3f} -> {e.theta_target:+.3f}, "
                      f"{len(e.steps)} steps, solved={e.terminal_reward_reached}")
    lever_env.save_episodes(eps, log_path)
    logging.info(f"Saved {len(eps)} episodes to {log_path}")
    lever_env.export_background(eps, holdout, csv_path)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Generate lever episodes and a background dataset.")
    parser.add_argument("--episodes", type=int, default=EPISODES, help="Number of episodes")
    parser.add_argument("--holdout", type=parse_ids, default=HOLDOUT, help="Comma-separated episode ids kept out of the background")
    parser.add_argument("--seed", type=int, default=SEED, help="Task sampling seed")
    parser.add_argument("--model", default=MODEL, help="builtin:scripted or MLP weights JSON")
    parser.add_argument("--max-steps", type=int, default=lever_env.MAX_STEPS, help="Episode step cap")
    parser.add_argument("--workers", type=int, default=None, help="Parallel rollouts")
    parser.add_argument("--out", default=OUTDIR, type=Path, help="Output directory")
    parser.add_argument("--overwrite", action="store_true", default=OVERWRITE)
    parser.add_argument("--log-level", default=LOGLEVEL)
    args = parser.parse_args(argv)

    setup_logging(args.log_level)
    try:
        run(args.out, args.episodes, args.holdout, args.seed, args.model,
            args.max_steps, args.workers, args.overwrite)
    except Exception as e:
        code = exit_code_for(e)
        logging.error(str(e))
        return code
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
