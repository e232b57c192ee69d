import logging

from commands.common import maybe_record, output_dir, progress_factory, write_json, write_table
from utils.errors import ConfigError
from utils.theory import run_trials, summarize_trials

logger = logging.getLogger(__name__)


def run_theory_command(config, args):
    """
    Risk-reduction trials on random orthogonal-shift instances

    Returns:
    - (trial table, summary dict)
    """
    if not 0.0 <= args.repair_quality <= 1.0:
        raise ConfigError(f"--repair-quality must lie in [0, 1], got {args.repair_quality}")
    if not 1 <= args.rank <= args.dims:
        raise ConfigError(f"--rank must lie in 1..{args.dims}, got {args.rank}")
    if args.trials < 1:
        raise ConfigError("--trials must be at least 1")

    out = output_dir(config)
    seed = config.run.seeds[0]
    table = run_trials(args.trials, n=args.nodes, d=args.dims, classes=args.classes, m=args.rank,
                       repair_quality=args.repair_quality, seed=seed, monte_carlo=not args.no_monte_carlo,
                       draws=args.draws, progress=progress_factory(args, "theory"))
    summary = summarize_trials(table)
    write_table(table, out, "theory")
    write_json(summary, out / "theory_summary.json")
    logger.info("risk inequality passed on %s/%s valid trials, distance inequality on %s",
                summary.get("risk_passed", 0), summary["valid"], summary.get("distance_passed", 0))
    maybe_record(config, table, "theory", summary=summary)
    return table, summary
