"""
Command-line entry point.

    python app.py pretrain --preset cora --out-dir runs/cora
    python app.py adapt --out-dir runs/cora --set ssl.epochs=50
    python app.py eval --out-dir runs/cora
    python app.py theory --trials 100 --rank 8
"""
import argparse
import logging
import sys

from commands.ablate import run_ablate_command
from commands.adapt import run_adapt_command
from commands.eval import run_eval_command
from commands.pretrain import run_pretrain_command
from commands.split import run_split_command
from commands.sweep import run_sweep_command
from commands.theory import run_theory_command
from utils.config import INFERENCE_MODES, load_config
from utils.errors import ConfigError, TtreftError

logger = logging.getLogger("ttreft")

COMMANDS = {
    "pretrain": run_pretrain_command,
    "adapt": run_adapt_command,
    "eval": run_eval_command,
    "ablate": run_ablate_command,
    "theory": run_theory_command,
    "split": run_split_command,
    "sweep": run_sweep_command,
}


def _add_common(parser):
    parser.add_argument("--config", help="TOML config file")
    parser.add_argument("--preset", help="dataset preset from the hyperparameter table (e.g. cora)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config value, e.g. ssl.epochs=50 (repeatable)")
    parser.add_argument("--seed", type=int, action="append", dest="seeds",
                        help="run this seed only (repeatable); defaults to run.seeds")
    parser.add_argument("--out-dir", help="output directory (run.out_dir)")
    parser.add_argument("--mode", choices=INFERENCE_MODES, help="inference mode (run.mode)")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings only, no progress bars")


def build_parser():
    parser = argparse.ArgumentParser(prog="ttreft", description="Test-time representation finetuning for GNNs")
    sub = parser.add_subparsers(dest="command", required=True)

    _add_common(sub.add_parser("pretrain", help="pretrain and checkpoint the frozen backbone"))

    adapt = sub.add_parser("adapt", help="adapt an intervention on the shifted target graph")
    _add_common(adapt)
    adapt.add_argument("--checkpoint", help="backbone checkpoint (default: <out-dir>/seed-<s>/backbone.json)")

    evaluate = sub.add_parser("eval", help="score frozen and adapted predictions")
    _add_common(evaluate)
    evaluate.add_argument("--checkpoint", help="backbone checkpoint (default: <out-dir>/seed-<s>/backbone.json)")
    evaluate.add_argument("--frozen-only", action="store_true", help="ignore saved interventions")

    ablate = sub.add_parser("ablate", help="paired ablation table")
    _add_common(ablate)
    ablate.add_argument("--arms", choices=["full", "variant", "objective", "selection", "decoder"], default="full")

    theory = sub.add_parser("theory", help="numerical check of the risk-reduction result")
    _add_common(theory)
    theory.add_argument("--trials", type=int, default=100)
    theory.add_argument("--nodes", type=int, default=200)
    theory.add_argument("--dims", type=int, default=16)
    theory.add_argument("--classes", type=int, default=4)
    theory.add_argument("--rank", type=int, default=8)
    theory.add_argument("--repair-quality", type=float, default=0.9)
    theory.add_argument("--draws", type=int, default=2000, help="Monte Carlo draws per trial")
    theory.add_argument("--no-monte-carlo", action="store_true")

    _add_common(sub.add_parser("split", help="write the shifted benchmark as dataset files"))

    sweep = sub.add_parser("sweep", help="sensitivity sweep of one config key")
    _add_common(sweep)
    sweep.add_argument("--key", required=True, help="config key, e.g. masking.rho")
    sweep.add_argument("--values", required=True, help="comma-separated values, e.g. 0.1,0.3,0.5")
    return parser


def configure_logging(args):
    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def resolve_config(args):
    """Preset, then --config, then --set, then the dedicated flags"""
    config = load_config(path=args.config, preset=args.preset, overrides=args.overrides)
    if args.seeds:
        config.set("run.seeds", args.seeds)
    if args.out_dir:
        config.set("run.out_dir", args.out_dir)
    if args.mode:
        config.set("run.mode", args.mode)
    return config.validate()


def main(argv=None):
    args = build_parser().parse_args(argv)
    configure_logging(args)
    try:
        config = resolve_config(args)
        COMMANDS[args.command](config, args)
    except ConfigError as e:
        logger.error("%s", e)
        return e.exit_code
    except TtreftError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except OSError as e:
        logger.error("%s", e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
