import logging

from commands.common import check_data_paths, maybe_record, output_dir, progress_factory, write_table
from data.hyperparameters import outside_search_space
from utils.config import parse_override
from utils.errors import ConfigError
from utils.experiment import sweep

logger = logging.getLogger(__name__)


def parse_values(key, text):
    """Comma-separated values, each parsed like a --set value"""
    values = [parse_override(f"{key}={token.strip()}")[1] for token in text.split(",") if token.strip()]
    if not values:
        raise ConfigError(f"--values for {key} is empty")
    column, outside = outside_search_space(key, values)
    if outside:
        logger.warning("%s values %s lie outside the tuned search space for %s", key, outside, column)
    return values


def run_sweep_command(config, args):
    """
    Sensitivity sweep of one config key

    Returns:
    - (per-seed table, one summary row per value)
    """
    check_data_paths(config)
    out = output_dir(config)
    values = parse_values(args.key, args.values)
    table, summary = sweep(config, args.key, values, config.run.seeds, progress=progress_factory(args, "sweep"))
    write_table(table, out, "sweep")
    write_table(summary, out, "sweep_summary")
    maybe_record(config, table, "sweep")
    return table, summary
