"""Helpers shared by the subcommands: output layout, tables, progress bars, ledger."""
import json
import logging
import os
import sys
from pathlib import Path

from tqdm import tqdm

from utils.config import dump_config
from utils.errors import ConfigError

logger = logging.getLogger(__name__)


def output_dir(config):
    path = Path(config.run.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    dump_config(config, path / "config.json")
    return path


def seed_dir(config, seed):
    path = Path(config.run.out_dir) / f"seed-{seed}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def check_data_paths(config):
    """Fail with a usage error naming the first missing dataset file"""
    data = config.data
    if data.source != "files":
        return
    for key in ("edge_file", "feature_file", "label_file", "split_file"):
        path = getattr(data, key)
        if not Path(path).is_file():
            raise ConfigError(f"dataset file not found: {path} (data.{key})")


def progress_factory(args, desc):
    """tqdm wrapper, silent under --quiet or when stderr is not a terminal"""
    disable = getattr(args, "quiet", False) or not sys.stderr.isatty()

    def wrap(iterable):
        return tqdm(iterable, desc=desc, disable=disable, leave=False)

    return wrap


def write_table(table, directory, stem):
    """
    Write ``<stem>.csv`` and ``<stem>.json`` (records) and return both paths.

    Wall-clock columns go to ``<stem>_timings.csv`` so the result tables are
    byte-identical across reruns with the same config and seeds.
    """
    directory = Path(directory)
    timing = [c for c in table.columns if c.startswith("wall_time")]
    if timing:
        keys = [c for c in ("seed", "arm", "key", "value") if c in table.columns]
        table[keys + timing].to_csv(directory / f"{stem}_timings.csv", index=False)
        table = table.drop(columns=timing)
    csv_path, json_path = directory / f"{stem}.csv", directory / f"{stem}.json"
    table.to_csv(csv_path, index=False)
    table.to_json(json_path, orient="records", indent=1)
    logger.info("Wrote %s and %s", csv_path, json_path)
    return csv_path, json_path


def write_json(payload, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, indent=2, default=str)
        f.write("\n")
    return path


def maybe_record(config, table, command, summary=None):
    """Append to the results ledger when one is configured"""
    url = config.run.results_db or os.environ.get("DATABASE_URL")
    if not url:
        return None
    from utils.db import record_results
    run_id = record_results(table, command, config=config.to_dict(), summary=summary, url=url)
    logger.info("Recorded %s results as run %d", command, run_id)
    return run_id
