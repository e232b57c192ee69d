import logging
from dataclasses import asdict
from pathlib import Path

import pandas as pd

from commands.adapt import backbone_path
from commands.common import check_data_paths, maybe_record, output_dir, write_table
from utils.backbone import load_backbone
from utils.experiment import ADAPTED_COLUMNS, build_benchmark, evaluate_adapted, evaluate_frozen, with_summary_rows
from utils.graph_store import normalize
from utils.intervention import load_intervention
from utils.selection import read_mask

logger = logging.getLogger(__name__)


def run_eval_command(config, args):
    """
    Score frozen and adapted predictions per seed

    Rows without an intervention checkpoint (or with --frozen-only) carry
    frozen accuracies only. Writes results.csv / results.json with trailing
    mean and std rows.

    Returns:
    - the results DataFrame
    """
    check_data_paths(config)
    out = output_dir(config)
    frozen_only = getattr(args, "frozen_only", False)
    rows = []
    for seed in config.run.seeds:
        bench = build_benchmark(config.data, seed)
        bb = load_backbone(backbone_path(config, args, seed), normalize(bench.source.adj))
        directory = Path(config.run.out_dir) / f"seed-{seed}"
        intervention_path = directory / "intervention.json"
        if frozen_only or not intervention_path.is_file():
            rows.append(evaluate_frozen(bb, bench, seed))
            continue
        variant = load_intervention(intervention_path)
        mask = read_mask(directory / "mask.txt", bench.target.n)
        rows.append(evaluate_adapted(bb, bench, variant, mask, config.run.mode, seed, arm="adapted"))

    table = pd.DataFrame([asdict(r) for r in rows])
    if (table["arm"] == "frozen").all():
        table = table.drop(columns=ADAPTED_COLUMNS)
    table = with_summary_rows(table)
    write_table(table, out, "results")
    maybe_record(config, table, "eval")
    return table
